"""Griffin-Lim phase reconstruction from log-mel frames.

A stand-in for a neural vocoder: intelligible for inspection, not for
listening tests.
"""

from __future__ import annotations

import librosa
import numpy as np

from .audio import MelSpectrogram
from .config import AudioConfig


def griffin_lim(mel: MelSpectrogram, cfg: AudioConfig, n_iter: int = 32) -> np.ndarray:
    magnitude_mel = np.exp(mel.frames.astype(np.float64)).T
    y = librosa.feature.inverse.mel_to_audio(
        magnitude_mel,
        sr=cfg.sample_rate,
        n_fft=cfg.n_fft,
        hop_length=cfg.hop_length,
        win_length=cfg.win_length,
        window="hann",
        center=cfg.center,
        power=1.0,
        n_iter=n_iter,
        fmin=cfg.fmin,
        fmax=cfg.fmax,
    )
    peak = np.max(np.abs(y)) if y.size else 0.0
    return y / peak if peak > 1.0 else y
