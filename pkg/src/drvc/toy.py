"""Synthetic parallel corpus with known content and speaker factors.

Every "sentence" is a pink-noise carrier shaped by a sequence of random
band-pass "phones"; it is shared verbatim by all speakers. A speaker is a
fixed linear FIR filter applied to the shared sentence, so the log-mel
difference between two speakers' renditions of a sentence is (up to
windowing effects) a constant per-bin offset.

    python -m drvc.toy OUT_DIR [--speakers 2] [--sentences 20]
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np
from scipy.signal import butter, firwin2, sosfilt, lfilter

from .audio import write_audio

# (frequency as a fraction of Nyquist, linear gain) breakpoints
SPEAKER_CURVES = (
    [(0.0, 1.0), (0.05, 2.5), (0.15, 1.5), (0.35, 0.3), (1.0, 0.1)],
    [(0.0, 0.2), (0.05, 0.5), (0.2, 1.2), (0.35, 2.5), (1.0, 0.8)],
    [(0.0, 0.6), (0.1, 1.8), (0.25, 0.5), (0.5, 1.6), (1.0, 0.3)],
    [(0.0, 1.5), (0.08, 0.4), (0.2, 2.2), (0.45, 0.6), (1.0, 0.4)],
)
FIR_TAPS = 257


def pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    spectrum = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spectrum.size, dtype=np.float64)
    f[0] = 1.0
    x = np.fft.irfft(spectrum / np.sqrt(f), n=n)
    return x / np.std(x)


def make_sentence(duration: float, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    """Shared content: a chain of band-limited phones with smooth envelopes."""
    n = int(round(duration * sample_rate))
    carrier = pink_noise(n, rng)
    out = np.zeros(n)
    pos = 0
    nyq = sample_rate / 2
    while pos < n:
        length = min(int(rng.uniform(0.08, 0.25) * sample_rate), n - pos)
        centre = np.exp(rng.uniform(np.log(250.0), np.log(0.7 * nyq)))
        lo, hi = centre / 1.6, min(centre * 1.6, 0.95 * nyq)
        sos = butter(2, [lo / nyq, hi / nyq], btype="band", output="sos")
        seg = sosfilt(sos, carrier[pos:pos + length])
        env = np.hanning(length) if length > 2 else np.ones(length)
        gain = rng.uniform(0.3, 1.0)
        out[pos:pos + length] = gain * env * seg / (np.std(seg) + 1e-12)
        pos += length
    # low broadband bed keeps inter-phone gaps above the log floor
    return out + 0.02 * carrier


def speaker_filter(index: int) -> np.ndarray:
    curve = SPEAKER_CURVES[index % len(SPEAKER_CURVES)]
    freqs, gains = zip(*curve)
    return firwin2(FIR_TAPS, freqs, gains)


def render(sentence: np.ndarray, speaker: int, level: float = 0.08) -> np.ndarray:
    y = lfilter(speaker_filter(speaker), [1.0], sentence)
    y = level * y / (np.std(sentence) + 1e-12)
    peak = np.max(np.abs(y))
    if peak > 0.99:
        y *= 0.99 / peak
    return y


def make_toy_corpus(root: str | Path, n_speakers: int = 2, n_sentences: int = 20,
                    duration: float = 2.0, sample_rate: int = 22050, seed: int = 0) -> Path:
    """Write ``root/spk{k}/sent_{i:03d}.wav``; deterministic in ``seed``."""
    if not 2 <= n_speakers <= len(SPEAKER_CURVES):
        raise ValueError(f"n_speakers must be in [2, {len(SPEAKER_CURVES)}]")
    root = Path(root)
    rng = np.random.default_rng(seed)
    sentences = [make_sentence(duration, sample_rate, rng) for _ in range(n_sentences)]
    for k in range(n_speakers):
        for i, sent in enumerate(sentences):
            write_audio(root / f"spk{k}" / f"sent_{i:03d}.wav", render(sent, k), sample_rate, subtype="PCM_16")
    return root


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description="Write the synthetic toy corpus")
    parser.add_argument("out")
    parser.add_argument("--speakers", type=int, default=2)
    parser.add_argument("--sentences", type=int, default=20)
    parser.add_argument("--duration", type=float, default=2.0)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    root = make_toy_corpus(args.out, args.speakers, args.sentences, args.duration, seed=args.seed)
    print(f"wrote {args.speakers} x {args.sentences} utterances under {root}")


if __name__ == "__main__":
    main()
