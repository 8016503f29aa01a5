"""Audio loading, mel features, normalization, cropping, manifests and pair sampling."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import librosa
import numpy as np
import soundfile as sf
from scipy.signal import get_window, resample_poly

from .config import AudioConfig
from .errors import ConfigError, ContractError, EmptyInputError

logger = logging.getLogger(__name__)

SPLITS = ("train", "eval")
AUDIO_EXTENSIONS = (".wav", ".flac", ".ogg")
STD_EPS = 1e-5


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    speaker_id: str = ""
    utterance_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.samples.size == 0:
            raise EmptyInputError(f"audio clip {self.utterance_id!r} has no samples")
        if not np.all(np.isfinite(self.samples)):
            raise ContractError(f"audio clip {self.utterance_id!r} contains non-finite samples")
        if self.sample_rate <= 0:
            raise ContractError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class MelSpectrogram:
    """Log-mel frames, shape [T, n_mels]."""

    frames: np.ndarray
    sample_rate: int
    hop_length: int
    speaker_id: str = ""
    utterance_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ContractError(f"mel frames must be a non-empty [T, M] array, got shape {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ContractError(f"mel {self.utterance_id!r} contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]

    def with_frames(self, frames: np.ndarray) -> "MelSpectrogram":
        return MelSpectrogram(frames, self.sample_rate, self.hop_length, self.speaker_id, self.utterance_id)


@dataclass(frozen=True)
class UtteranceRecord:
    audio_path: str
    speaker_id: str
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {self.split!r}")

    @property
    def utterance_id(self) -> str:
        return Path(self.audio_path).stem


@dataclass
class SpeakerManifest:
    records: list[UtteranceRecord]
    speakers: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.speakers:
            self.speakers = sorted({r.speaker_id for r in self.records})
        if len(set(self.speakers)) != len(self.speakers):
            raise ConfigError("speaker list contains duplicates")
        known = set(self.speakers)
        stray = sorted({r.speaker_id for r in self.records} - known)
        if stray:
            raise ConfigError(f"records reference unlisted speaker(s): {stray}")

    def records_for(self, speaker: str, split: str) -> list[UtteranceRecord]:
        return [r for r in self.records if r.speaker_id == speaker and r.split == split]

    def split_records(self, split: str) -> list[UtteranceRecord]:
        return [r for r in self.records if r.split == split]

    def train_speakers(self) -> list[str]:
        return [s for s in self.speakers if self.records_for(s, "train")]

    def speaker_index(self, speaker: str) -> int:
        return self.speakers.index(speaker)

    def require_pairable(self) -> None:
        if len(self.train_speakers()) < 2:
            raise ConfigError(
                "pair sampling needs at least 2 speakers with training utterances, "
                f"found {self.train_speakers()}"
            )

    def to_jsonl(self) -> str:
        lines = [
            json.dumps({"audio_path": r.audio_path, "speaker_id": r.speaker_id, "split": r.split})
            for r in self.records
        ]
        return "\n".join(lines) + "\n"

    def write(self, path: str | os.PathLike) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_jsonl(), encoding="utf-8")
        os.replace(tmp, path)

    @classmethod
    def read(cls, path: str | os.PathLike) -> "SpeakerManifest":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"manifest not found: {path}")
        records = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                records.append(UtteranceRecord(obj["audio_path"], obj["speaker_id"], obj["split"]))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ConfigError(f"{path}:{lineno}: malformed manifest line ({exc})") from exc
        speakers = []
        for r in records:
            if r.speaker_id not in speakers:
                speakers.append(r.speaker_id)
        return cls(records, speakers)


# --------------------------------------------------------------------------- audio


def load_audio(path: str | os.PathLike, target_rate: int, speaker_id: str = "",
               utterance_id: str | None = None) -> AudioClip:
    """Read a file, down-mix to mono, resample to ``target_rate``.

    Amplitudes are left as decoded unless the peak exceeds 1, in which case
    the clip is scaled so its peak is exactly 1.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"audio file not found: {path}")
    try:
        data, rate = sf.read(str(path), dtype="float64", always_2d=True)
    except Exception as exc:  # soundfile raises its own error hierarchy
        raise OSError(f"cannot decode audio file {path}: {exc}") from exc
    if data.shape[0] == 0:
        raise EmptyInputError(f"audio file {path} has zero length")
    samples = data.mean(axis=1)
    if rate != target_rate:
        g = math.gcd(int(rate), int(target_rate))
        samples = resample_poly(samples, target_rate // g, rate // g)
    peak = np.max(np.abs(samples))
    if peak > 1.0:
        samples = samples / peak
    return AudioClip(samples, target_rate, speaker_id, utterance_id if utterance_id is not None else path.stem)


def write_audio(path: str | os.PathLike, samples: np.ndarray, sample_rate: int, subtype: str = "FLOAT") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), np.asarray(samples, dtype=np.float32), sample_rate, subtype=subtype)


def expected_frame_count(n_samples: int, win_length: int, hop_length: int, center: bool = False) -> int:
    if center:
        n_samples += 2 * (win_length // 2)
    if n_samples < win_length:
        return 0
    return 1 + (n_samples - win_length) // hop_length


_MEL_BASIS: dict[tuple, np.ndarray] = {}


def mel_basis(cfg: AudioConfig) -> np.ndarray:
    key = (cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)
    if key not in _MEL_BASIS:
        _MEL_BASIS[key] = librosa.filters.mel(
            sr=cfg.sample_rate, n_fft=cfg.n_fft, n_mels=cfg.n_mels, fmin=cfg.fmin, fmax=cfg.fmax
        )
    return _MEL_BASIS[key]


def magnitude_frames(samples: np.ndarray, cfg: AudioConfig) -> np.ndarray:
    """Windowed |rfft| frames, shape [T, n_fft // 2 + 1]."""
    y = np.asarray(samples, dtype=np.float64)
    if y.size < cfg.win_length:
        raise EmptyInputError(f"clip of {y.size} samples is shorter than one window ({cfg.win_length})")
    if cfg.center:
        pad = cfg.win_length // 2
        y = np.pad(y, (pad, pad), mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(y, cfg.win_length)[:: cfg.hop_length]
    window = get_window("hann", cfg.win_length, fftbins=True)
    return np.abs(np.fft.rfft(frames * window, n=cfg.n_fft, axis=1))


def compute_mel(clip: AudioClip, cfg: AudioConfig) -> MelSpectrogram:
    if clip.sample_rate != cfg.sample_rate:
        raise ContractError(f"clip rate {clip.sample_rate} Hz does not match config rate {cfg.sample_rate} Hz")
    mag = magnitude_frames(clip.samples, cfg)
    mel = mag @ mel_basis(cfg).T
    logmel = np.log(np.maximum(mel, cfg.log_floor))
    return MelSpectrogram(logmel, cfg.sample_rate, cfg.hop_length, clip.speaker_id, clip.utterance_id)


# --------------------------------------------------------------------------- normalization


@dataclass
class MelStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ContractError("mean and std must be 1-D arrays of equal length")
        if np.any(self.std < STD_EPS):
            warnings.warn(f"mel std below {STD_EPS} in {int(np.sum(self.std < STD_EPS))} bin(s); clamping",
                          RuntimeWarning, stacklevel=2)
            self.std = np.maximum(self.std, STD_EPS)

    @classmethod
    def identity(cls, n_mels: int) -> "MelStats":
        return cls(np.zeros(n_mels), np.ones(n_mels))

    @classmethod
    def from_mels(cls, mels: Iterable[MelSpectrogram]) -> "MelStats":
        """Global per-bin z-score statistics. Pass training-split mels only."""
        stacked = np.concatenate([m.frames.astype(np.float64) for m in mels], axis=0)
        return cls(stacked.mean(axis=0), stacked.std(axis=0))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MelStats":
        return cls(np.array(d["mean"]), np.array(d["std"]))


def normalize_mel(mel: MelSpectrogram, stats: MelStats) -> MelSpectrogram:
    if mel.n_mels != stats.mean.size:
        raise ContractError(f"mel has {mel.n_mels} bins, stats have {stats.mean.size}")
    return mel.with_frames((mel.frames.astype(np.float64) - stats.mean) / stats.std)


def denormalize_mel(mel: MelSpectrogram, stats: MelStats) -> MelSpectrogram:
    if mel.n_mels != stats.mean.size:
        raise ContractError(f"mel has {mel.n_mels} bins, stats have {stats.mean.size}")
    return mel.with_frames(mel.frames.astype(np.float64) * stats.std + stats.mean)


# --------------------------------------------------------------------------- cropping


def crop_segment(mel: MelSpectrogram, length: int, rng: np.random.Generator,
                 policy: str = "reflect") -> MelSpectrogram:
    """Random fixed-length window; shorter inputs are padded per ``policy``.

    One integer is drawn from ``rng`` on every call so the random stream
    does not depend on utterance lengths.
    """
    if length < 1:
        raise ContractError("segment length must be >= 1")
    T = mel.n_frames
    n_starts = max(T - length, 0) + 1
    # rng.integers(0, 1) consumes nothing, so scale a float instead
    start = min(int(rng.random() * n_starts), n_starts - 1)
    if T >= length:
        return mel.with_frames(mel.frames[start:start + length])
    if policy == "reflect":
        frames = np.pad(mel.frames, ((0, length - T), (0, 0)), mode="symmetric")
    elif policy == "tile":
        reps = -(-length // T)
        frames = np.tile(mel.frames, (reps, 1))[:length]
    else:
        raise ConfigError(f"unknown short-utterance policy {policy!r}")
    return mel.with_frames(frames)


# --------------------------------------------------------------------------- manifests


def build_manifest(root: str | os.PathLike, eval_count: int,
                   extensions: Sequence[str] = AUDIO_EXTENSIONS) -> SpeakerManifest:
    """One subdirectory per speaker; the lexicographically last ``eval_count``
    files of each speaker form the eval split."""
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"data root is not a directory: {root}")
    if eval_count < 0:
        raise ConfigError("eval_count must be >= 0")
    speaker_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not speaker_dirs:
        raise ConfigError(f"no speaker subdirectories under {root}")
    records: list[UtteranceRecord] = []
    empty, short = [], []
    for spk_dir in speaker_dirs:
        files = sorted(
            (p for p in spk_dir.iterdir() if p.is_file() and p.suffix.lower() in extensions),
            key=lambda p: p.name,
        )
        if not files:
            empty.append(str(spk_dir))
            continue
        if len(files) < eval_count:
            short.append(f"{spk_dir.name} ({len(files)} files < eval_count {eval_count})")
            continue
        n_train = len(files) - eval_count
        for i, p in enumerate(files):
            records.append(UtteranceRecord(str(p.resolve()), spk_dir.name, "train" if i < n_train else "eval"))
    if empty:
        raise ConfigError(f"speaker directories without audio files: {', '.join(empty)}")
    if short:
        raise ConfigError(f"speakers with too few files: {', '.join(short)}")
    manifest = SpeakerManifest(records, [d.name for d in speaker_dirs])
    manifest.require_pairable()
    return manifest


# --------------------------------------------------------------------------- feature cache

FEATURE_MAGIC = b"DRVCMEL1"
_HEADER = struct.Struct("<IIII")  # T, M, sample_rate, hop_length


def write_feature(path: str | os.PathLike, mel: MelSpectrogram) -> None:
    """Binary layout: 8-byte magic, four little-endian uint32 (T, M,
    sample_rate, hop_length), then T*M little-endian float32, row-major."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _HEADER.pack(mel.n_frames, mel.n_mels, mel.sample_rate, mel.hop_length)
    body = np.ascontiguousarray(mel.frames, dtype="<f4").tobytes()
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(FEATURE_MAGIC + header + body)
    os.replace(tmp, path)


def read_feature(path: str | os.PathLike, speaker_id: str = "") -> MelSpectrogram:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != FEATURE_MAGIC:
        raise ContractError(f"{path} is not a feature-cache file")
    T, M, rate, hop = _HEADER.unpack_from(raw, 8)
    body = np.frombuffer(raw, dtype="<f4", offset=8 + _HEADER.size)
    if body.size != T * M:
        raise ContractError(f"{path}: header says {T}x{M} values, file holds {body.size}")
    return MelSpectrogram(body.reshape(T, M).copy(), rate, hop, speaker_id, path.name.split(".")[0])


def feature_path(cache_dir: str | os.PathLike, record: UtteranceRecord) -> Path:
    return Path(cache_dir) / record.speaker_id / f"{record.utterance_id}.mel"


def extract_features(manifest: SpeakerManifest, cfg: AudioConfig,
                     cache_dir: str | os.PathLike | None = None) -> dict[str, MelSpectrogram]:
    """Raw (unnormalized) log-mels for every record, keyed by audio_path.

    With ``cache_dir`` each mel is also written to / read back from the
    feature cache.
    """
    features = {}
    for rec in manifest.records:
        cached = feature_path(cache_dir, rec) if cache_dir is not None else None
        if cached is not None and cached.is_file():
            mel = read_feature(cached, rec.speaker_id)
            if mel.n_mels == cfg.n_mels and mel.sample_rate == cfg.sample_rate and mel.hop_length == cfg.hop_length:
                features[rec.audio_path] = mel
                continue
        clip = load_audio(rec.audio_path, cfg.sample_rate, rec.speaker_id, rec.utterance_id)
        mel = compute_mel(clip, cfg)
        if cached is not None:
            write_feature(cached, mel)
        features[rec.audio_path] = mel
    return features


# --------------------------------------------------------------------------- pair sampling


def sample_pair(manifest: SpeakerManifest, rng: np.random.Generator,
                features: Mapping[str, MelSpectrogram], segment_frames: int,
                policy: str = "reflect") -> tuple[MelSpectrogram, MelSpectrogram]:
    """Two training segments from two distinct speakers.

    The speaker pair is drawn uniformly without replacement; ``a`` is the
    first speaker drawn.
    """
    speakers = manifest.train_speakers()
    if len(speakers) < 2:
        raise ConfigError(f"pair sampling needs >= 2 training speakers, found {speakers}")
    i, j = rng.choice(len(speakers), size=2, replace=False)
    out = []
    for idx in (i, j):
        recs = manifest.records_for(speakers[idx], "train")
        rec = recs[int(rng.integers(len(recs)))]
        out.append(crop_segment(features[rec.audio_path], segment_frames, rng, policy))
    return out[0], out[1]


class PairSampler:
    """Owns its RNG; yields stacked batches of (a, b, label_a, label_b)."""

    def __init__(self, manifest: SpeakerManifest, features: Mapping[str, MelSpectrogram],
                 segment_frames: int, seed: int, policy: str = "reflect"):
        manifest.require_pairable()
        self.manifest = manifest
        self.features = features
        self.segment_frames = segment_frames
        self.policy = policy
        self.rng = np.random.default_rng(seed)

    def sample_pair(self) -> tuple[MelSpectrogram, MelSpectrogram]:
        return sample_pair(self.manifest, self.rng, self.features, self.segment_frames, self.policy)

    def sample_batch(self, batch_size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        a_frames, b_frames, a_lab, b_lab = [], [], [], []
        for _ in range(batch_size):
            a, b = self.sample_pair()
            a_frames.append(a.frames)
            b_frames.append(b.frames)
            a_lab.append(self.manifest.speaker_index(a.speaker_id))
            b_lab.append(self.manifest.speaker_index(b.speaker_id))
        return (np.stack(a_frames), np.stack(b_frames),
                np.array(a_lab, dtype=np.int64), np.array(b_lab, dtype=np.int64))

    def get_state(self) -> dict:
        return self.rng.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state
