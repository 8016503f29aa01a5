"""Mel-cepstral distortion between converted and reference utterances.

Cepstra follow the minimum-phase convention, log|H(w)| = c0 + sum_m c_m cos(m w),
which is the one the usual MCD constant (10 / ln 10) * sqrt(2 * sum dc^2)
is defined for.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .audio import AudioClip, MelSpectrogram, magnitude_frames
from .config import AudioConfig
from .errors import ContractError

MCD_CONST = 10.0 / math.log(10.0) * math.sqrt(2.0)


@dataclass
class CepstralSequence:
    coeffs: np.ndarray  # [T, D + 1], column 0 is c0
    includes_c0: bool = True

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.ndim != 2 or self.coeffs.shape[0] < 1 or self.coeffs.shape[1] < 1:
            raise ContractError(f"cepstra must be a non-empty [T, D] array, got {self.coeffs.shape}")
        if not np.all(np.isfinite(self.coeffs)):
            raise ContractError("cepstra contain non-finite values")

    @property
    def order(self) -> int:
        return self.coeffs.shape[1] - 1 if self.includes_c0 else self.coeffs.shape[1]

    def distance_features(self, include_c0: bool = False) -> np.ndarray:
        if self.includes_c0 and not include_c0:
            return self.coeffs[:, 1:]
        return self.coeffs


def freqt(c: np.ndarray, order: int, alpha: float) -> np.ndarray:
    """All-pass frequency warping of minimum-phase cepstra (rows are frames).

    Same recursion as SPTK's ``freqt``: the input is consumed from its
    highest coefficient down to c0.
    """
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    beta = 1.0 - alpha * alpha
    g = np.zeros((c.shape[0], order + 1))
    for i in range(c.shape[1] - 1, -1, -1):
        d = np.empty_like(g)
        d[:, 0] = c[:, i] + alpha * g[:, 0]
        if order >= 1:
            d[:, 1] = beta * g[:, 0] + alpha * g[:, 1]
        for j in range(2, order + 1):
            d[:, j] = g[:, j - 1] + alpha * (g[:, j] - d[:, j - 1])
        g = d
    return g


def extract_cepstra(clip: AudioClip, order: int = 34, alpha: float = 0.455,
                    cfg: AudioConfig | None = None) -> CepstralSequence:
    """Mel-cepstra of ``order`` (plus c0) per analysis frame.

    Frames match the mel features (same window, hop and FFT size). The
    log-amplitude spectrum is turned into a minimum-phase real cepstrum and
    warped onto the mel scale with an all-pass of coefficient ``alpha``.
    """
    cfg = cfg or AudioConfig(sample_rate=clip.sample_rate)
    if clip.sample_rate != cfg.sample_rate:
        raise ContractError(f"clip rate {clip.sample_rate} Hz does not match config rate {cfg.sample_rate} Hz")
    mag = magnitude_frames(clip.samples, cfg)
    log_amp = np.log(np.maximum(mag, cfg.log_floor))
    real_cep = np.fft.irfft(log_amp, n=cfg.n_fft, axis=1)[:, : cfg.n_fft // 2 + 1]
    real_cep[:, 1:] *= 2.0
    return CepstralSequence(freqt(real_cep, order, alpha), includes_c0=True)


def cepstra_from_mel(mel: MelSpectrogram, order: int = 34) -> CepstralSequence:
    """Cepstra of a natural-log mel spectrogram via a cosine transform over the
    (already mel-warped) frequency axis."""
    M = mel.n_mels
    if order >= M:
        raise ContractError(f"order {order} needs more than {M} mel bins")
    k = np.arange(M) + 0.5
    m = np.arange(order + 1)
    basis = np.cos(np.pi * np.outer(m, k) / M) * (2.0 / M)
    basis[0] /= 2.0
    return CepstralSequence(mel.frames.astype(np.float64) @ basis.T, includes_c0=True)


# --------------------------------------------------------------------------- DTW


def dtw(x: CepstralSequence, y: CepstralSequence, include_c0: bool = False) -> tuple[list[tuple[int, int]], float]:
    """Minimum summed-Euclidean warping path with steps (1,0), (0,1), (1,1).

    Returns ``(path, cost)``. Ties prefer the diagonal step.
    """
    fx, fy = x.distance_features(include_c0), y.distance_features(include_c0)
    if fx.shape[1] != fy.shape[1]:
        raise ContractError(f"cepstral orders differ: {fx.shape[1]} vs {fy.shape[1]}")
    dist = cdist(fx, fy)
    tx, ty = dist.shape
    acc = np.full((tx, ty), np.inf)
    acc[0, 0] = dist[0, 0]
    for i in range(tx):
        row, prev = acc[i], acc[i - 1] if i else None
        d = dist[i]
        for j in range(ty):
            if i == 0 and j == 0:
                continue
            best = np.inf
            if i and j:
                best = prev[j - 1]
            if i and prev[j] < best:
                best = prev[j]
            if j and row[j - 1] < best:
                best = row[j - 1]
            row[j] = best + d[j]
    i, j = tx - 1, ty - 1
    path = [(i, j)]
    while (i, j) != (0, 0):
        candidates = []
        if i and j:
            candidates.append((acc[i - 1, j - 1], i - 1, j - 1))
        if i:
            candidates.append((acc[i - 1, j], i - 1, j))
        if j:
            candidates.append((acc[i, j - 1], i, j - 1))
        _, i, j = min(candidates, key=lambda c: c[0])  # min() keeps the first (diagonal) on ties
        path.append((i, j))
    path.reverse()
    return path, float(acc[-1, -1])


def dtw_align(x: CepstralSequence, y: CepstralSequence, include_c0: bool = False) -> list[tuple[int, int]]:
    return dtw(x, y, include_c0)[0]


def mcd(x: CepstralSequence, y: CepstralSequence, include_c0: bool = False,
        path: Sequence[tuple[int, int]] | None = None) -> float:
    """Path-mean MCD in dB over the DTW alignment (or a given ``path``)."""
    if x.order != y.order or x.includes_c0 != y.includes_c0:
        raise ContractError(f"cepstral orders differ: {x.order} vs {y.order}")
    if path is None:
        path = dtw_align(x, y, include_c0)
    idx = np.asarray(path)
    diff = x.distance_features(include_c0)[idx[:, 0]] - y.distance_features(include_c0)[idx[:, 1]]
    return float(np.mean(MCD_CONST * np.sqrt(np.sum(diff * diff, axis=1))))


# --------------------------------------------------------------------------- pair evaluation


@dataclass
class PairScore:
    source_id: str
    target_id: str
    mcd: float
    aligned_length: int


@dataclass
class MCDResult:
    mean_mcd: float
    std: float
    per_pair: list[PairScore] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"mean_mcd": self.mean_mcd, "std": self.std, "pairs": [asdict(p) for p in self.per_pair]}


def evaluate_pairs(converted: Sequence[CepstralSequence], references: Sequence[CepstralSequence],
                   ids: Sequence[tuple[str, str]] | None = None, include_c0: bool = False,
                   distance_dump: str | os.PathLike | None = None) -> MCDResult:
    """MCD of each (converted, reference) pair plus mean and population std.

    ``distance_dump`` writes the per-pair frame distance matrices and paths
    to an ``.npz`` file for plotting.
    """
    if not converted:
        raise ContractError("no pairs to evaluate")
    if len(converted) != len(references):
        raise ContractError(f"{len(converted)} converted vs {len(references)} references")
    if ids is None:
        ids = [(f"conv_{i}", f"ref_{i}") for i in range(len(converted))]
    scores, dumps = [], {}
    for n, (x, y, (sid, tid)) in enumerate(zip(converted, references, ids)):
        path, _ = dtw(x, y, include_c0)
        scores.append(PairScore(sid, tid, mcd(x, y, include_c0, path), len(path)))
        if distance_dump is not None:
            dumps[f"dist_{n}"] = cdist(x.distance_features(include_c0), y.distance_features(include_c0))
            dumps[f"path_{n}"] = np.asarray(path)
    if distance_dump is not None:
        np.savez_compressed(distance_dump, **dumps)
    values = np.array([s.mcd for s in scores])
    return MCDResult(float(values.mean()), float(values.std()), scores)


def write_report(result: MCDResult | dict, path: str | os.PathLike, csv_path: str | os.PathLike | None = None) -> None:
    payload = result.to_dict() if isinstance(result, MCDResult) else result
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=["source_id", "target_id", "mcd", "aligned_length"])
            writer.writeheader()
            writer.writerows(payload["pairs"])
