"""Glue between the library modules and the command line: preparing a
corpus, training, converting files and evaluating a checkpoint."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import soundfile as sf
import torch

from .audio import (
    MelSpectrogram,
    SpeakerManifest,
    build_manifest,
    compute_mel,
    extract_features,
    load_audio,
    normalize_mel,
    write_audio,
    write_feature,
)
from .config import AppConfig
from .engine import convert, load_checkpoint, model_from_checkpoint, run_training
from .errors import ConfigError, ContractError
from .evaluation import MCDResult, cepstra_from_mel, evaluate_pairs, write_report

logger = logging.getLogger(__name__)


def within(work_dir: Path, path: str | os.PathLike) -> Path:
    """Resolve ``path`` under ``work_dir``; absolute paths must already lie inside it."""
    work_dir = work_dir.resolve()
    p = Path(path)
    p = p if p.is_absolute() else work_dir / p
    p = p.resolve()
    if p != work_dir and work_dir not in p.parents:
        raise ConfigError(f"output path {p} lies outside work_dir {work_dir}")
    return p


def prepare(cfg: AppConfig, data_root: str | os.PathLike, manifest_out: str | os.PathLike | None = None) -> tuple[Path, SpeakerManifest]:
    work_dir = cfg.resolved_work_dir()
    manifest = build_manifest(data_root, cfg.audio.eval_count_per_speaker)
    out = within(work_dir, manifest_out or cfg.manifest_path)
    extract_features(manifest, cfg.audio, cache_dir=work_dir / "features")
    manifest.write(out)
    return out, manifest


def load_manifest_and_features(cfg: AppConfig, manifest_path: str | os.PathLike | None = None):
    work_dir = cfg.resolved_work_dir()
    path = Path(manifest_path or cfg.manifest_path)
    if not path.is_absolute():
        path = work_dir / path
    manifest = SpeakerManifest.read(path)
    features = extract_features(manifest, cfg.audio, cache_dir=work_dir / "features")
    return manifest, features


def train(cfg: AppConfig, resume: bool = False) -> Path:
    work_dir = cfg.resolved_work_dir()
    manifest, features = load_manifest_and_features(cfg)
    run_training(manifest, cfg, features, work_dir, resume=resume)
    return work_dir / "checkpoints" / "latest.pt"


def default_checkpoint(cfg: AppConfig) -> Path:
    return within(cfg.resolved_work_dir(), cfg.checkpoint_path or "checkpoints/latest.pt")


def convert_files(checkpoint: str | os.PathLike, source_wav: str | os.PathLike, target_wav: str | os.PathLike,
                  out_path: Path, audio: bool = False) -> MelSpectrogram:
    state = load_checkpoint(checkpoint)
    model, stats, ckpt_cfg = model_from_checkpoint(state)
    rate = ckpt_cfg.audio.sample_rate
    mels = []
    for path in (source_wav, target_wav):
        native = sf.info(str(path)).samplerate
        if native != rate:
            raise ContractError(f"{path} is {native} Hz but the checkpoint was trained at {rate} Hz")
        mels.append(compute_mel(load_audio(path, rate, utterance_id=Path(path).stem), ckpt_cfg.audio))
    out = convert(mels[0], mels[1], model, stats)
    write_feature(out_path, out)
    if audio:
        from .vocoder import griffin_lim

        write_audio(out_path.with_suffix(".wav"), griffin_lim(out, ckpt_cfg.audio), rate)
    return out


# --------------------------------------------------------------------------- evaluation protocol


@dataclass
class ConversionPlan:
    source: str  # audio_path of the content utterance
    style: str  # audio_path of the style utterance
    reference: str  # audio_path of the ground-truth rendition
    source_id: str
    target_id: str


def plan_conversions(manifest: SpeakerManifest, split: str = "eval") -> tuple[list[ConversionPlan], list[ConversionPlan]]:
    """Cross-speaker and identity conversion plans over one split.

    For every ordered speaker pair (src, tgt) and every utterance of src
    whose file stem also exists for tgt (a parallel sentence), the style
    comes from a *different* utterance of tgt and the reference is tgt's
    rendition of the same sentence. src == tgt gives the identity plans.
    """
    by_speaker = {s: manifest.records_for(s, split) for s in manifest.speakers}
    by_speaker = {s: recs for s, recs in by_speaker.items() if recs}
    cross, identity = [], []
    for src, src_recs in by_speaker.items():
        for tgt, tgt_recs in by_speaker.items():
            stems = {r.utterance_id: r for r in tgt_recs}
            for rec in src_recs:
                ref = stems.get(rec.utterance_id)
                if ref is None:
                    continue
                others = [r for r in tgt_recs if r.utterance_id != rec.utterance_id]
                if not others:
                    continue
                style = others[tgt_recs.index(ref) % len(others)]
                plan = ConversionPlan(rec.audio_path, style.audio_path, ref.audio_path,
                                      f"{src}/{rec.utterance_id}", f"{tgt}/{ref.utterance_id}")
                (identity if src == tgt else cross).append(plan)
    return cross, identity


def evaluate_model(model, stats, manifest: SpeakerManifest, features: Mapping[str, MelSpectrogram],
                   cfg: AppConfig, split: str = "eval",
                   distance_dump: str | os.PathLike | None = None) -> dict:
    """Convert every planned eval pair and score it with mel-domain MCD."""
    cross, identity = plan_conversions(manifest, split)
    if not cross and not identity:
        raise ContractError(f"no parallel {split} utterances to evaluate")
    order = cfg.evaluation.mcep_order
    results: dict[str, MCDResult] = {}
    for name, plans in (("cross", cross), ("identity", identity)):
        if not plans:
            continue
        converted = [cepstra_from_mel(convert(features[p.source], features[p.style], model, stats), order)
                     for p in plans]
        references = [cepstra_from_mel(features[p.reference], order) for p in plans]
        dump = None
        if distance_dump is not None and name == "cross":
            dump = distance_dump
        results[name] = evaluate_pairs(converted, references, [(p.source_id, p.target_id) for p in plans],
                                       include_c0=cfg.evaluation.include_c0, distance_dump=dump)
    headline = results.get("cross") or results["identity"]
    report = headline.to_dict()
    report["identity"] = results["identity"].to_dict() if "identity" in results else None
    report["protocol"] = {
        "split": split,
        "features": "mel-domain cepstra",
        "order": order,
        "include_c0": cfg.evaluation.include_c0,
        "n_cross": len(cross),
        "n_identity": len(identity),
    }
    return report


@torch.no_grad()
def embedding_probes(model, stats, manifest: SpeakerManifest, features: Mapping[str, MelSpectrogram],
                     split: str = "train") -> dict:
    """Disentanglement checks on whole utterances of one split.

    style_cosine: mean cosine similarity of style codes for pairs of
    utterances by the same speaker vs by different speakers.
    domain_accuracy: how often the domain classifier names the right speaker.
    content_l1: mean L1 distance between content codes of two speakers'
    renditions of the same sentence vs of different sentences.
    """
    model.eval()
    records = manifest.split_records(split)
    if not records:
        raise ContractError(f"empty {split} split")
    dtype = next(model.parameters()).dtype

    def tensor(rec):
        return torch.as_tensor(normalize_mel(features[rec.audio_path], stats).frames, dtype=dtype).unsqueeze(0)

    styles = torch.cat([model.encode_style(tensor(r)) for r in records])
    labels = np.array([manifest.speaker_index(r.speaker_id) for r in records])
    unit = torch.nn.functional.normalize(styles, dim=-1)
    cos = (unit @ unit.T).numpy()
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(len(records), dtype=bool)
    predicted = model.classify_domain(styles).argmax(dim=-1).numpy()

    contents = {(r.speaker_id, r.utterance_id): model.encode_content(tensor(r))[0] for r in records}
    same_l1, diff_l1 = [], []
    keys = sorted(contents)
    for i, (spk_x, utt_x) in enumerate(keys):
        for spk_y, utt_y in keys[i + 1:]:
            if spk_x == spk_y:
                continue
            cx, cy = contents[(spk_x, utt_x)], contents[(spk_y, utt_y)]
            n = min(cx.shape[0], cy.shape[0])
            (same_l1 if utt_x == utt_y else diff_l1).append(float((cx[:n] - cy[:n]).abs().mean()))

    def mean(values):
        return float(np.mean(values)) if len(values) else None

    return {
        "split": split,
        "style_cosine": {"within": mean(cos[same & off_diag]), "between": mean(cos[~same])},
        "domain_accuracy": float(np.mean(predicted == labels)),
        "content_l1": {"same_sentence": mean(same_l1), "different_sentence": mean(diff_l1)},
    }


def evaluate(cfg: AppConfig, checkpoint: str | os.PathLike, out_report: Path,
             manifest_path: str | os.PathLike | None = None) -> dict:
    work_dir = cfg.resolved_work_dir()
    model, stats, ckpt_cfg = model_from_checkpoint(load_checkpoint(checkpoint))
    ckpt_cfg.evaluation = cfg.evaluation
    manifest, features = load_manifest_and_features(ckpt_cfg if manifest_path else cfg, manifest_path)
    if not manifest.split_records("eval"):
        raise ContractError("the manifest has an empty eval split")
    report = evaluate_model(model, stats, manifest, features, ckpt_cfg,
                            distance_dump=out_report.with_suffix(".distances.npz"))
    if manifest.split_records("train"):
        report["probes"] = embedding_probes(model, stats, manifest, features, "train")
    write_report(report, out_report, csv_path=out_report.with_suffix(".csv"))
    plot_summary(work_dir / "train_log.jsonl", report, out_report.with_suffix(".png"))
    return report


def read_log(path: str | os.PathLike) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        return []
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def plot_summary(log_path: str | os.PathLike, report: Mapping | None, out_png: Path) -> Path:
    """Loss curves from the step log next to an MCD bar chart."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = read_log(log_path)
    fig, (ax_loss, ax_mcd) = plt.subplots(1, 2, figsize=(11, 4))
    if records:
        steps = np.array([r["step"] for r in records])
        for key in ("total", "cycle", "identity", "same_content", "same_style", "domain", "adversarial"):
            vals = [r.get(key) for r in records]
            if all(v is None for v in vals):
                continue
            ax_loss.plot(steps, [np.nan if v is None else v for v in vals], label=key, lw=1)
        ax_loss.set_yscale("log")
        ax_loss.legend(fontsize=7)
    ax_loss.set_xlabel("step")
    ax_loss.set_title("training losses")
    if report:
        bars = {"cross-speaker": report["mean_mcd"]}
        errs = [report["std"]]
        if report.get("identity"):
            bars["identity"] = report["identity"]["mean_mcd"]
            errs.append(report["identity"]["std"])
        ax_mcd.bar(list(bars), list(bars.values()), yerr=errs, capsize=4, color=["tab:blue", "tab:gray"][: len(bars)])
        ax_mcd.set_ylabel("MCD (dB)")
    ax_mcd.set_title("mel-cepstral distortion")
    fig.tight_layout()
    out_png.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_png, dpi=100)
    plt.close(fig)
    return out_png
