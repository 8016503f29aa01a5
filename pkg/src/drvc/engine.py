"""Double style-exchange training: conversions, the loss assembly, one Adam
step over every component, schedules, checkpoints and the training loop."""

from __future__ import annotations

import json
import logging
import math
import os
import signal
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import torch

from .audio import MelSpectrogram, MelStats, PairSampler, SpeakerManifest, denormalize_mel, normalize_mel
from .config import AppConfig, TrainingConfig
from .errors import ContractError, TrainingDivergenceError
from .losses import (
    LossReport,
    adversarial_loss,
    cycle_loss,
    domain_loss_from_logits,
    identity_loss,
    same_loss_content,
    same_loss_style,
    total_loss,
)
from .model import DRVCModel, grl_lambda_schedule

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class CycleBatch:
    a: torch.Tensor
    b: torch.Tensor
    a_C: torch.Tensor
    b_C: torch.Tensor
    a_S: torch.Tensor
    b_S: torch.Tensor
    a_tilde: torch.Tensor
    b_tilde: torch.Tensor
    a_tilde_C: torch.Tensor | None = None
    b_tilde_C: torch.Tensor | None = None
    a_tilde_S: torch.Tensor | None = None
    b_tilde_S: torch.Tensor | None = None
    a_hat: torch.Tensor | None = None
    b_hat: torch.Tensor | None = None


def _require_finite(name: str, t: torch.Tensor) -> None:
    if not torch.isfinite(t).all():
        raise TrainingDivergenceError(f"{name} contains NaN/Inf", term=name)


def _encode(model, x: torch.Tensor, y: torch.Tensor):
    """Content and style codes of two equally shaped batches in one pass."""
    n = x.shape[0]
    both = torch.cat([x, y], dim=0)
    c, s = model.encode_content(both), model.encode_style(both)
    return c[:n], c[n:], s[:n], s[n:]


def _encode_frozen(model, x: torch.Tensor, y: torch.Tensor):
    """As :func:`_encode` but with the encoder weights treated as constants:
    gradients reach the inputs only."""
    n = x.shape[0]
    both = torch.cat([x, y], dim=0)
    model._check_mel(both)
    codes = []
    for enc in (model.content_encoder, model.style_encoder):
        params = {k: v.detach() for k, v in enc.named_parameters()}
        codes.append(torch.func.functional_call(enc, params, (both,)))
    c, s = codes
    return c[:n], c[n:], s[:n], s[n:]


def _generate_pair(model, content_x, style_x, content_y, style_y):
    """(G(content_x, style_x), G(content_y, style_y)) in one generator pass."""
    n = content_x.shape[0]
    out = model.generate(torch.cat([content_x, content_y], dim=0), torch.cat([style_x, style_y], dim=0))
    return out[:n], out[n:]


def _exchange(model, content_x, style_x, content_y, style_y):
    """Swap styles: returns (G(content_x, style_y), G(content_y, style_x))."""
    return _generate_pair(model, content_x, style_y, content_y, style_x)


def first_conversion(a: torch.Tensor, b: torch.Tensor, model) -> CycleBatch:
    """Encode both inputs and exchange styles once: a~ = G(a_C, b_S), b~ = G(b_C, a_S)."""
    if a.shape != b.shape:
        raise ContractError(f"a and b must share a segment shape, got {tuple(a.shape)} vs {tuple(b.shape)}")
    a_C, b_C, a_S, b_S = _encode(model, a, b)
    a_tilde, b_tilde = _exchange(model, a_C, a_S, b_C, b_S)
    _require_finite("a_tilde", a_tilde)
    _require_finite("b_tilde", b_tilde)
    return CycleBatch(a, b, a_C, b_C, a_S, b_S, a_tilde, b_tilde)


def second_conversion(batch: CycleBatch, model) -> CycleBatch:
    """Re-encode the converted pair and swap styles back:
    a^ = G(a~_C, b~_S), b^ = G(b~_C, a~_S)."""
    batch.a_tilde_C, batch.b_tilde_C, batch.a_tilde_S, batch.b_tilde_S = _encode(
        model, batch.a_tilde, batch.b_tilde
    )
    batch.a_hat, batch.b_hat = _exchange(
        model, batch.a_tilde_C, batch.a_tilde_S, batch.b_tilde_C, batch.b_tilde_S
    )
    _require_finite("a_hat", batch.a_hat)
    _require_finite("b_hat", batch.b_hat)
    return batch


def lr_schedule(epoch: int, config: TrainingConfig) -> float:
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    if config.lr_decay_mode == "subtractive":
        lr = config.lr_initial - epoch * config.lr_decay_per_epoch
    else:
        lr = config.lr_initial * (1.0 - config.lr_decay_per_epoch) ** epoch
    return max(lr, config.lr_floor)


def compute_terms(batch: CycleBatch, labels_a: torch.Tensor, labels_b: torch.Tensor, model: DRVCModel,
                  config: TrainingConfig, grl_lambda: float) -> dict[str, torch.Tensor | None]:
    """Every enabled loss term for a completed cycle batch."""
    enabled = config.enabled_terms()
    terms: dict[str, torch.Tensor | None] = dict.fromkeys(enabled)
    a, b = batch.a, batch.b

    if enabled["cycle"]:
        terms["cycle"] = cycle_loss(a, batch.a_hat, b, batch.b_hat)

    if enabled["identity"]:
        a_rec, b_rec = _generate_pair(model, batch.a_C, batch.a_S, batch.b_C, batch.b_S)
        terms["identity"] = identity_loss(a, a_rec, b, b_rec)

    if enabled["same_content"] or enabled["same_style"]:
        # "full" lets the encoders satisfy the same losses by ignoring their
        # input; the other modes keep the original codes as fixed targets
        # and ("generator") stop the re-encoding from training the encoders.
        mode = config.same_loss_gradient
        a_C, b_C, a_S, b_S = batch.a_C, batch.b_C, batch.a_S, batch.b_S
        if mode != "full":
            a_C, b_C, a_S, b_S = a_C.detach(), b_C.detach(), a_S.detach(), b_S.detach()
        reencode = _encode_frozen if mode == "generator" else _encode
        if config.same_loss_stage == "second":
            ahC, bhC, ahS, bhS = reencode(model, batch.a_hat, batch.b_hat)
            content_pairs = ((a_C, ahC), (b_C, bhC))
            style_pairs = ((a_S, ahS), (b_S, bhS))
        else:
            atC, btC, atS, btS = (batch.a_tilde_C, batch.b_tilde_C, batch.a_tilde_S, batch.b_tilde_S)
            if mode == "generator":
                atC, btC, atS, btS = reencode(model, batch.a_tilde, batch.b_tilde)
            content_pairs = ((a_C, atC), (b_C, btC))
            style_pairs = ((a_S, btS), (b_S, atS))
        if enabled["same_content"]:
            terms["same_content"] = sum(same_loss_content(o, r) for o, r in content_pairs)
        if enabled["same_style"]:
            terms["same_style"] = sum(same_loss_style(o, r) for o, r in style_pairs)

    if enabled["domain"]:
        logits = model.classify_domain(torch.cat([batch.a_S, batch.b_S], dim=0))
        n = a.shape[0]
        domain = domain_loss_from_logits(logits[:n], labels_a, logits[n:], labels_b)
        if model.content_classifier is not None:
            c_logits = model.classify_content(torch.cat([batch.a_C, batch.b_C], dim=0), grl_lambda)
            domain = domain + domain_loss_from_logits(c_logits[:n], labels_a, c_logits[n:], labels_b)
        terms["domain"] = domain

    if enabled["adversarial"]:
        n = a.shape[0]
        real = model.discriminate_voice(torch.cat([a, b], dim=0))
        fakes = torch.cat([batch.a_tilde, batch.b_tilde], dim=0)
        if model.grl_on_discriminator:
            fake = model.discriminate_voice(fakes, grl_lambda=grl_lambda)
        else:
            # without reversal the generator would cooperate with D_v; train D_v only
            fake = model.discriminate_voice(fakes.detach())
        disc, _ = adversarial_loss(real[:n], fake[:n], real[n:], fake[n:])
        terms["adversarial"] = disc
    return terms


def training_step(a: torch.Tensor, b: torch.Tensor, labels_a: torch.Tensor, labels_b: torch.Tensor,
                  model: DRVCModel, optimizer: torch.optim.Optimizer, config: TrainingConfig,
                  k: float) -> LossReport:
    """Both conversions, all enabled losses, one optimizer step over all components."""
    model.train()
    grl_lambda = grl_lambda_schedule(k)
    batch = second_conversion(first_conversion(a, b, model), model)
    terms = compute_terms(batch, labels_a, labels_b, model, config, grl_lambda)
    enabled = config.enabled_terms()
    total = total_loss(terms, config.weights, enabled)

    optimizer.zero_grad(set_to_none=True)
    if total.requires_grad:
        total.backward()
        for group, module in model.components().items():
            for p in module.parameters():
                if p.grad is not None and not torch.isfinite(p.grad).all():
                    raise TrainingDivergenceError(f"non-finite gradient in {group}", term=group)
        optimizer.step()
    return LossReport.from_terms(terms, total.detach(), enabled)


def make_optimizer(model: DRVCModel, config: TrainingConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=config.lr_initial,
                            betas=(config.adam_beta1, config.adam_beta2), eps=config.adam_eps)


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | os.PathLike, state: dict) -> Path:
    """Atomic write: temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(state, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    state = torch.load(path, map_location="cpu", weights_only=False)
    version = state.get("version")
    if version is None or version > CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version!r} in {path}")
    return state


def model_from_checkpoint(state: Mapping) -> tuple[DRVCModel, MelStats, AppConfig]:
    cfg = AppConfig.from_flat(state["config"])
    model = DRVCModel(state["n_mels"], len(state["speakers"]), cfg.model)
    for name, module in model.components().items():
        module.load_state_dict(state["params"][name])
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise ContractError(f"checkpoint parameter {name} is not finite")
    model.eval()
    return model, MelStats.from_dict(state["stats"]), cfg


# --------------------------------------------------------------------------- training loop


class Trainer:
    """Owns the model, optimizer, pair sampler and step counters."""

    def __init__(self, cfg: AppConfig, manifest: SpeakerManifest, features: Mapping[str, MelSpectrogram],
                 stats: MelStats | None = None):
        cfg.validate()
        manifest.require_pairable()
        self.cfg = cfg
        self.manifest = manifest
        train = manifest.split_records("train")
        if stats is None:
            stats = MelStats.from_mels(features[r.audio_path] for r in train)
        self.stats = stats
        self.features = {path: normalize_mel(mel, stats) for path, mel in features.items()}
        n_mels = next(iter(self.features.values())).n_mels
        if n_mels != cfg.audio.n_mels:
            raise ContractError(f"features have {n_mels} mel bins, config says {cfg.audio.n_mels}")

        tc = cfg.training
        torch.manual_seed(tc.seed)
        self.model = DRVCModel(n_mels, len(manifest.speakers), cfg.model)
        self.optimizer = make_optimizer(self.model, tc)
        self.sampler = PairSampler(manifest, self.features, cfg.audio.segment_frames, tc.seed,
                                   cfg.audio.short_policy)
        self.steps_per_epoch = tc.steps_per_epoch or math.ceil(len(train) / tc.batch_size)
        self.total_steps = tc.epochs * self.steps_per_epoch
        self.global_step = 0
        self._stop_requested = False

    @property
    def epoch(self) -> int:
        return self.global_step // self.steps_per_epoch

    def progress(self) -> float:
        return self.global_step / self.total_steps if self.total_steps else 0.0

    def step(self) -> tuple[LossReport, dict]:
        epoch = self.epoch
        lr = lr_schedule(epoch, self.cfg.training)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        lam = grl_lambda_schedule(min(self.progress(), 1.0))
        a, b, la, lb = self.sampler.sample_batch(self.cfg.training.batch_size)
        report = training_step(torch.from_numpy(a), torch.from_numpy(b), torch.from_numpy(la),
                               torch.from_numpy(lb), self.model, self.optimizer, self.cfg.training,
                               min(self.progress(), 1.0))
        self.global_step += 1
        return report, report.to_log_record(self.global_step, epoch, lam, lr)

    # ---- checkpoint state

    def state_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "params": {name: m.state_dict() for name, m in self.model.components().items()},
            "optimizer": self.optimizer.state_dict(),
            "epoch": self.epoch,
            "global_step": self.global_step,
            "rng": {"torch": torch.get_rng_state(), "sampler": self.sampler.get_state()},
            "config": self.cfg.to_flat(),
            "stats": self.stats.to_dict(),
            "speakers": list(self.manifest.speakers),
            "n_mels": self.model.n_mels,
        }

    def load_state_dict(self, state: Mapping) -> None:
        if list(state["speakers"]) != list(self.manifest.speakers):
            raise ContractError("checkpoint speakers do not match the manifest")
        for name, module in self.model.components().items():
            module.load_state_dict(state["params"][name])
        self.optimizer.load_state_dict(state["optimizer"])
        self.global_step = int(state["global_step"])
        torch.set_rng_state(state["rng"]["torch"])
        self.sampler.set_state(state["rng"]["sampler"])

    @classmethod
    def from_checkpoint(cls, path: str | os.PathLike, manifest: SpeakerManifest,
                        features: Mapping[str, MelSpectrogram], cfg: AppConfig | None = None) -> "Trainer":
        state = load_checkpoint(path)
        cfg = cfg or AppConfig.from_flat(state["config"])
        trainer = cls(cfg, manifest, features, MelStats.from_dict(state["stats"]))
        trainer.load_state_dict(state)
        return trainer

    def save(self, path: str | os.PathLike) -> Path:
        return save_checkpoint(path, self.state_dict())

    # ---- loop

    def request_stop(self) -> None:
        """Finish the current step, checkpoint, and return from :meth:`run`."""
        self._stop_requested = True

    def run(self, checkpoint_dir: str | os.PathLike, log_path: str | os.PathLike | None = None,
            max_steps: int | None = None,
            on_step: Callable[["Trainer", LossReport], None] | None = None) -> dict:
        """Train until the planned step count (or ``max_steps`` more steps).

        Writes ``epoch_XXXX.pt`` at every epoch boundary and ``latest.pt``
        on completion, on stop request, and on SIGINT/SIGTERM. A divergence
        error propagates without overwriting the last good checkpoint.
        """
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
        log_file = None
        if log_path is not None:
            _truncate_log(log_path, self.global_step)
            log_file = open(log_path, "a", encoding="utf-8")
        if self.total_steps == 0:
            self.save(checkpoint_dir / "epoch_0000.pt")
        restore = self._install_signal_handlers()
        self._stop_requested = False
        budget = self.total_steps if max_steps is None else min(self.total_steps, self.global_step + max_steps)
        try:
            while self.global_step < budget and not self._stop_requested:
                report, record = self.step()
                if log_file is not None:
                    log_file.write(json.dumps(record) + "\n")
                    log_file.flush()
                if on_step is not None:
                    on_step(self, report)
                if self.global_step % self.steps_per_epoch == 0:
                    self.save(checkpoint_dir / f"epoch_{self.global_step // self.steps_per_epoch:04d}.pt")
                    logger.info("epoch %d done, step %d, total %.4f", self.epoch, self.global_step, report.total)
            self.save(checkpoint_dir / "latest.pt")
        finally:
            restore()
            if log_file is not None:
                log_file.close()
        return self.state_dict()

    def _install_signal_handlers(self) -> Callable[[], None]:
        if threading.current_thread() is not threading.main_thread():
            return lambda: None
        previous = {}

        def handler(signum, frame):
            logger.warning("signal %d received; checkpointing after the current step", signum)
            self.request_stop()

        for sig in (signal.SIGINT, signal.SIGTERM):
            previous[sig] = signal.signal(sig, handler)

        def restore():
            for sig, h in previous.items():
                signal.signal(sig, h)

        return restore


def _truncate_log(path: str | os.PathLike, keep_through_step: int) -> None:
    """Drop log lines beyond the step a resumed run restarts from."""
    path = Path(path)
    if not path.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
        return
    kept = [line for line in path.read_text(encoding="utf-8").splitlines()
            if line.strip() and json.loads(line)["step"] <= keep_through_step]
    path.write_text("".join(line + "\n" for line in kept), encoding="utf-8")


def run_training(manifest: SpeakerManifest, cfg: AppConfig, features: Mapping[str, MelSpectrogram],
                 work_dir: str | os.PathLike, resume: bool = False) -> dict:
    """Train per ``cfg`` and return the final checkpoint state.

    Checkpoints go to ``work_dir/checkpoints``, the step log to
    ``work_dir/train_log.jsonl``. With ``resume`` the run continues from
    ``checkpoints/latest.pt`` when it exists.
    """
    work_dir = Path(work_dir)
    ckpt_dir = work_dir / "checkpoints"
    latest = ckpt_dir / "latest.pt"
    if resume and latest.is_file():
        trainer = Trainer.from_checkpoint(latest, manifest, features, cfg)
        logger.info("resumed from %s at step %d", latest, trainer.global_step)
    else:
        trainer = Trainer(cfg, manifest, features)
    return trainer.run(ckpt_dir, work_dir / "train_log.jsonl")


# --------------------------------------------------------------------------- inference


@torch.no_grad()
def convert(source: MelSpectrogram, target: MelSpectrogram, model: DRVCModel,
            stats: MelStats | None = None) -> MelSpectrogram:
    """G(E_Con(source), E_S(target)) in inference mode.

    With ``stats`` the inputs are raw log-mels (normalized here) and the
    output is denormalized back to raw log-mel.
    """
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise ContractError(f"model parameter {name} is not finite")
    model.eval()
    if stats is not None:
        source, target = normalize_mel(source, stats), normalize_mel(target, stats)
    dtype = next(model.parameters()).dtype
    src = torch.as_tensor(source.frames, dtype=dtype).unsqueeze(0)
    tgt = torch.as_tensor(target.frames, dtype=dtype).unsqueeze(0)
    out = model.generate(model.encode_content(src), model.encode_style(tgt))[0].numpy()
    mel = MelSpectrogram(out, source.sample_rate, source.hop_length, target.speaker_id,
                         f"{source.utterance_id}_to_{target.speaker_id}")
    return denormalize_mel(mel, stats) if stats is not None else mel
