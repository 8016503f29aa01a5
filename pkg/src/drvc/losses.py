"""Loss terms of the DRVC objective and their weighted total.

Every function accepts torch tensors (keeping the autograd graph) or plain
array-likes, which are converted to float64 tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .config import LossWeights
from .errors import ContractError, TrainingDivergenceError

PROB_FLOOR = 1e-12
LOGIT_CLAMP = 30.0
TERMS = ("cycle", "identity", "same_content", "same_style", "domain", "adversarial")
_WEIGHT_OF = {
    "cycle": "w_cycle",
    "identity": "w_id",
    "adversarial": "w_adv",
    "domain": "w_domain",
    "same_content": "w_same",
    "same_style": "w_same",
}


def _tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    for attr in ("values", "frames"):
        if hasattr(x, attr):
            x = getattr(x, attr)
            break
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _l1(x, y, what: str) -> torch.Tensor:
    x, y = _tensor(x), _tensor(y)
    if x.shape != y.shape:
        raise ContractError(f"{what}: shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    return (x - y).abs().mean()


def same_loss_content(orig, reenc) -> torch.Tensor:
    """Mean absolute difference between a content code and its re-encoding."""
    return _l1(orig, reenc, "same_loss_content")


def same_loss_style(orig, reenc) -> torch.Tensor:
    return _l1(orig, reenc, "same_loss_style")


def _check_one_hot(y: torch.Tensor, name: str) -> None:
    ok = torch.all((y == 0) | (y == 1)) and torch.all(y.sum(dim=-1) == 1)
    if not ok:
        raise ContractError(f"{name} must be one-hot")


def domain_loss(probs_a, label_a, probs_b, label_b) -> torch.Tensor:
    """-1/2 (sum_i y_a(i) log p_a(i) + sum_i y_b(i) log p_b(i)).

    Inputs may be single vectors [K] or batches [B, K]; batches are averaged.
    Probabilities are floored at 1e-12 before the log.
    """
    pa, ya, pb, yb = (_tensor(v) for v in (probs_a, label_a, probs_b, label_b))
    if pa.shape != ya.shape or pb.shape != yb.shape:
        raise ContractError("domain_loss: probabilities and labels must share a shape")
    _check_one_hot(ya, "label_a")
    _check_one_hot(yb, "label_b")
    ce_a = -(ya * pa.clamp_min(PROB_FLOOR).log()).sum(dim=-1)
    ce_b = -(yb * pb.clamp_min(PROB_FLOOR).log()).sum(dim=-1)
    return 0.5 * (ce_a.mean() + ce_b.mean())


def domain_loss_from_logits(logits_a: torch.Tensor, labels_a: torch.Tensor,
                            logits_b: torch.Tensor, labels_b: torch.Tensor) -> torch.Tensor:
    """Same value as ``domain_loss(softmax(logits), one_hot(labels), ...)``
    with the log taken in log-space for stability; integer class labels."""
    floor = math.log(PROB_FLOOR)

    def ce(logits, labels):
        logp = F.log_softmax(logits, dim=-1).clamp_min(floor)
        return -logp.gather(-1, labels.unsqueeze(-1)).squeeze(-1)

    return 0.5 * (ce(logits_a, labels_a).mean() + ce(logits_b, labels_b).mean())


def cycle_loss(a, a_hat, b, b_hat) -> torch.Tensor:
    """Mean-L1 of both cross-cycle reconstructions, summed over the two domains."""
    return _l1(a_hat, a, "cycle_loss (a)") + _l1(b_hat, b, "cycle_loss (b)")


def identity_loss(a, a_rec, b, b_rec) -> torch.Tensor:
    return _l1(a_rec, a, "identity_loss (a)") + _l1(b_rec, b, "identity_loss (b)")


def _bce_real(logit: torch.Tensor) -> torch.Tensor:
    return F.softplus(-logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)).mean()


def _bce_fake(logit: torch.Tensor) -> torch.Tensor:
    return F.softplus(logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)).mean()


def adversarial_loss(logit_real_a, logit_fake_a, logit_real_b, logit_fake_b) -> tuple[torch.Tensor, torch.Tensor]:
    """Binary cross-entropy of the voice discriminator, summed over the four
    logit groups (real a, fake a, real b, fake b).

    Returns ``(disc_term, gen_term)``. Only ``disc_term`` enters the
    objective: when the fakes reach the discriminator through the gradient
    reversal layer, the generator is updated with the reversed gradient of
    the fake half. ``gen_term`` is that fake half, detached, for logging.
    """
    ra, fa, rb, fb = (_tensor(v) for v in (logit_real_a, logit_fake_a, logit_real_b, logit_fake_b))
    fake = _bce_fake(fa) + _bce_fake(fb)
    disc = _bce_real(ra) + fake + _bce_real(rb)
    return disc, fake.detach()


def total_loss(terms: Mapping[str, torch.Tensor | float | None], weights: LossWeights,
               enabled: Mapping[str, bool] | None = None) -> torch.Tensor:
    """Weighted sum of enabled terms; ``same_content`` and ``same_style`` share
    ``w_same``. A term that is ``None`` or disabled contributes nothing."""
    enabled = enabled or {}
    total = None
    for name in TERMS:
        value = terms.get(name)
        if value is None or not enabled.get(name, True):
            continue
        value = _tensor(value) if not isinstance(value, torch.Tensor) else value
        if not torch.isfinite(value).all():
            raise TrainingDivergenceError(f"loss term {name!r} is not finite ({float(value)})", term=name)
        contribution = getattr(weights, _WEIGHT_OF[name]) * value
        total = contribution if total is None else total + contribution
    if total is None:
        return torch.zeros((), dtype=torch.float64)
    return total


@dataclass
class LossReport:
    cycle: float | None = None
    identity: float | None = None
    same_content: float | None = None
    same_style: float | None = None
    domain: float | None = None
    adversarial: float | None = None
    total: float = 0.0
    enabled: dict[str, bool] = field(default_factory=lambda: {t: True for t in TERMS})

    @classmethod
    def from_terms(cls, terms: Mapping[str, torch.Tensor | None], total: torch.Tensor,
                   enabled: Mapping[str, bool]) -> "LossReport":
        def scalar(v):
            return float(torch.as_tensor(v).detach())

        values = {
            name: scalar(terms[name]) if terms.get(name) is not None and enabled.get(name, True) else None
            for name in TERMS
        }
        return cls(**values, total=scalar(total), enabled={t: bool(enabled.get(t, True)) for t in TERMS})

    def weighted_total(self, weights: LossWeights) -> float:
        return sum(getattr(weights, _WEIGHT_OF[name]) * getattr(self, name)
                   for name in TERMS if getattr(self, name) is not None)

    def to_log_record(self, step: int, epoch: int, lambda_grl: float, lr: float) -> dict:
        record = {"step": step, "epoch": epoch}
        record.update({name: getattr(self, name) for name in TERMS})
        record.update(total=self.total, lambda_grl=lambda_grl, lr=lr)
        return record
