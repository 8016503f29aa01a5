"""Trainable components: content encoder, style encoder, generator, voice
discriminator, domain classifier; plus the gradient reversal layer.

Tensors are batch-first: mels are [B, T, n_mels], content codes [B, T, d_c],
style codes [B, d_s].
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .audio import MelSpectrogram
from .config import ModelConfig
from .errors import ContractError


# --------------------------------------------------------------------------- gradient reversal


class GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lambda_):
        ctx.lambda_ = float(lambda_)
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output * -ctx.lambda_, None


@dataclass
class GrlConfig:
    lambda_value: float = 1.0

    def __post_init__(self):
        if self.lambda_value < 0:
            raise ContractError("GRL lambda must be non-negative")


def grl_apply(x: torch.Tensor, cfg: GrlConfig | float) -> torch.Tensor:
    """Identity forward; gradient multiplied by ``-lambda`` on the way back."""
    lam = cfg.lambda_value if isinstance(cfg, GrlConfig) else float(cfg)
    if lam < 0:
        raise ContractError("GRL lambda must be non-negative")
    return GradientReversal.apply(x, lam)


def grl_lambda_schedule(k: float) -> float:
    """2 / (1 + exp(-10 k)) - 1 for training progress k in [0, 1]."""
    if not 0.0 <= k <= 1.0:
        warnings.warn(f"training progress {k} outside [0, 1]; clamping", RuntimeWarning, stacklevel=2)
        k = min(max(k, 0.0), 1.0)
    return 2.0 / (1.0 + math.exp(-10.0 * k)) - 1.0


# --------------------------------------------------------------------------- building blocks


def init_fan_in_uniform(module: nn.Module) -> None:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    for name, p in module.named_parameters():
        if "bias" in name:
            nn.init.zeros_(p)
        else:
            fan_in = p[0].numel() if p.dim() > 1 else p.numel()
            bound = 1.0 / math.sqrt(fan_in)
            nn.init.uniform_(p, -bound, bound)


def _conv_stack(in_ch: int, ch: int, kernel: int, n_layers: int = 3) -> nn.ModuleList:
    return nn.ModuleList(
        nn.Conv1d(in_ch if i == 0 else ch, ch, kernel, padding=kernel // 2) for i in range(n_layers)
    )


def _mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_dim, hidden), nn.LeakyReLU(0.2),
        nn.Linear(hidden, hidden), nn.LeakyReLU(0.2),
        nn.Linear(hidden, out_dim),
    )


class RecurrentConvNet(nn.Module):
    """LSTM -> three 1-D convs -> LSTM -> linear, stride 1 throughout.

    Shared topology of the content encoder and the generator. With
    ``style_dim`` set, each conv output is instance-normalized and modulated
    by a per-channel scale and shift predicted from the style vector.
    """

    def __init__(self, in_dim: int, out_dim: int, hidden: int, channels: int, kernel: int,
                 style_dim: int | None = None):
        super().__init__()
        self.rnn_in = nn.LSTM(in_dim, hidden, batch_first=True)
        self.convs = _conv_stack(hidden, channels, kernel)
        self.rnn_out = nn.LSTM(channels, hidden, batch_first=True)
        self.proj = nn.Linear(hidden, out_dim)
        self.act = nn.LeakyReLU(0.2)
        self.modulators = None
        if style_dim is not None:
            self.norm = nn.InstanceNorm1d(channels, affine=False)
            self.modulators = nn.ModuleList(nn.Linear(style_dim, 2 * channels) for _ in self.convs)

    def forward(self, x: torch.Tensor, style: torch.Tensor | None = None) -> torch.Tensor:
        h, _ = self.rnn_in(x)
        h = h.transpose(1, 2)
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if self.modulators is not None:
                scale, shift = self.modulators[i](style).unsqueeze(-1).chunk(2, dim=1)
                h = self.norm(h) * (1 + scale) + shift
            h = self.act(h)
        h, _ = self.rnn_out(h.transpose(1, 2))
        return self.proj(h)


class ContentEncoder(nn.Module):
    """Codes are instance-normalized over time (no affine): per-channel
    time-invariant offsets, where a speaker's timbre lives, are removed and
    the codes cannot shrink towards zero."""

    def __init__(self, n_mels: int, cfg: ModelConfig):
        super().__init__()
        self.net = RecurrentConvNet(n_mels, cfg.content_dim, cfg.rnn_hidden, cfg.conv_channels, cfg.kernel_size)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        h = self.net(mel).transpose(1, 2)
        return F.instance_norm(h, eps=1e-5).transpose(1, 2)


class StyleEncoder(nn.Module):
    """Conv stack, mean over time, linear: output size is independent of T.

    The vector is layer-normalized (no affine) so the domain loss cannot
    buy separability by inflating its norm."""

    def __init__(self, n_mels: int, cfg: ModelConfig):
        super().__init__()
        self.convs = _conv_stack(n_mels, cfg.conv_channels, cfg.kernel_size)
        self.act = nn.LeakyReLU(0.2)
        self.proj = nn.Linear(cfg.conv_channels, cfg.style_dim)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        h = mel.transpose(1, 2)
        for conv in self.convs:
            h = self.act(conv(h))
        s = self.proj(h.mean(dim=2))
        return F.layer_norm(s, s.shape[-1:])


class Generator(nn.Module):
    def __init__(self, n_mels: int, cfg: ModelConfig):
        super().__init__()
        self.conditioning = cfg.conditioning
        if cfg.conditioning == "concat":
            self.net = RecurrentConvNet(cfg.content_dim + cfg.style_dim, n_mels, cfg.rnn_hidden,
                                        cfg.conv_channels, cfg.kernel_size)
        else:
            self.net = RecurrentConvNet(cfg.content_dim, n_mels, cfg.rnn_hidden, cfg.conv_channels,
                                        cfg.kernel_size, style_dim=cfg.style_dim)

    def forward(self, content: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        if self.conditioning == "concat":
            tiled = style.unsqueeze(1).expand(-1, content.shape[1], -1)
            return self.net(torch.cat([content, tiled], dim=-1))
        return self.net(content, style)


class VoiceDiscriminator(nn.Module):
    """Conv stem, time average, two-hidden-layer MLP to one real/fake logit."""

    def __init__(self, n_mels: int, cfg: ModelConfig):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv1d(n_mels, cfg.disc_channels, cfg.kernel_size, padding=cfg.kernel_size // 2),
            nn.LeakyReLU(0.2),
            nn.Conv1d(cfg.disc_channels, cfg.disc_channels, cfg.kernel_size, padding=cfg.kernel_size // 2),
            nn.LeakyReLU(0.2),
        )
        self.head = _mlp(cfg.disc_channels, cfg.mlp_hidden, 1)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        return self.head(self.stem(mel.transpose(1, 2)).mean(dim=2)).squeeze(-1)


class DomainClassifier(nn.Module):
    """Speaker logits from a fixed-size code (style vector or pooled content)."""

    def __init__(self, in_dim: int, n_speakers: int, hidden: int):
        super().__init__()
        self.head = _mlp(in_dim, hidden, n_speakers)

    def forward(self, code: torch.Tensor) -> torch.Tensor:
        return self.head(code)


class DRVCModel(nn.Module):
    def __init__(self, n_mels: int, n_speakers: int, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        cfg.validate()
        if n_speakers < 2:
            raise ContractError("the domain classifier needs at least 2 speakers")
        self.cfg = cfg
        self.n_mels = n_mels
        self.n_speakers = n_speakers
        self.content_encoder = ContentEncoder(n_mels, cfg)
        self.style_encoder = StyleEncoder(n_mels, cfg)
        self.generator = Generator(n_mels, cfg)
        self.voice_discriminator = VoiceDiscriminator(n_mels, cfg)
        self.domain_classifier = DomainClassifier(cfg.style_dim, n_speakers, cfg.mlp_hidden)
        self.content_classifier = None
        if cfg.grl_placement in ("content_classifier", "both"):
            self.content_classifier = DomainClassifier(cfg.content_dim, n_speakers, cfg.mlp_hidden)
        init_fan_in_uniform(self)

    @property
    def grl_on_discriminator(self) -> bool:
        return self.cfg.grl_placement in ("voice_discriminator", "both")

    def components(self) -> dict[str, nn.Module]:
        groups = {
            "content_encoder": self.content_encoder,
            "style_encoder": self.style_encoder,
            "generator": self.generator,
            "voice_discriminator": self.voice_discriminator,
            "domain_classifier": self.domain_classifier,
        }
        if self.content_classifier is not None:
            groups["content_classifier"] = self.content_classifier
        return groups

    def _check_mel(self, mel: torch.Tensor) -> None:
        if mel.dim() != 3 or mel.shape[-1] != self.n_mels or mel.shape[1] < 1:
            raise ContractError(f"expected mel batch [B, T, {self.n_mels}], got {tuple(mel.shape)}")

    def encode_content(self, mel: torch.Tensor) -> torch.Tensor:
        self._check_mel(mel)
        return self.content_encoder(mel)

    def encode_style(self, mel: torch.Tensor) -> torch.Tensor:
        self._check_mel(mel)
        return self.style_encoder(mel)

    def generate(self, content: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        if content.dim() != 3 or content.shape[-1] != self.cfg.content_dim:
            raise ContractError(f"content must be [B, T, {self.cfg.content_dim}], got {tuple(content.shape)}")
        if style.dim() != 2 or style.shape[-1] != self.cfg.style_dim or style.shape[0] != content.shape[0]:
            raise ContractError(f"style must be [B, {self.cfg.style_dim}], got {tuple(style.shape)}")
        return self.generator(content, style)

    def discriminate_voice(self, mel: torch.Tensor, grl_lambda: float | None = None) -> torch.Tensor:
        """Real/fake logits; ``grl_lambda`` inserts the reversal layer at the input."""
        self._check_mel(mel)
        if grl_lambda is not None:
            mel = grl_apply(mel, grl_lambda)
        return self.voice_discriminator(mel)

    def classify_domain(self, style: torch.Tensor) -> torch.Tensor:
        """Speaker logits from style codes (softmax gives probabilities)."""
        if style.shape[-1] != self.cfg.style_dim:
            raise ContractError(f"style must have {self.cfg.style_dim} dims, got {style.shape[-1]}")
        return self.domain_classifier(style)

    def classify_content(self, content: torch.Tensor, grl_lambda: float) -> torch.Tensor:
        """Speaker logits from content codes through the reversal layer,
        classified per frame and averaged over time."""
        if self.content_classifier is None:
            raise ContractError("model was built without a content classifier")
        return self.content_classifier(grl_apply(content, grl_lambda)).mean(dim=1)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# --------------------------------------------------------------------------- single-utterance ops


@dataclass
class ContentEmbedding:
    values: np.ndarray  # [T', d_c]
    source_speaker: str = ""


@dataclass
class StyleEmbedding:
    values: np.ndarray  # [d_s]


def _as_batch(mel: MelSpectrogram, model: DRVCModel) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    return torch.as_tensor(mel.frames, dtype=dtype).unsqueeze(0)


@torch.no_grad()
def encode_content(mel: MelSpectrogram, model: DRVCModel) -> ContentEmbedding:
    model.eval()
    return ContentEmbedding(model.encode_content(_as_batch(mel, model))[0].numpy(), mel.speaker_id)


@torch.no_grad()
def encode_style(mel: MelSpectrogram, model: DRVCModel) -> StyleEmbedding:
    model.eval()
    return StyleEmbedding(model.encode_style(_as_batch(mel, model))[0].numpy())


@torch.no_grad()
def generate(content: ContentEmbedding, style: StyleEmbedding, model: DRVCModel,
             sample_rate: int = 22050, hop_length: int = 256) -> MelSpectrogram:
    model.eval()
    dtype = next(model.parameters()).dtype
    c = torch.as_tensor(content.values, dtype=dtype).unsqueeze(0)
    s = torch.as_tensor(style.values, dtype=dtype).unsqueeze(0)
    return MelSpectrogram(model.generate(c, s)[0].numpy(), sample_rate, hop_length)


@torch.no_grad()
def discriminate_voice(mel: MelSpectrogram, model: DRVCModel) -> float:
    model.eval()
    return float(model.discriminate_voice(_as_batch(mel, model))[0])


@torch.no_grad()
def classify_domain(style: StyleEmbedding, model: DRVCModel) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    logits = model.classify_domain(torch.as_tensor(style.values, dtype=dtype).unsqueeze(0))
    return torch.softmax(logits, dim=-1)[0].numpy()
