"""Generator (1-D attention U-Net) and discriminator (1-D CNN) architectures.

Layout conventions:

* every convolution uses "same" padding; with the even kernel (16) that means
  an asymmetric pad of 7 left / 8 right, so stride alone changes length;
* encoder and discriminator use LeakyReLU(0.2); decoder hidden layers use
  ReLU; the generator output is tanh and the discriminator head is sigmoid;
* generator hidden layers carry affine instance normalization (per-item
  statistics, so items in a batch never interact); the discriminator has none;
* stride-2 encoder stages are mirrored by nearest-neighbor x2 upsampling
  followed by a same-padded convolution; stride-1 stages by a plain
  convolution;
* all six skip connections (the raw input plus the first five encoder
  outputs) pass through additive attention gates before concatenation.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class GeneratorConfig:
    encoder_filters: tuple[int, ...] = (64, 128, 256, 512, 512, 512)
    encoder_strides: tuple[int, ...] = (2, 2, 2, 1, 1, 1)
    kernel_size: int = 16
    input_length: int = 512
    attention_gates: bool = True

    def __post_init__(self):
        if len(self.encoder_filters) != len(self.encoder_strides):
            raise ValueError("encoder_filters and encoder_strides lengths differ")
        if any(s not in (1, 2) for s in self.encoder_strides):
            raise ValueError("strides must be 1 or 2")
        if self.input_length % self.stride_product != 0:
            raise ValueError("input_length must be divisible by the stride product")
        if self.input_length // self.stride_product < 2:
            raise ValueError("bottleneck must keep at least 2 samples "
                             "(instance normalization needs them)")

    @property
    def stride_product(self) -> int:
        p = 1
        for s in self.encoder_strides:
            p *= s
        return p


@dataclass(frozen=True)
class DiscriminatorConfig:
    filters: tuple[int, ...] = (32, 64, 128, 256, 512)
    kernel_size: int = 16
    stride: int = 1


def _same_pad(x: torch.Tensor, kernel_size: int) -> torch.Tensor:
    return F.pad(x, ((kernel_size - 1) // 2, kernel_size // 2))


class SameConv1d(nn.Module):
    """Conv1d with length-preserving asymmetric padding (out len = ceil(in/stride))."""

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int, stride: int = 1):
        super().__init__()
        self.kernel_size = kernel_size
        self.conv = nn.Conv1d(in_ch, out_ch, kernel_size, stride=stride)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(_same_pad(x, self.kernel_size))


class AttentionGate1d(nn.Module):
    """Additive attention over a skip connection.

    1-wide convolutions project skip and gating features to an intermediate
    width (half the skip channels, minimum 1); their rectified sum is squashed
    to a single sigmoid coefficient channel that multiplies the skip.
    """

    def __init__(self, skip_channels: int, gating_channels: int):
        super().__init__()
        inter = max(1, skip_channels // 2)
        self.project_skip = nn.Conv1d(skip_channels, inter, 1)
        self.project_gate = nn.Conv1d(gating_channels, inter, 1)
        self.score = nn.Conv1d(inter, 1, 1)

    def coefficients(self, skip: torch.Tensor, gating: torch.Tensor) -> torch.Tensor:
        if skip.shape[1] != self.project_skip.in_channels:
            raise ValueError(
                f"skip has {skip.shape[1]} channels, gate expects "
                f"{self.project_skip.in_channels}")
        if gating.shape[-1] != skip.shape[-1]:
            gating = F.interpolate(gating, size=skip.shape[-1], mode="nearest")
        mixed = F.relu(self.project_skip(skip) + self.project_gate(gating))
        return torch.sigmoid(self.score(mixed))

    def forward(self, skip: torch.Tensor, gating: torch.Tensor) -> torch.Tensor:
        return skip * self.coefficients(skip, gating)


class Generator(nn.Module):
    """PPG -> ECG translator: (batch, 1, n) in [-1, 1] to same shape/range."""

    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        self.config = config or GeneratorConfig()
        cfg = self.config
        k = cfg.kernel_size
        channels = (1,) + tuple(cfg.encoder_filters)

        self.encoder = nn.ModuleList(
            SameConv1d(channels[i], channels[i + 1], k, cfg.encoder_strides[i])
            for i in range(len(cfg.encoder_filters)))
        self.encoder_norm = nn.ModuleList(
            nn.Identity() if i == 0 else nn.InstanceNorm1d(channels[i + 1], affine=True)
            for i in range(len(cfg.encoder_filters)))

        decoder, gates, decoder_norm = [], [], []
        h_ch = cfg.encoder_filters[-1]
        for layer in reversed(range(len(cfg.encoder_filters))):
            skip_ch = channels[layer]
            out_ch = channels[layer]  # mirror maps back to the encoder layer's input width
            gates.append(AttentionGate1d(skip_ch, h_ch) if cfg.attention_gates else None)
            decoder.append(SameConv1d(h_ch + skip_ch, out_ch, k, stride=1))
            decoder_norm.append(
                nn.InstanceNorm1d(out_ch, affine=True) if layer > 0 else nn.Identity())
            h_ch = out_ch
        self.decoder = nn.ModuleList(decoder)
        self.gates = nn.ModuleList(g for g in gates if g is not None)
        self._gated = cfg.attention_gates
        self.decoder_norm = nn.ModuleList(decoder_norm)

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Feature pyramid [input, e1, ..., eL]."""
        feats = [x]
        h = x
        for conv, norm in zip(self.encoder, self.encoder_norm):
            h = F.leaky_relu(norm(conv(h)), 0.2)
            feats.append(h)
        return feats

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if x.dim() != 3 or x.shape[1] != 1:
            raise ValueError(f"expected input of shape (batch, 1, n), got {tuple(x.shape)}")
        if (x.shape[-1] % cfg.stride_product != 0
                or x.shape[-1] // cfg.stride_product < 2):
            raise ValueError(
                f"input length {x.shape[-1]} must be a multiple of the stride "
                f"product {cfg.stride_product} with at least 2 bottleneck samples")
        feats = self.encode(x)
        h = feats[-1]
        n_layers = len(self.encoder)
        for i in range(n_layers):
            layer = n_layers - 1 - i
            if cfg.encoder_strides[layer] == 2:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
            skip = feats[layer]
            if self._gated:
                skip = self.gates[i](skip, h)
            h = self.decoder[i](torch.cat([h, skip], dim=1))
            if layer > 0:
                h = F.relu(self.decoder_norm[i](h))
            else:
                h = torch.tanh(h)
        return h


class Discriminator(nn.Module):
    """Real/fake score in (0, 1) per 1-channel input window."""

    def __init__(self, config: DiscriminatorConfig | None = None):
        super().__init__()
        self.config = config or DiscriminatorConfig()
        cfg = self.config
        channels = (1,) + tuple(cfg.filters)
        self.layers = nn.ModuleList(
            SameConv1d(channels[i], channels[i + 1], cfg.kernel_size, cfg.stride)
            for i in range(len(cfg.filters)))
        self.head = SameConv1d(cfg.filters[-1], 1, cfg.kernel_size, cfg.stride)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        if y.dim() != 3 or y.shape[1] != 1:
            raise ValueError(f"expected input of shape (batch, 1, n), got {tuple(y.shape)}")
        h = y
        for layer in self.layers:
            h = F.leaky_relu(layer(h), 0.2)
        h = self.head(h)
        return torch.sigmoid(h.mean(dim=(1, 2)))


def init_parameters(module: nn.Module, seed: int) -> None:
    """Seeded init: N(0, 0.02) conv weights, zero biases, unit norm scales.

    The same seed and architecture always produce bit-identical parameters.
    """
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, nn.Conv1d):
            with torch.no_grad():
                m.weight.normal_(0.0, 0.02, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.InstanceNorm1d) and m.affine:
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


def build_generator(config: GeneratorConfig | None = None, seed: int = 0) -> Generator:
    model = Generator(config)
    init_parameters(model, seed)
    return model


def build_discriminator(config: DiscriminatorConfig | None = None,
                        seed: int = 0) -> Discriminator:
    model = Discriminator(config)
    init_parameters(model, seed + 1)  # offset so G and D never share init noise
    return model


def _conv_params(kernel: int, in_ch: int, out_ch: int) -> int:
    return kernel * in_ch * out_ch + out_ch


def parameter_count(config) -> int:
    """Closed-form parameter total for either config type."""
    if isinstance(config, DiscriminatorConfig):
        channels = (1,) + tuple(config.filters)
        total = sum(_conv_params(config.kernel_size, channels[i], channels[i + 1])
                    for i in range(len(config.filters)))
        total += _conv_params(config.kernel_size, config.filters[-1], 1)
        return total
    if not isinstance(config, GeneratorConfig):
        raise TypeError(f"unsupported config type {type(config)!r}")
    k = config.kernel_size
    channels = (1,) + tuple(config.encoder_filters)
    total = 0
    for i in range(len(config.encoder_filters)):
        total += _conv_params(k, channels[i], channels[i + 1])
        if i > 0:
            total += 2 * channels[i + 1]  # affine instance norm
    h_ch = config.encoder_filters[-1]
    for layer in reversed(range(len(config.encoder_filters))):
        skip_ch = out_ch = channels[layer]
        if config.attention_gates:
            inter = max(1, skip_ch // 2)
            total += (skip_ch * inter + inter)      # skip projection
            total += (h_ch * inter + inter)         # gating projection
            total += (inter * 1 + 1)                # score
        total += _conv_params(k, h_ch + skip_ch, out_ch)
        if layer > 0:
            total += 2 * out_ch
        h_ch = out_ch
    return total


def config_fingerprint(gen_cfg: GeneratorConfig,
                       disc_cfg: DiscriminatorConfig | None = None) -> str:
    payload = {"generator": asdict(gen_cfg)}
    if disc_cfg is not None:
        payload["discriminator"] = asdict(disc_cfg)
    blob = json.dumps(payload, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class FingerprintMismatchError(Exception):
    """Checkpoint was produced under a different architecture config."""


def save_checkpoint(path: str | Path, *, generator: Generator,
                    discriminator: Discriminator | None = None,
                    seed: int = 0, epoch: int = 0, iteration: int = 0,
                    extra: dict | None = None) -> None:
    disc_cfg = discriminator.config if discriminator is not None else None
    payload = {
        "fingerprint": config_fingerprint(generator.config, disc_cfg),
        "generator_config": asdict(generator.config),
        "discriminator_config": asdict(disc_cfg) if disc_cfg else None,
        "seed": seed,
        "epoch": epoch,
        "iteration": iteration,
        "generator_state": generator.state_dict(),
        "discriminator_state":
            discriminator.state_dict() if discriminator is not None else None,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path, expected_generator_config:
                    GeneratorConfig | None = None) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    gen_cfg = GeneratorConfig(**{
        **payload["generator_config"],
        "encoder_filters": tuple(payload["generator_config"]["encoder_filters"]),
        "encoder_strides": tuple(payload["generator_config"]["encoder_strides"]),
    })
    disc_cfg = None
    if payload.get("discriminator_config"):
        disc_cfg = DiscriminatorConfig(**{
            **payload["discriminator_config"],
            "filters": tuple(payload["discriminator_config"]["filters"]),
        })
    if payload["fingerprint"] != config_fingerprint(gen_cfg, disc_cfg):
        raise FingerprintMismatchError(f"corrupt checkpoint header in {path}")
    if (expected_generator_config is not None
            and expected_generator_config != gen_cfg):
        raise FingerprintMismatchError(
            f"checkpoint {path} was trained with a different generator config")
    payload["generator_config"] = gen_cfg
    payload["discriminator_config"] = disc_cfg
    return payload


def generator_from_payload(payload: dict) -> Generator:
    model = Generator(payload["generator_config"])
    model.load_state_dict(payload["generator_state"])
    model.eval()
    return model


def generator_from_checkpoint(path: str | Path) -> Generator:
    return generator_from_payload(load_checkpoint(path))
