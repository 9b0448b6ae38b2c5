"""Segmentation network, domain discriminator, dilated-pyramid auxiliary head,
and checkpoint I/O.

The segmenter is an encoder-decoder with skip connections: `depth` levels,
`base_filters` channels at the top, channel count doubling per level, and
bilinear upsampling (no transposed convolutions) in the expanding path.
Inputs are reflection-padded to the next multiple of 2**(depth-1) and the
output is cropped back, so arbitrary sizes such as 300x300 work at depth 6.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import yaml

from .errors import ConfigError, ParseError, ShapeError


@dataclass(frozen=True)
class SegNetConfig:
    base_filters: int = 24
    depth: int = 6
    class_count: int = 5
    input_channels: int = 1
    use_batchnorm: bool = True
    # depth counts levels: depth 6 means 5 downsampling steps

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if self.base_filters < 1 or self.class_count < 2:
            raise ConfigError("base_filters >= 1 and class_count >= 2 required")


@dataclass(frozen=True)
class DiscriminatorConfig:
    filter_sequence: tuple[int, ...] = (64, 128, 256, 512, 1)
    leaky_slope: float = 0.2
    kernel_size: int = 4
    stride: int = 2

    def __post_init__(self):
        if self.filter_sequence[-1] != 1:
            raise ConfigError("last discriminator layer must have a single filter")


@dataclass(frozen=True)
class AsppConfig:
    dilation_rates: tuple[int, ...] = (6, 12, 18, 24)
    output_channels: int = 5

    def __post_init__(self):
        if min(self.dilation_rates) < 1 or len(set(self.dilation_rates)) != len(self.dilation_rates):
            raise ConfigError(f"dilation rates must be positive and distinct: {self.dilation_rates}")


@dataclass
class PredictionBatch:
    """Per-class probability maps (batch, class, rows, cols); per-pixel sums
    stay within 1e-5 of 1. `aux_probabilities` is set only when the auxiliary
    head was requested."""

    probabilities: torch.Tensor
    aux_probabilities: Optional[torch.Tensor] = None

    def __post_init__(self):
        for t in (self.probabilities, self.aux_probabilities):
            if t is None:
                continue
            if t.dim() != 4:
                raise ShapeError(f"expected 4D probabilities, got {tuple(t.shape)}")
            with torch.no_grad():
                sums = t.sum(dim=1)
                if not torch.allclose(sums, torch.ones_like(sums), atol=1e-5):
                    raise ShapeError("per-pixel probabilities do not sum to 1")
                if t.min() < 0 or t.max() > 1 + 1e-6:
                    raise ShapeError("probabilities outside [0, 1]")


def _conv_block(in_ch: int, out_ch: int, use_bn: bool) -> nn.Sequential:
    layers: list[nn.Module] = []
    for ic in (in_ch, out_ch):
        layers.append(nn.Conv2d(ic, out_ch, kernel_size=3, padding=1))
        if use_bn:
            layers.append(nn.BatchNorm2d(out_ch))
        layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class DilatedPyramidHead(nn.Module):
    """Parallel dilated 3x3 convolutions whose outputs are summed."""

    def __init__(self, in_channels: int, cfg: AsppConfig):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Conv2d(in_channels, cfg.output_channels, kernel_size=3, padding=r, dilation=r)
            for r in cfg.dilation_rates
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.branches[0](x)
        for branch in self.branches[1:]:
            out = out + branch(x)
        return out


class SegmentationNetwork(nn.Module):
    def __init__(self, cfg: SegNetConfig, aspp: Optional[AsppConfig] = None):
        super().__init__()
        self.cfg = cfg
        channels = [cfg.base_filters * 2**d for d in range(cfg.depth)]
        self.encoders = nn.ModuleList()
        in_ch = cfg.input_channels
        for ch in channels:
            self.encoders.append(_conv_block(in_ch, ch, cfg.use_batchnorm))
            in_ch = ch
        self.pool = nn.MaxPool2d(2)
        self.decoders = nn.ModuleList()
        for d in range(cfg.depth - 2, -1, -1):
            self.decoders.append(_conv_block(channels[d + 1] + channels[d], channels[d], cfg.use_batchnorm))
        self.head = nn.Conv2d(channels[0], cfg.class_count, kernel_size=1)
        self.aux_head = None
        if aspp is not None:
            # attached to the penultimate decoder block (half resolution);
            # at depth 2 there is a single decoder, which is used instead
            aux_ch = channels[1] if cfg.depth >= 3 else channels[0]
            self.aux_head = DilatedPyramidHead(aux_ch, aspp)

    @property
    def _divisor(self) -> int:
        return 2 ** (self.cfg.depth - 1)

    def _pad(self, x: torch.Tensor):
        _, _, h, w = x.shape
        div = self._divisor
        ph, pw = (-h) % div, (-w) % div
        if ph or pw:
            if min(h, w) == 1 and max(ph, pw) > 0:
                x = F.pad(x, (0, pw, 0, ph), mode="replicate")
            else:
                x = F.pad(x, (0, pw, 0, ph), mode="reflect")
        return x, (h, w)

    def forward(self, x: torch.Tensor, with_aux: bool = False):
        if x.dim() != 4 or x.shape[1] != self.cfg.input_channels:
            raise ShapeError(f"expected (N,{self.cfg.input_channels},H,W), got {tuple(x.shape)}")
        h, w = x.shape[2], x.shape[3]
        if min(h, w) < self._divisor:
            raise ConfigError(f"input {h}x{w} too small for depth {self.cfg.depth}")
        x, (h, w) = self._pad(x)
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x)
            if i < len(self.encoders) - 1:
                skips.append(x)
                x = self.pool(x)
        penultimate = None
        for i, dec in enumerate(self.decoders):
            skip = skips.pop()
            x = F.interpolate(x, size=skip.shape[2:], mode="bilinear", align_corners=False)
            x = dec(torch.cat([skip, x], dim=1))
            if i == len(self.decoders) - 2:
                penultimate = x
        logits = self.head(x)[:, :, :h, :w]
        if not with_aux:
            return logits
        if self.aux_head is None:
            raise ConfigError("network was built without an auxiliary head")
        if penultimate is None:
            penultimate = x
        aux = self.aux_head(penultimate)
        aux = F.interpolate(aux, size=(x.shape[2], x.shape[3]), mode="bilinear", align_corners=False)
        return logits, aux[:, :, :h, :w]


class DomainDiscriminator(nn.Module):
    """Strided convolution stack producing a single-channel logit map,
    bilinearly upsampled back to the input spatial size."""

    def __init__(self, cfg: DiscriminatorConfig, in_channels: int):
        super().__init__()
        self.cfg = cfg
        layers: list[nn.Module] = []
        in_ch = in_channels
        pad = cfg.kernel_size // 2 - 1 if cfg.kernel_size % 2 == 0 else cfg.kernel_size // 2
        for i, ch in enumerate(cfg.filter_sequence):
            layers.append(nn.Conv2d(in_ch, ch, kernel_size=cfg.kernel_size, stride=cfg.stride, padding=pad))
            if i < len(cfg.filter_sequence) - 1:
                layers.append(nn.LeakyReLU(cfg.leaky_slope, inplace=True))
            in_ch = ch
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.body(x)
        return F.interpolate(out, size=x.shape[2:], mode="bilinear", align_corners=False)


def _seeded(builder, seed: Optional[int]):
    if seed is None:
        return builder()
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return builder()


def build_segmenter(cfg: SegNetConfig, seed: Optional[int] = None, aspp: Optional[AsppConfig] = None) -> SegmentationNetwork:
    return _seeded(lambda: SegmentationNetwork(cfg, aspp=aspp), seed)


def build_discriminator(cfg: DiscriminatorConfig, in_channels: int, seed: Optional[int] = None) -> DomainDiscriminator:
    return _seeded(lambda: DomainDiscriminator(cfg, in_channels), seed)


def forward_segmenter(net: SegmentationNetwork, batch: torch.Tensor, with_aux: bool = False) -> PredictionBatch:
    out = net(batch, with_aux=with_aux)
    if with_aux:
        logits, aux = out
        return PredictionBatch(
            probabilities=torch.softmax(logits, dim=1),
            aux_probabilities=torch.softmax(aux, dim=1),
        )
    return PredictionBatch(probabilities=torch.softmax(out, dim=1))


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


# ---------------------------------------------------------------------------
# Checkpoints: meta.txt (yaml) + params.bin (name, shape, LE float32 payload)
# ---------------------------------------------------------------------------


def save_checkpoint(ckpt_dir, net: nn.Module, metadata: dict) -> None:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    with open(ckpt_dir / "meta.txt", "w", encoding="utf-8") as f:
        yaml.safe_dump(metadata, f, sort_keys=True)
    with open(ckpt_dir / "params.bin", "wb") as f:
        for name, tensor in net.state_dict().items():
            data = tensor.detach().cpu().to(torch.float32).numpy()
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", data.ndim))
            for dim in data.shape:
                f.write(struct.pack("<I", dim))
            f.write(data.astype("<f4").tobytes())


def load_checkpoint(ckpt_dir, net: nn.Module) -> dict:
    """Load parameters into `net` (built from matching config); returns metadata."""
    ckpt_dir = Path(ckpt_dir)
    meta_path = ckpt_dir / "meta.txt"
    if not meta_path.exists():
        raise ParseError(f"missing checkpoint metadata: {meta_path}")
    metadata = yaml.safe_load(meta_path.read_text(encoding="utf-8"))
    blob = (ckpt_dir / "params.bin").read_bytes()
    state = net.state_dict()
    loaded = {}
    offset = 0
    while offset < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += 4 * count
        if name not in state:
            raise ShapeError(f"checkpoint parameter {name!r} unknown to the network")
        target = state[name]
        if tuple(target.shape) != tuple(shape):
            raise ShapeError(f"{name}: checkpoint shape {shape} vs network {tuple(target.shape)}")
        loaded[name] = torch.from_numpy(arr.copy()).to(target.dtype)
    missing = set(state) - set(loaded)
    if missing:
        raise ShapeError(f"checkpoint is missing parameters: {sorted(missing)}")
    net.load_state_dict(loaded)
    return metadata


def segnet_config_to_dict(cfg: SegNetConfig) -> dict:
    return asdict(cfg)


def segnet_config_from_dict(d: dict) -> SegNetConfig:
    return SegNetConfig(**d)
