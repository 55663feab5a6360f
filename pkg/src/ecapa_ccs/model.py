"""ECAPA-TDNN with convolution channel separation (CCS) and frequency
sub-band aggregation (FSA).

Each SE-Res2Block emits ``s + c`` channels. The first ``s`` rows (stop
channels) go straight to the pooling layer; the remaining ``c`` rows
(continuous channels) feed every later block through a running sum with the
Fst-Conv output and, concatenated over blocks, the Last-Conv. ``s = 0,
c = 1024`` is the plain ECAPA-TDNN.

With FSA the 48 mel bins are cut into four overlapping 18-bin bands, each
processed by its own Fst-Conv + three blocks (widths scaled by ``rho``);
the 12 continuous maps share one Last-Conv and the 12 stop maps go to
pooling.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from . import tensor as tt
from .errors import ConfigError, ShapeError
from .layers import (
    AttentiveStatsPooling,
    BatchNorm1d,
    ConvBnRelu,
    Linear,
    Module,
    Res2DilatedConv,
    SEBlock,
)
from .tensor import Tensor, make_rng


def _fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(value).limit_denominator(1 << 20)
    return Fraction(value)


@dataclass
class ModelConfig:
    n_mels: int = 48
    s: int = 0
    c: int = 1024
    bottleneck: int = 128
    res2_scale: int = 8
    dilations: tuple[int, ...] = (2, 3, 4)
    fst_kernel: int = 5
    res2_kernel: int = 3
    last_conv_out: int = 1536
    se_bottleneck: int = 128
    attention_bottleneck: int = 128
    asp_context: bool = False
    fsa_enabled: bool = False
    fsa_window: int = 18
    fsa_hop: int = 10
    fsa_rho: Fraction = field(default_factory=lambda: Fraction(1, 2))
    n_classes: int = 10

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        self.fsa_rho = _fraction(self.fsa_rho)

    # per-branch widths (after FSA scaling)
    @property
    def branch_s(self) -> int:
        return math.ceil(self.fsa_rho * self.s) if self.fsa_enabled else self.s

    @property
    def branch_c(self) -> int:
        return math.ceil(self.fsa_rho * self.c) if self.fsa_enabled else self.c

    @property
    def branch_bottleneck(self) -> int:
        return math.ceil(self.fsa_rho * self.bottleneck) if self.fsa_enabled else self.bottleneck

    @property
    def n_branches(self) -> int:
        return 4 if self.fsa_enabled else 1

    @property
    def pooling_channels(self) -> int:
        return self.last_conv_out + self.n_branches * len(self.dilations) * self.branch_s

    def validate(self) -> "ModelConfig":
        if self.s < 0 or self.c < 1:
            raise ConfigError(f"need s >= 0 and c >= 1, got s={self.s}, c={self.c}")
        if self.n_classes < 1 or self.n_mels < 1:
            raise ConfigError("n_classes and n_mels must be positive")
        if not self.dilations or any(d < 1 for d in self.dilations):
            raise ConfigError(f"invalid dilations {self.dilations}")
        for name in ("fst_kernel", "res2_kernel"):
            if getattr(self, name) % 2 == 0:
                raise ConfigError(f"{name} must be odd")
        if self.fsa_enabled:
            if self.fsa_rho <= 0:
                raise ConfigError(f"fsa rho must be positive, got {self.fsa_rho}")
            if 3 * self.fsa_hop + self.fsa_window != self.n_mels:
                raise ConfigError(
                    f"fsa bands do not cover the mel axis: 3*{self.fsa_hop} + "
                    f"{self.fsa_window} != {self.n_mels}")
        b = self.branch_bottleneck
        if b % self.res2_scale:
            raise ConfigError(f"bottleneck {b} not divisible by res2 scale {self.res2_scale}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        d["fsa_rho"] = str(self.fsa_rho)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {unknown}")
        return cls(**d)


@dataclass
class BlockOutput:
    F: Tensor
    F_stop: Tensor
    F_cont: Tensor


def ccs_split(F: Tensor, s: int, c: int) -> tuple[Tensor, Tensor]:
    """Rows [0, s) become the stop map, rows [s, s + c) the continuous map."""
    axis = F.ndim - 2
    if F.shape[axis] != s + c:
        raise ShapeError(f"block output has {F.shape[axis]} channels, expected s+c={s + c}")
    stop, cont = tt.split(F, axis, [s, c])
    return stop, cont


def aggregate_input(X: Tensor, conts: list[Tensor], k: int) -> Tensor:
    """Input of block k (1-based): X for k = 1, else X + F_1^cont + ... + F_{k-1}^cont."""
    if k < 1:
        raise ValueError(f"block index starts at 1, got {k}")
    out = X
    for F in conts[: k - 1]:
        if F.shape != X.shape:
            raise ShapeError(f"continuous map {F.shape} does not match X {X.shape}")
        out = tt.add(out, F)
    return out


class SERes2Block(Module):
    """1x1 conv -> Res2 dilated conv -> 1x1 conv -> SE, BN+ReLU after each conv."""

    def __init__(self, in_channels: int, bottleneck: int, s: int, c: int, dilation: int,
                 scale: int = 8, kernel_size: int = 3, se_bottleneck: int = 128,
                 *, rng: np.random.Generator):
        super().__init__()
        self.s, self.c = s, c
        self.conv1 = ConvBnRelu(in_channels, bottleneck, 1, rng=rng)
        self.res2 = Res2DilatedConv(bottleneck, scale, kernel_size, dilation, rng=rng)
        self.bn2 = BatchNorm1d(bottleneck)
        self.conv3 = ConvBnRelu(bottleneck, s + c, 1, rng=rng)
        self.se = SEBlock(s + c, se_bottleneck, rng=rng)

    def features(self, x: Tensor) -> Tensor:
        h = self.conv1(x)
        h = tt.relu(self.bn2(self.res2(h)))
        return self.se(self.conv3(h))

    def forward(self, x: Tensor) -> BlockOutput:
        F = self.features(x)
        stop, cont = ccs_split(F, self.s, self.c)
        return BlockOutput(F, stop, cont)


def se_res2block_forward(I_k: Tensor, block: SERes2Block) -> BlockOutput:
    return block(I_k)


@dataclass
class BranchTrace:
    X: Tensor
    inputs: list[Tensor]
    blocks: list[BlockOutput]


class Branch(Module):
    """Fst-Conv followed by the SE-Res2Blocks with CCS routing."""

    def __init__(self, in_bins: int, s: int, c: int, bottleneck: int, cfg: ModelConfig,
                 *, rng: np.random.Generator):
        super().__init__()
        self.fst_conv = ConvBnRelu(in_bins, c, cfg.fst_kernel, rng=rng)
        self.blocks = [
            SERes2Block(c, bottleneck, s, c, d, cfg.res2_scale, cfg.res2_kernel,
                        cfg.se_bottleneck, rng=rng)
            for d in cfg.dilations
        ]

    def forward(self, x: Tensor, stop_override: dict[int, np.ndarray] | None = None) -> BranchTrace:
        X = self.fst_conv(x)
        inputs, outs, conts = [], [], []
        for k, block in enumerate(self.blocks, start=1):
            I_k = aggregate_input(X, conts, k)
            out = block(I_k)
            if stop_override and k in stop_override:
                out = BlockOutput(out.F, Tensor(stop_override[k]), out.F_cont)
            inputs.append(I_k)
            outs.append(out)
            conts.append(out.F_cont)
        return BranchTrace(X, inputs, outs)


@dataclass
class ForwardTrace:
    branches: list[BranchTrace]
    last_conv_input: Tensor
    last_conv_output: Tensor
    pooling_input: Tensor
    pooled: Tensor
    logits: Tensor


def fsa_slice(mel, w: int = 18, h: int = 10) -> list:
    """Four overlapping bands of ``w`` bins starting at 0, h, 2h, 3h (copies).

    Works on numpy arrays or tensors with the mel axis second to last.
    """
    n = mel.shape[-2]
    if 3 * h + w != n:
        raise ConfigError(f"bands of width {w} and hop {h} do not cover {n} mel bins")
    if isinstance(mel, Tensor):
        return [_band(mel, i * h, w) for i in range(4)]
    return [np.array(mel[..., i * h: i * h + w, :]) for i in range(4)]


def _band(mel: Tensor, start: int, w: int) -> Tensor:
    axis = mel.ndim - 2
    n = mel.shape[axis]
    sizes = [start, w, n - start - w]
    return tt.split(mel, axis, sizes)[1]


class EcapaCcsModel(Module):
    """Single-branch (non-FSA) ECAPA-TDNN with CCS routing."""

    def __init__(self, cfg: ModelConfig, seed: int | np.random.Generator = 0):
        super().__init__()
        cfg.validate()
        self.config = cfg
        rng = make_rng(seed)
        self.branches = self._build_branches(cfg, rng)
        n_blocks = len(cfg.dilations)
        self.last_conv = ConvBnRelu(cfg.n_branches * n_blocks * cfg.branch_c,
                                    cfg.last_conv_out, 1, rng=rng)
        self.pooling = AttentiveStatsPooling(cfg.pooling_channels, cfg.attention_bottleneck,
                                             context=cfg.asp_context, rng=rng)
        self.classifier = Linear(2 * cfg.pooling_channels, cfg.n_classes, rng=rng)

    def _build_branches(self, cfg: ModelConfig, rng) -> list[Branch]:
        return [Branch(cfg.n_mels, cfg.s, cfg.c, cfg.bottleneck, cfg, rng=rng)]

    def _branch_inputs(self, mel: Tensor) -> list[Tensor]:
        return [mel]

    def _check_input(self, mel) -> Tensor:
        mel = mel if isinstance(mel, Tensor) else Tensor(mel)
        if mel.ndim == 2:
            mel = tt.reshape(mel, (1,) + mel.shape)
        if mel.ndim != 3 or mel.shape[1] != self.config.n_mels:
            raise ShapeError(f"expected (B x) {self.config.n_mels} x T input, got {mel.shape}")
        return mel

    def trace(self, mel, stop_override: dict | None = None) -> ForwardTrace:
        """Forward pass keeping every intermediate map.

        ``stop_override`` maps a block index (or ``(branch, block)`` pair for
        FSA) to an array that replaces that block's stop map before pooling.
        """
        mel = self._check_input(mel)
        traces = []
        for b, (branch, x) in enumerate(zip(self.branches, self._branch_inputs(mel))):
            override = None
            if stop_override:
                override = {k: v for key, v in stop_override.items()
                            for k in [_block_key(key, b)] if k is not None}
            traces.append(branch(x, override))
        conts = [o.F_cont for t in traces for o in t.blocks]
        stops = [o.F_stop for t in traces for o in t.blocks]
        last_in = tt.concat(conts, axis=1)
        last_out = self.last_conv(last_in)
        pool_in = tt.concat([last_out] + stops, axis=1)
        pooled = self.pooling(pool_in)
        logits = self.classifier(pooled)
        return ForwardTrace(traces, last_in, last_out, pool_in, pooled, logits)

    def forward(self, mel) -> Tensor:
        """Logits, ``B x n_classes`` (or ``n_classes`` for an unbatched input)."""
        squeeze = (mel.ndim if isinstance(mel, Tensor) else np.ndim(mel)) == 2
        logits = self.trace(mel).logits
        return tt.reshape(logits, (logits.shape[1],)) if squeeze else logits


def _block_key(key, branch: int):
    if isinstance(key, tuple):
        return key[1] if key[0] == branch else None
    return key if branch == 0 else None


class FsaModel(EcapaCcsModel):
    """Four-band variant: one branch per overlapping mel band."""

    def _build_branches(self, cfg: ModelConfig, rng) -> list[Branch]:
        return [Branch(cfg.fsa_window, cfg.branch_s, cfg.branch_c, cfg.branch_bottleneck,
                       cfg, rng=rng) for _ in range(4)]

    def _branch_inputs(self, mel: Tensor) -> list[Tensor]:
        return fsa_slice(mel, self.config.fsa_window, self.config.fsa_hop)


def build(cfg: ModelConfig, seed: int | np.random.Generator = 0) -> EcapaCcsModel:
    cfg.validate()
    return FsaModel(cfg, seed) if cfg.fsa_enabled else EcapaCcsModel(cfg, seed)


def forward(mel, model: EcapaCcsModel, mode: str = "eval") -> Tensor:
    model.train(mode == "train")
    return model(mel)


fsa_forward = forward


class VanillaEcapa(Module):
    """ECAPA-TDNN wired directly from its layer table, without CCS.

    Blocks output ``channels`` maps; block k receives X plus all previous
    block outputs; the Last-Conv sees all block outputs.
    """

    def __init__(self, n_mels: int = 48, channels: int = 1024, bottleneck: int = 128,
                 dilations=(2, 3, 4), last_conv_out: int = 1536, n_classes: int = 10,
                 res2_scale: int = 8, se_bottleneck: int = 128, attention_bottleneck: int = 128,
                 seed: int | np.random.Generator = 0):
        super().__init__()
        rng = make_rng(seed)
        self.fst_conv = ConvBnRelu(n_mels, channels, 5, rng=rng)
        self.blocks = []
        for d in dilations:
            block = Module()
            block.conv1 = ConvBnRelu(channels, bottleneck, 1, rng=rng)
            block.res2 = Res2DilatedConv(bottleneck, res2_scale, 3, d, rng=rng)
            block.bn2 = BatchNorm1d(bottleneck)
            block.conv3 = ConvBnRelu(bottleneck, channels, 1, rng=rng)
            block.se = SEBlock(channels, se_bottleneck, rng=rng)
            self.blocks.append(block)
        self.last_conv = ConvBnRelu(len(dilations) * channels, last_conv_out, 1, rng=rng)
        self.pooling = AttentiveStatsPooling(last_conv_out, attention_bottleneck, rng=rng)
        self.classifier = Linear(2 * last_conv_out, n_classes, rng=rng)

    def forward(self, mel) -> Tensor:
        mel = mel if isinstance(mel, Tensor) else Tensor(mel)
        X = self.fst_conv(mel)
        outs = []
        for block in self.blocks:
            h = X
            for prev in outs:
                h = tt.add(h, prev)
            h = block.conv1(h)
            h = tt.relu(block.bn2(block.res2(h)))
            outs.append(block.se(block.conv3(h)))
        pooled = self.pooling(self.last_conv(tt.concat(outs, axis=outs[0].ndim - 2)))
        return self.classifier(pooled)


def param_count(model: Module) -> int:
    """Number of trainable scalars (BN running statistics excluded)."""
    return int(sum(p.size for p in model.parameters()))


def layer_table(model: EcapaCcsModel, frames: str | int = "T") -> list[tuple[str, str, str, int]]:
    """Rows of (layer, structure, output shape, parameter count)."""
    cfg = model.config
    rows = []

    def count(m: Module) -> int:
        return param_count(m)

    for b, branch in enumerate(model.branches):
        pre = f"[band {b}] " if cfg.fsa_enabled else ""
        fc = branch.fst_conv
        rows.append((pre + "Fst-Conv", f"Conv1D({cfg.fst_kernel}, 1, 1)",
                     f"{fc.conv.weight.shape[0]} x {frames}", count(fc)))
        for k, block in enumerate(branch.blocks, start=1):
            d = block.res2.convs[0].dilation if block.res2.convs else cfg.dilations[k - 1]
            name = f"{pre}SE-Res2Block (B{k})"
            width = block.s + block.c
            rows.append((name, "Conv1D(1, 1, 1)", f"{block.conv1.conv.weight.shape[0]} x {frames}",
                         count(block.conv1)))
            rows.append((name, f"Res2 Conv1D({cfg.res2_kernel}, 1, {d})",
                         f"{block.conv1.conv.weight.shape[0]} x {frames}",
                         count(block.res2) + count(block.bn2)))
            rows.append((name, "Conv1D(1, 1, 1)", f"{width} x {frames}", count(block.conv3)))
            split = f" (stop {block.s} / cont {block.c})" if block.s else ""
            rows.append((name, "SE-Block" + split, f"{width} x {frames}", count(block.se)))
    rows.append(("Last-Conv", "Conv1D(1, 1, 1)", f"{cfg.last_conv_out} x {frames}",
                 count(model.last_conv)))
    rows.append(("Pooling", "ASP", f"{2 * cfg.pooling_channels} x 1", count(model.pooling)))
    rows.append(("Classifier", "FC", f"{cfg.n_classes}", count(model.classifier)))
    return rows
