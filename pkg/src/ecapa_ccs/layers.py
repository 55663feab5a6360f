"""Layers used by the ECAPA-TDNN stack.

All layers take batched ``B x C x T`` inputs (a bare ``C x T`` map is treated
as a batch of one) and keep the time length unchanged.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as tt
from .errors import ConfigError, ShapeError
from .tensor import Tensor


class Module:
    """Minimal parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad``; buffers are
    plain numpy arrays registered in ``_buffers``. Child modules may sit in
    attributes or in lists. Names are dotted paths, in attribute order.
    """

    training = True

    def __init__(self):
        self._buffers: list[str] = []

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield f"{name}.{i}", item
            else:
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ShapeError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in self.named_parameters():
            _assign(p.data, state[name], name)
        for name, buf in self.named_buffers():
            _assign(buf, state[name], name)

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


def _assign(dst: np.ndarray, src: np.ndarray, name: str) -> None:
    src = np.asarray(src)
    if dst.shape != src.shape:
        raise ShapeError(f"{name}: expected shape {dst.shape}, got {src.shape}")
    dst[...] = src


def _uniform(rng: np.random.Generator, bound: float, shape) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _batched(x: Tensor) -> Tensor:
    if x.ndim == 2:
        return tt.reshape(x, (1,) + x.shape)
    if x.ndim != 3:
        raise ShapeError(f"expected C x T or B x C x T, got {x.shape}")
    return x


class Conv1d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 dilation: int = 1, *, rng: np.random.Generator):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {kernel_size}")
        bound = math.sqrt(1.0 / (in_channels * kernel_size))
        self.weight = _uniform(rng, bound, (out_channels, in_channels, kernel_size))
        self.bias = _uniform(rng, bound, (out_channels,))
        self.dilation = dilation

    def forward(self, x: Tensor) -> Tensor:
        return tt.conv1d(x, self.weight, self.bias, self.dilation)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, *, rng: np.random.Generator):
        super().__init__()
        bound = math.sqrt(1.0 / in_features)
        self.weight = _uniform(rng, bound, (out_features, in_features))
        self.bias = _uniform(rng, bound, (out_features,))

    def forward(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 1
        if squeeze:
            x = tt.reshape(x, (1, x.shape[0]))
        if x.shape[-1] != self.weight.shape[1]:
            raise ShapeError(f"linear expects {self.weight.shape[1]} features, got {x.shape}")
        y = tt.add(tt.matmul(x, tt.transpose(self.weight)), self.bias)
        return tt.reshape(y, (y.shape[1],)) if squeeze else y


class BatchNorm1d(Module):
    """Batch normalisation over batch and time jointly.

    Running variance is updated with the population variance of the batch.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self._buffers = ["running_mean", "running_var"]
        self.eps = eps
        self.momentum = momentum

    def forward(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 2
        x = _batched(x)
        c = x.shape[1]
        if self.training:
            if x.shape[0] * x.shape[2] < 2:
                raise ShapeError("batch norm in train mode needs at least 2 values per channel")
            mu = tt.mean(x, (0, 2), keepdims=True)
            centered = tt.sub(x, mu)
            variance = tt.mean(tt.mul(centered, centered), (0, 2), keepdims=True)
            m = self.momentum
            self.running_mean[...] = (1 - m) * self.running_mean + m * mu.data.reshape(c)
            self.running_var[...] = (1 - m) * self.running_var + m * variance.data.reshape(c)
            normed = tt.div(centered, tt.sqrt(tt.add(variance, self.eps)))
        else:
            mu = self.running_mean.reshape(1, c, 1)
            std = np.sqrt(self.running_var + self.eps).reshape(1, c, 1)
            normed = tt.div(tt.sub(x, mu), std)
        y = tt.add(tt.mul(normed, tt.reshape(self.gamma, (1, c, 1))),
                   tt.reshape(self.beta, (1, c, 1)))
        return tt.reshape(y, y.shape[1:]) if squeeze else y


class ConvBnRelu(Module):
    """Conv1D followed by batch norm and ReLU."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 1,
                 dilation: int = 1, *, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv1d(in_channels, out_channels, kernel_size, dilation, rng=rng)
        self.bn = BatchNorm1d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return tt.relu(self.bn(self.conv(x)))


class Res2DilatedConv(Module):
    """Res2Net-style hierarchical grouped convolution.

    The input is cut into ``scale`` channel groups x1..xs. Group 1 passes
    through; group i > 1 becomes ``conv_i(x_i + y_{i-1})`` (y_1 = x_1). BN and
    ReLU are applied by the caller.
    """

    def __init__(self, channels: int, scale: int = 8, kernel_size: int = 3,
                 dilation: int = 2, *, rng: np.random.Generator):
        super().__init__()
        if scale < 1 or channels % scale:
            raise ConfigError(f"{channels} channels not divisible by res2 scale {scale}")
        self.width = channels // scale
        self.scale = scale
        self.convs = [Conv1d(self.width, self.width, kernel_size, dilation, rng=rng)
                      for _ in range(scale - 1)]

    def forward(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 2
        x = _batched(x)
        groups = tt.split(x, 1, [self.width] * self.scale)
        outs = [groups[0]]
        for conv, xi in zip(self.convs, groups[1:]):
            outs.append(conv(tt.add(xi, outs[-1])))
        y = tt.concat(outs, axis=1)
        return tt.reshape(y, y.shape[1:]) if squeeze else y


class SEBlock(Module):
    """Squeeze-and-excitation gate: s = sigmoid(W2 relu(W1 mean_t(x)))."""

    def __init__(self, channels: int, bottleneck: int = 128, *, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(channels, bottleneck, rng=rng)
        self.fc2 = Linear(bottleneck, channels, rng=rng)

    def scale(self, x: Tensor) -> Tensor:
        squeezed = tt.mean(x, -1)
        return tt.sigmoid(self.fc2(tt.relu(self.fc1(squeezed))))

    def forward(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 2
        x = _batched(x)
        s = self.scale(x)
        y = tt.mul(x, tt.reshape(s, s.shape + (1,)))
        return tt.reshape(y, y.shape[1:]) if squeeze else y


class AttentiveStatsPooling(Module):
    """Attention-weighted mean and standard deviation over time.

    ``context=True`` feeds the attention network with the frame features
    concatenated with their global mean and std (3C inputs) instead of the
    frame features alone.
    """

    def __init__(self, channels: int, bottleneck: int = 128, eps: float = 1e-8,
                 context: bool = False, *, rng: np.random.Generator):
        super().__init__()
        in_att = 3 * channels if context else channels
        self.attention = Conv1d(in_att, bottleneck, 1, rng=rng)
        self.score = Conv1d(bottleneck, channels, 1, rng=rng)
        self.eps = eps
        self.context = context

    def weights(self, x: Tensor) -> Tensor:
        h = x
        if self.context:
            t = x.shape[-1]
            mu = tt.mean(x, -1, keepdims=True)
            sd = tt.sqrt(tt.clamp_min(tt.var(x, -1, keepdims=True), self.eps))
            ones = np.ones((1, 1, t))
            h = tt.concat([x, tt.mul(mu, ones), tt.mul(sd, ones)], axis=1)
        return tt.softmax(self.score(tt.tanh(self.attention(h))), axis=-1)

    def forward(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 2
        x = _batched(x)
        alpha = self.weights(x)
        mu = tt.sum(tt.mul(alpha, x), -1)
        second = tt.sum(tt.mul(alpha, tt.mul(x, x)), -1)
        sigma = tt.sqrt(tt.clamp_min(tt.sub(second, tt.mul(mu, mu)), self.eps))
        out = tt.concat([mu, sigma], axis=1)
        return tt.reshape(out, (out.shape[1],)) if squeeze else out


# functional aliases mirroring the layer operations


def conv_bn_relu(x: Tensor, layer: ConvBnRelu) -> Tensor:
    return layer(x)


def batchnorm_forward(x: Tensor, layer: BatchNorm1d) -> Tensor:
    return layer(x)


def res2_forward(x: Tensor, layer: Res2DilatedConv) -> Tensor:
    return layer(x)


def se_forward(x: Tensor, block: SEBlock) -> Tensor:
    return block(x)


def asp_forward(x: Tensor, layer: AttentiveStatsPooling) -> Tensor:
    return layer(x)


def linear_forward(x: Tensor, layer: Linear) -> Tensor:
    return layer(x)
