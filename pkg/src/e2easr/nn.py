"""Parameter containers and the standard layers used by the encoders and heads."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Minimal parameter container.

    Parameters are ``Tensor`` leaves with ``requires_grad=True`` stored as
    attributes; submodules are discovered the same way (also inside lists).
    Modules whose ``vn_scope`` is true mark their parameters as eligible for
    variational noise.
    """

    vn_scope = False

    def __init__(self):
        self.training = True

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, (Module, Tensor)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Module, Tensor)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def vn_parameter_names(self, prefix: str = "", inherited: bool = False) -> list:
        scoped = inherited or self.vn_scope
        names = []
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if scoped and value.requires_grad:
                    names.append(full)
            else:
                names.extend(value.vn_parameter_names(full + ".", scoped))
        return names

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray) and name.startswith("running_"):
                yield f"{prefix}{name}", value
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        out = {f"param/{k}": v.data.copy() for k, v in self.named_parameters()}
        out.update({f"buffer/{k}": v.copy() for k, v in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = {f"param/{k}" for k in params} | {f"buffer/{k}" for k in buffers}
        missing = expected - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[f"param/{k}"], dtype=T.DTYPE)
            if arr.shape != p.shape:
                raise T.ShapeError(f"parameter {k}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()
        for k, b in buffers.items():
            b[...] = state[f"buffer/{k}"]


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = T.parameter(glorot(rng, d_in, d_out))
        self.bias = T.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Embedding(Module):
    vn_scope = True

    def __init__(self, num: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.weight = T.parameter(rng.normal(0.0, 1.0 / math.sqrt(dim), size=(num, dim)))

    def __call__(self, ids) -> Tensor:
        return T.embedding(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gamma = T.parameter(np.ones(dim))
        self.beta = T.parameter(np.zeros(dim))

    def __call__(self, x) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class BatchNorm(Module):
    """Batch normalization over the channel (last) axis; momentum 0.99."""

    def __init__(self, dim: int, momentum: float = 0.99):
        super().__init__()
        self.gamma = T.parameter(np.ones(dim))
        self.beta = T.parameter(np.zeros(dim))
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum = momentum

    def __call__(self, x, mask: Optional[np.ndarray] = None) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            train=self.training, momentum=self.momentum, mask=mask)


class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator):
        super().__init__()
        self.p = p
        self.rng = rng

    def __call__(self, x) -> Tensor:
        return T.dropout(x, self.p, self.training, self.rng)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int, padding: int,
                 rng: np.random.Generator):
        super().__init__()
        fan_in = cin * kernel * kernel
        self.weight = T.parameter(glorot(rng, fan_in, cout * kernel * kernel,
                                         shape=(cout, cin, kernel, kernel)))
        self.bias = T.parameter(np.zeros(cout))
        self.stride = stride
        self.padding = padding

    def __call__(self, x) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class DepthwiseConv1d(Module):
    def __init__(self, channels: int, kernel: int, rng: np.random.Generator):
        super().__init__()
        self.weight = T.parameter(rng.uniform(-1, 1, size=(kernel, channels)) / math.sqrt(kernel))
        self.bias = T.parameter(np.zeros(channels))

    def __call__(self, x) -> Tensor:
        return T.depthwise_conv1d(x, self.weight, self.bias)


class LSTM(Module):
    """Single-layer unidirectional LSTM with gate order (input, forget, cell, output).

    ``run`` processes a whole padded batch; ``step`` advances one frame and is
    what the decoders and beam search use.
    """

    vn_scope = True

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.hidden = hidden
        k = 1.0 / math.sqrt(hidden)
        self.w_x = T.parameter(rng.uniform(-k, k, size=(d_in, 4 * hidden)))
        self.w_h = T.parameter(rng.uniform(-k, k, size=(hidden, 4 * hidden)))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        self.bias = T.parameter(b)

    def initial_state(self, batch: int) -> tuple:
        z = T.Tensor(np.zeros((batch, self.hidden)))
        return z, z

    def cell(self, gx, state) -> tuple:
        """One step given precomputed input projection ``gx`` = x @ w_x + bias."""
        h, c = state
        z = gx + T.matmul(h, self.w_h)
        n = self.hidden
        i = T.sigmoid(z[:, :n])
        f = T.sigmoid(z[:, n:2 * n])
        g = T.tanh(z[:, 2 * n:3 * n])
        o = T.sigmoid(z[:, 3 * n:])
        c = f * c + i * g
        h = o * T.tanh(c)
        return h, c

    def step(self, x, state) -> tuple:
        return self.cell(T.linear(x, self.w_x, self.bias), state)

    def run(self, x, state=None) -> tuple:
        """x: (B, T, d_in) -> outputs (B, T, hidden), final state."""
        b, t = x.shape[0], x.shape[1]
        state = state or self.initial_state(b)
        gx = T.linear(x, self.w_x, self.bias)
        outs = []
        for i in range(t):
            state = self.cell(gx[:, i, :], state)
            outs.append(state[0])
        return T.stack(outs, axis=1), state


def length_mask(lengths, max_len: int) -> np.ndarray:
    """(B, max_len) boolean mask, true on valid frames."""
    lengths = np.asarray(lengths)
    return np.arange(max_len)[None, :] < lengths[:, None]
