"""Dense feedforward networks with hand-derived backprop, Adam and seeded RNG.

Matrices are plain ``float64`` numpy arrays with one sample per row. Every
network here (encoders, regression heads, DV critics, kernel feature maps) is a
:class:`FeedforwardNet`.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError, UsageError

ACTIVATIONS = ("identity", "relu", "tanh")


class SeededRng:
    """Splittable seeded random source.

    Children are addressed by label, so ``rng.split("a")`` yields the same
    stream no matter how many other children were split off before it.
    """

    def __init__(self, seed: int, path: Sequence[int] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        self.generator = np.random.default_rng(
            np.random.SeedSequence(self.seed, spawn_key=self.path)
        )

    def split(self, label: str | int) -> "SeededRng":
        key = zlib.crc32(str(label).encode("utf-8"))
        return SeededRng(self.seed, self.path + (key,))

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def normal(self, size=None, loc=0.0, scale=1.0) -> np.ndarray:
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self.generator.integers(low, high, size)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, path={self.path})"


def as_rng(rng: SeededRng | int | None) -> SeededRng:
    if isinstance(rng, SeededRng):
        return rng
    return SeededRng(0 if rng is None else int(rng))


def _activate(pre: np.ndarray, kind: str) -> np.ndarray:
    if kind == "identity":
        return pre
    if kind == "relu":
        return np.maximum(pre, 0.0)
    return np.tanh(pre)


def _activation_grad(pre: np.ndarray, out: np.ndarray, kind: str, grad: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return grad
    if kind == "relu":
        return grad * (pre > 0.0)
    return grad * (1.0 - out * out)


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.array(self.weight, dtype=np.float64, ndmin=2)
        self.bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; choose from {ACTIVATIONS}")
        if self.bias.shape[0] != self.weight.shape[0]:
            raise ShapeError(
                f"bias length {self.bias.shape[0]} does not match weight rows {self.weight.shape[0]}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape


@dataclass
class ForwardCache:
    net_id: int
    version: int
    inputs: list  # input to each layer
    preacts: list
    outputs: list


class FeedforwardNet:
    """Stack of dense layers ``y = act(x W^T + b)``.

    Parameters are exposed as a flat list ``[W_0, b_0, W_1, b_1, ...]`` by
    :meth:`params`; gradients from :meth:`backward` come back in the same order.
    """

    def __init__(self, layers: Sequence[Layer]):
        if not layers:
            raise ValueError("a network needs at least one layer")
        layers = list(layers)
        for k in range(1, len(layers)):
            if layers[k].shape[1] != layers[k - 1].shape[0]:
                raise ShapeError(
                    f"layer {k} expects width {layers[k].shape[1]} but layer {k - 1} "
                    f"produces {layers[k - 1].shape[0]}"
                )
        self.layers = layers
        self._version = 0

    @classmethod
    def build(
        cls,
        widths: Sequence[int],
        rng: SeededRng,
        activation: str = "relu",
        out_activation: str = "identity",
    ) -> "FeedforwardNet":
        """Glorot-uniform weights, zero biases.

        ``widths`` lists every layer width including input and output, so
        ``build([3, 64, 64, 1], rng)`` is the default two-hidden-layer critic.
        """
        if len(widths) < 2:
            raise ValueError("widths must include input and output width")
        layers = []
        for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out)) if fan_in + fan_out > 0 else 0.0
            weight = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            act = out_activation if k == len(widths) - 2 else activation
            layers.append(Layer(weight, np.zeros(fan_out), act))
        return cls(layers)

    @classmethod
    def mlp(
        cls,
        d_in: int,
        d_out: int,
        rng: SeededRng,
        hidden: Sequence[int] = (64, 64),
        activation: str = "relu",
        out_activation: str = "identity",
    ) -> "FeedforwardNet":
        return cls.build([d_in, *hidden, d_out], rng, activation, out_activation)

    @classmethod
    def identity(cls, width: int) -> "FeedforwardNet":
        return cls([Layer(np.eye(width), np.zeros(width), "identity")])

    @property
    def d_in(self) -> int:
        return self.layers[0].shape[1]

    @property
    def d_out(self) -> int:
        return self.layers[-1].shape[0]

    @property
    def n_params(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    @property
    def version(self) -> int:
        return self._version

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        if len(params) != 2 * len(self.layers):
            raise ShapeError(f"expected {2 * len(self.layers)} parameter arrays, got {len(params)}")
        for k, layer in enumerate(self.layers):
            w = np.asarray(params[2 * k], dtype=np.float64)
            b = np.asarray(params[2 * k + 1], dtype=np.float64)
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise ShapeError(f"parameter shapes for layer {k} do not match")
            layer.weight = w.copy()
            layer.bias = b.copy()
        self._version += 1

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ShapeError(f"flat parameter vector must have length {self.n_params}")
        out, i = [], 0
        for p in self.params():
            out.append(flat[i : i + p.size].reshape(p.shape))
            i += p.size
        self.set_params(out)

    def copy(self) -> "FeedforwardNet":
        return FeedforwardNet(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def describe(self) -> list[dict]:
        return [{"shape": list(l.shape), "activation": l.activation} for l in self.layers]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ShapeError(f"input must have shape (n, {self.d_in}), got {x.shape}")
        inputs, preacts, outputs = [], [], []
        h = x
        for layer in self.layers:
            inputs.append(h)
            pre = h @ layer.weight.T + layer.bias
            h = _activate(pre, layer.activation)
            preacts.append(pre)
            outputs.append(h)
        return h, ForwardCache(id(self), self._version, inputs, preacts, outputs)

    def backward(
        self, cache: ForwardCache, grad_output: np.ndarray
    ) -> tuple[list[np.ndarray], np.ndarray]:
        """Backpropagate ``grad_output`` (dL/dy, one row per sample).

        Returns parameter gradients summed over rows, in :meth:`params` order,
        and dL/dx.
        """
        if cache.net_id != id(self) or cache.version != self._version:
            raise UsageError("forward cache is stale or belongs to a different network")
        g = np.asarray(grad_output, dtype=np.float64)
        n = cache.inputs[0].shape[0]
        if g.shape != (n, self.d_out):
            raise ShapeError(f"grad_output must have shape ({n}, {self.d_out}), got {g.shape}")
        grads: list[np.ndarray] = [None] * (2 * len(self.layers))
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            g = _activation_grad(cache.preacts[k], cache.outputs[k], layer.activation, g)
            grads[2 * k] = g.T @ cache.inputs[k]
            grads[2 * k + 1] = g.sum(axis=0)
            g = g @ layer.weight
        return grads, g


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls(
            m=[np.zeros_like(p, dtype=np.float64) for p in params],
            v=[np.zeros_like(p, dtype=np.float64) for p in params],
            **hyper,
        )


def adam_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState
) -> list[np.ndarray]:
    """One bias-corrected Adam descent step.

    ``state`` is advanced in place; fresh parameter arrays are returned.
    """
    if not state.m:
        state.m = [np.zeros_like(p, dtype=np.float64) for p in params]
        state.v = [np.zeros_like(p, dtype=np.float64) for p in params]
    if not (len(params) == len(grads) == len(state.m)):
        raise UsageError("params, grads and Adam accumulators differ in length")
    for p, g, m in zip(params, grads, state.m):
        if np.shape(p) != np.shape(g) or np.shape(p) != m.shape:
            raise UsageError(f"shape mismatch in adam_step: {np.shape(p)} vs {np.shape(g)}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        out.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


def finite_diff_grad(
    scalar_fn: Callable[[list[np.ndarray]], float],
    params: Sequence[np.ndarray] | np.ndarray,
    eps: float = 1e-5,
) -> list[np.ndarray] | np.ndarray:
    """Central-difference gradient of ``scalar_fn`` at ``params``.

    ``params`` may be a single array or a list of arrays; ``scalar_fn`` gets the
    same structure back, with one coordinate perturbed.
    """
    single = isinstance(params, np.ndarray)
    work = [np.array(p, dtype=np.float64, copy=True) for p in ([params] if single else params)]
    call = (lambda ps: scalar_fn(ps[0])) if single else scalar_fn
    grads = []
    for p in work:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(call(work))
            flat[i] = orig - eps
            f_minus = float(call(work))
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * eps)
        grads.append(g)
    return grads[0] if single else grads


def max_relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Largest per-coordinate ``|a - f| / max(|a|, |f|, floor)``.

    The floor keeps coordinates whose true gradient is ~0 from dividing
    round-off by round-off.
    """
    if isinstance(analytic, np.ndarray):
        analytic, numeric = [analytic], [numeric]
    worst = 0.0
    for a, f in zip(analytic, numeric):
        a = np.asarray(a, dtype=np.float64)
        f = np.asarray(f, dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - f) / denom)))
    return worst
