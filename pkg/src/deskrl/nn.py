"""Small dense networks with hand-written reverse mode, Adam, and the
tanh-squashed Gaussian policy head used by SAC.

Only the fixed MLP topologies the learner needs are supported. Parameters are
kept as one ``(in, out)`` weight matrix and one ``(out,)`` bias per layer.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)
LOG2 = math.log(2.0)

ACTIVATIONS = {"linear": 0, "tanh": 1, "relu": 2}
_ACT_NAMES = {v: k for k, v in ACTIVATIONS.items()}
_DTYPE_CODES = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}

NET_MAGIC = b"DKNN"
NET_FORMAT_VERSION = 1
_NET_HEAD = struct.Struct("<4sHHB3x")
_LAYER_HEAD = struct.Struct("<IIB3x")


class ShapeError(ValueError):
    pass


class BackwardStateError(RuntimeError):
    """Raised when backward is requested with no retained forward pass."""


class OptimizerError(FloatingPointError):
    pass


class SerializationError(ValueError):
    pass


@dataclass
class ForwardCache:
    """Activations retained by one forward pass (inputs and post-activations)."""

    inputs: list[np.ndarray]
    outputs: list[np.ndarray]


class DenseNet:
    """A multilayer perceptron with per-layer activation tags."""

    def __init__(
        self,
        sizes: Sequence[int],
        activations: Sequence[str] | None = None,
        *,
        seed: int | None = 0,
        dtype=np.float32,
    ) -> None:
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ShapeError(f"invalid layer sizes {sizes}")
        if activations is None:
            activations = ["tanh"] * (len(sizes) - 2) + ["linear"]
        if len(activations) != len(sizes) - 1:
            raise ShapeError("need one activation tag per layer")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.sizes = sizes
        self.activations = list(activations)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(self.dtype))
            self.biases.append(rng.uniform(-bound, bound, fan_out).astype(self.dtype))
        self._cache: ForwardCache | None = None

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    @property
    def params(self) -> list[np.ndarray]:
        """Parameter tensors in layer order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def param_names(self) -> list[str]:
        names = []
        for i in range(len(self.weights)):
            names.extend((f"layer{i}.weight", f"layer{i}.bias"))
        return names

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "DenseNet":
        clone = DenseNet.__new__(DenseNet)
        clone.sizes = list(self.sizes)
        clone.activations = list(self.activations)
        clone.dtype = self.dtype
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        clone._cache = None
        return clone

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"expected batch of width {self.in_dim}, got shape {x.shape}")
        if x.shape[0] < 1:
            raise ShapeError("empty batch")
        inputs, outputs = [], []
        h = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            inputs.append(h)
            z = h @ w
            z += b
            if act == "tanh":
                np.tanh(z, out=z)
            elif act == "relu":
                np.maximum(z, 0, out=z)
            outputs.append(z)
            h = z
        return h, ForwardCache(inputs, outputs)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Forward pass; activations are retained for a following ``backward``."""
        y, self._cache = self.forward_cached(x)
        return y

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cached(x)[0]

    def backward(
        self,
        adjoint: np.ndarray,
        cache: ForwardCache | None = None,
        *,
        input_grad: bool = False,
        param_grads: bool = True,
    ):
        """Reverse-mode pass for the loss whose gradient w.r.t. the output is ``adjoint``.

        Returns the list of parameter gradients (same order and shapes as
        ``params``), or ``(grads, d_input)`` when ``input_grad`` is set.
        """
        if cache is None:
            cache = self._cache
        if cache is None:
            raise BackwardStateError("backward called without a retained forward pass")
        g = np.asarray(adjoint, dtype=self.dtype)
        if g.shape != cache.outputs[-1].shape:
            raise ShapeError(f"adjoint shape {g.shape} != output shape {cache.outputs[-1].shape}")
        grads: list[np.ndarray | None] = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            act = self.activations[i]
            y = cache.outputs[i]
            if act == "tanh":
                g = g * (1.0 - y * y)
            elif act == "relu":
                g = g * (y > 0)
            if param_grads:
                grads[2 * i] = cache.inputs[i].T @ g
                grads[2 * i + 1] = g.sum(axis=0)
            if i > 0 or input_grad:
                g = g @ self.weights[i].T
        if input_grad:
            return grads, g
        return grads

    # flat serialization -------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [_NET_HEAD.pack(NET_MAGIC, NET_FORMAT_VERSION, len(self.weights),
                                _DTYPE_CODES[np.dtype(np.float32)])]
        for (fi, fo), act in zip(zip(self.sizes[:-1], self.sizes[1:]), self.activations):
            parts.append(_LAYER_HEAD.pack(fi, fo, ACTIVATIONS[act]))
        for p in self.params:
            parts.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes, dtype=np.float32) -> "DenseNet":
        if len(blob) < _NET_HEAD.size:
            raise SerializationError("truncated network blob")
        magic, version, n_layers, dcode = _NET_HEAD.unpack_from(blob, 0)
        if magic != NET_MAGIC:
            raise SerializationError(f"bad magic {magic!r}")
        if version != NET_FORMAT_VERSION:
            raise SerializationError(f"unsupported network format version {version}")
        if dcode != 4:
            raise SerializationError(f"unsupported parameter width code {dcode}")
        off = _NET_HEAD.size
        sizes, acts = [], []
        for i in range(n_layers):
            fi, fo, act = _LAYER_HEAD.unpack_from(blob, off)
            off += _LAYER_HEAD.size
            if i == 0:
                sizes.append(fi)
            elif fi != sizes[-1]:
                raise SerializationError("layer dimensions do not chain")
            sizes.append(fo)
            acts.append(_ACT_NAMES[act])
        net = cls.__new__(cls)
        net.sizes, net.activations, net.dtype = sizes, acts, np.dtype(dtype)
        net.weights, net.biases, net._cache = [], [], None
        for fi, fo in zip(sizes[:-1], sizes[1:]):
            n = fi * fo
            w = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(fi, fo)
            off += 4 * n
            b = np.frombuffer(blob, dtype="<f4", count=fo, offset=off)
            off += 4 * fo
            net.weights.append(w.astype(net.dtype))
            net.biases.append(b.astype(net.dtype))
        if off != len(blob):
            raise SerializationError(f"{len(blob) - off} trailing bytes in network blob")
        return net

    def topology(self) -> tuple[tuple[int, ...], tuple[str, ...]]:
        return tuple(self.sizes), tuple(self.activations)

    def load_params(self, other: "DenseNet") -> None:
        if other.topology() != self.topology():
            raise ShapeError(f"topology mismatch: {other.topology()} vs {self.topology()}")
        for dst, src in zip(self.params, other.params):
            dst[...] = src

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])


def polyak_update(target: DenseNet, online: DenseNet, tau: float) -> None:
    """target <- tau * online + (1 - tau) * target, in place."""
    if tau == 1.0:
        target.load_params(online)
        return
    for t, o in zip(target.params, online.params):
        t *= 1.0 - tau
        t += tau * o


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


class Adam:
    """Bias-corrected Adam over a fixed list of parameter tensors."""

    def __init__(self, params: Sequence[np.ndarray], names: Sequence[str] | None = None,
                 lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8) -> None:
        self.params = list(params)
        self.names = list(names) if names is not None else [f"param{i}" for i in range(len(self.params))]
        self.state = AdamState(lr, beta1, beta2, eps, 0,
                               [np.zeros_like(p) for p in self.params],
                               [np.zeros_like(p) for p in self.params])

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ShapeError(f"expected {len(self.params)} gradients, got {len(grads)}")
        for name, p, g in zip(self.names, self.params, grads):
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
            if not np.all(np.isfinite(g)):
                raise OptimizerError(f"non-finite gradient in {name}")
        st = self.state
        st.step += 1
        b1, b2 = st.beta1, st.beta2
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for p, g, m, v in zip(self.params, grads, st.m, st.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)


# squashed Gaussian -------------------------------------------------------

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0


@dataclass
class SquashCache:
    tanh_u: np.ndarray
    std: np.ndarray
    eps: np.ndarray
    clipped: np.ndarray
    bound: np.ndarray


def _log1m_tanh2(u: np.ndarray) -> np.ndarray:
    # log(1 - tanh(u)^2) in a form that stays finite for large |u|
    return 2.0 * (LOG2 - u - np.logaddexp(0.0, -2.0 * u))


def squash_sample(mean: np.ndarray, raw_log_std: np.ndarray, bound: np.ndarray,
                  eps: np.ndarray, log_std_range=(LOG_STD_MIN, LOG_STD_MAX)):
    """Reparameterized tanh-Gaussian sample ``a = bound * tanh(mean + std * eps)``.

    Returns ``(action, log_prob, cache)``; ``log_prob`` is the density of the
    bounded action, squashing and scaling corrections included.
    """
    lo, hi = log_std_range
    log_std = np.clip(raw_log_std, lo, hi)
    std = np.exp(log_std)
    u = mean + std * eps
    t = np.tanh(u)
    logp = (-0.5 * eps * eps - log_std - 0.5 * LOG_2PI - np.log(bound) - _log1m_tanh2(u)).sum(axis=-1)
    cache = SquashCache(t, std, eps, (raw_log_std < lo) | (raw_log_std > hi), bound)
    return bound * t, logp, cache


def squash_backward(cache: SquashCache, d_action: np.ndarray | None, d_logp: np.ndarray | None):
    """Gradients w.r.t. (mean, raw log-std) given adjoints of action and log-prob."""
    t, std, eps = cache.tanh_u, cache.std, cache.eps
    d_u = np.zeros_like(t)
    d_ls = np.zeros_like(t)
    if d_action is not None:
        d_u += d_action * cache.bound * (1.0 - t * t)
    if d_logp is not None:
        dl = d_logp[:, None]
        d_u += dl * 2.0 * t
        d_ls -= dl
    d_mean = d_u
    d_ls = d_ls + d_u * std * eps
    d_ls[cache.clipped] = 0.0
    return d_mean, d_ls


@dataclass
class GaussianPolicyHead:
    """Splits a policy net output into (mean, log-std) and draws bounded actions."""

    net: DenseNet
    bound: np.ndarray
    log_std_range: tuple[float, float] = (LOG_STD_MIN, LOG_STD_MAX)

    def __post_init__(self) -> None:
        self.bound = np.asarray(self.bound, dtype=self.net.dtype)
        if self.net.out_dim != 2 * self.act_dim:
            raise ShapeError("policy net must output mean and log-std per action dim")

    @property
    def act_dim(self) -> int:
        return self.bound.shape[0]

    def distribution(self, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = self.net(np.atleast_2d(obs))
        lo, hi = self.log_std_range
        return out[:, :self.act_dim], np.clip(out[:, self.act_dim:], lo, hi)

    def sample(self, obs: np.ndarray, deterministic: bool = False,
               rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Actions and log-probs for a batch of observations.

        Deterministic mode returns the squashed mean and its log-prob.
        """
        out = self.net(np.atleast_2d(obs))
        mean, raw_ls = out[:, :self.act_dim], out[:, self.act_dim:]
        if deterministic:
            eps = np.zeros_like(mean)
        else:
            if rng is None:
                raise ValueError("stochastic sampling needs an rng")
            eps = rng.standard_normal(mean.shape).astype(mean.dtype)
        action, logp, _ = squash_sample(mean, raw_ls, self.bound, eps, self.log_std_range)
        return action, logp


def sample_action(head: GaussianPolicyHead, obs, mode: str = "stochastic",
                  rng: np.random.Generator | None = None):
    """Single-observation convenience wrapper around ``GaussianPolicyHead.sample``."""
    if mode not in ("stochastic", "deterministic"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    a, logp = head.sample(np.asarray(obs)[None, :], mode == "deterministic", rng)
    return a[0], float(logp[0])
