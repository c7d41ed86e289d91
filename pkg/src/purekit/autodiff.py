"""Static compute graphs over dense float32 tensors with reverse-mode autodiff.

The engine is intentionally small: a graph is a topologically ordered list of
operation records plus a named parameter store, built once via
:class:`GraphBuilder` and immutable afterwards.  A forward pass over a batch
``(N, C, H, W)`` caches per-node values; the backward pass walks the records
in reverse and produces gradients with respect to the input and every
parameter.  Reductions (global sum/mean, normalization statistics) accumulate
in float64 before casting back so small-scale sums are reproducible.

Supported operations: 2-D convolution (stride 1/2), transposed convolution,
fully connected, leaky-ReLU and SiLU, elementwise add/mul, per-channel bias
injection from an auxiliary vector, 2x nearest-neighbor upsampling, group
normalization, and global sum/mean.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DataError

DTYPE = np.float32

CHECKPOINT_MAGIC = b"PGCK"
CHECKPOINT_VERSION = 1


def _reduce_sum(x, axes):
    """Sum with a 64-bit accumulator, cast back to the input dtype."""
    return x.sum(axis=axes, dtype=np.float64).astype(x.dtype, copy=False)


def _sigmoid(x):
    # Clip keeps exp inside float32 range; saturation beyond +-60 is exact
    # anyway at this precision.
    z = np.exp(np.clip(x, -60.0, 60.0))
    return z / (1.0 + z)


@dataclass(frozen=True)
class Node:
    """One operation record: kind, input node ids, parameter names, attributes."""

    op: str
    inputs: tuple = ()
    params: tuple = ()
    attrs: dict = field(default_factory=dict)
    shape: tuple = ()  # per-sample output shape; () means scalar per sample


class Graph:
    """Immutable operation list + parameter store.

    ``nodes[0]`` is always the input placeholder.  Forward/backward over
    distinct inputs may run concurrently; only parameter mutation (an
    optimizer step) needs exclusive access.
    """

    def __init__(self, nodes, params, input_shape, aux_specs=None, arch=""):
        self.nodes = tuple(nodes)
        self.params = params
        self.input_shape = tuple(input_shape)
        self.aux_specs = dict(aux_specs or {})
        self.arch = arch

    @property
    def output_shape(self):
        return self.nodes[-1].shape

    @property
    def scalar_output(self):
        return self.nodes[-1].shape == ()

    # ---------------------------------------------------------------- forward

    def _batchify(self, x):
        x = np.asarray(x)
        if x.dtype not in (np.float32, np.float64):
            x = x.astype(DTYPE)
        if x.shape == self.input_shape:
            return x[None], True
        if x.ndim == len(self.input_shape) + 1 and x.shape[1:] == self.input_shape:
            return x, False
        raise ConfigError(
            f"input shape {x.shape} does not match graph input {self.input_shape}"
        )

    def _aux_value(self, aux, name, n, dtype):
        if aux is None or name not in aux:
            raise ConfigError(f"graph expects auxiliary input {name!r}")
        v = np.asarray(aux[name], dtype=dtype)
        dim = self.aux_specs[name]
        if v.shape == (dim,):
            return v[None]
        if v.shape == (n, dim):
            return v
        raise ConfigError(f"aux {name!r} has shape {v.shape}, want ({dim},) or ({n},{dim})")

    def run(self, xs, aux=None, params=None):
        """Batched forward pass; returns (output, cache-of-intermediates)."""
        xs, _ = self._batchify(xs)
        p = self.params if params is None else params
        n = xs.shape[0]
        values = [None] * len(self.nodes)
        caches = [None] * len(self.nodes)
        for i, node in enumerate(self.nodes):
            if node.op == "input":
                values[i] = xs
                continue
            ins = [values[j] for j in node.inputs]
            values[i], caches[i] = _FORWARD[node.op](node, ins, p, self, aux, n)
        return values[-1], _RunCache(values, caches, xs.dtype)

    def forward(self, x, aux=None):
        """Forward pass, returning a python float for single-image scalar graphs."""
        y, _ = self.run(x, aux=aux)
        assert_finite(y, "graph forward")
        single = np.asarray(x).shape == self.input_shape
        if single:
            y = y[0]
        if self.scalar_output and np.ndim(y) == 0:
            return float(y)
        return y

    # --------------------------------------------------------------- backward

    def backward(self, cache, dy, wrt_input=True, wrt_params=True):
        """Vector-Jacobian product through a cached forward pass."""
        grads = [None] * len(self.nodes)
        grads[-1] = np.asarray(dy, dtype=cache.values[-1].dtype)
        if grads[-1].shape != cache.values[-1].shape:
            raise ContractError(
                f"output cotangent shape {grads[-1].shape} != {cache.values[-1].shape}"
            )
        dparams = {} if wrt_params else None
        for i in range(len(self.nodes) - 1, 0, -1):
            g = grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            ins = [cache.values[j] for j in node.inputs]
            dins, dps = _BACKWARD[node.op](node, g, ins, caches=cache.caches[i],
                                           params=self.params,
                                           wants_params=wrt_params)
            for j, d in zip(node.inputs, dins):
                if d is None:
                    continue
                if grads[j] is None:
                    grads[j] = d
                else:
                    grads[j] = grads[j] + d
            if wrt_params:
                for name, d in dps.items():
                    if name in dparams:
                        dparams[name] = dparams[name] + d
                    else:
                        dparams[name] = d
            grads[i] = None  # free as we go
        dx = grads[0] if wrt_input else None
        if wrt_params:
            for name, value in self.params.items():
                if name not in dparams:
                    dparams[name] = np.zeros_like(value)
        return dx, dparams

    def _scalar_seed(self, x, aux):
        if not self.scalar_output:
            raise ContractError("gradient requires a scalar-output graph")
        xs, single = self._batchify(x)
        y, cache = self.run(xs, aux=aux)
        seed = np.ones_like(y)
        return xs, single, cache, seed

    def grad_input(self, x, aux=None):
        """d(output)/d(input) for scalar-output graphs; same shape as the input."""
        xs, single, cache, seed = self._scalar_seed(x, aux)
        dx, _ = self.backward(cache, seed, wrt_input=True, wrt_params=False)
        return dx[0] if single else dx

    def grad_params(self, x, aux=None):
        """Per-parameter gradients (summed over the batch) for scalar-output graphs."""
        _, _, cache, seed = self._scalar_seed(x, aux)
        _, dparams = self.backward(cache, seed, wrt_input=False, wrt_params=True)
        return dparams

    def value_and_grads(self, xs, aux=None, wrt_input=True, wrt_params=True):
        """(per-sample values, d/dinput, d/dparams) with cotangent of ones."""
        if not self.scalar_output:
            raise ContractError("value_and_grads requires a scalar-output graph")
        y, cache = self.run(xs, aux=aux)
        dx, dparams = self.backward(cache, np.ones_like(y),
                                    wrt_input=wrt_input, wrt_params=wrt_params)
        return y, dx, dparams


def assert_finite(x, where):
    if not np.isfinite(x).all():
        raise ContractError(f"non-finite values produced in {where}")


@dataclass
class _RunCache:
    values: list
    caches: list
    dtype: object


# ------------------------------------------------------------------ op kernels


def _conv_out_hw(h, w, k, s, p):
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    return ho, wo


def _pad_hw(x, q):
    return np.pad(x, ((0, 0), (0, 0), (q, q), (q, q))) if q else x


def _windows(src, k, s):
    """Strided (N,C,Ho,Wo,k,k) view of all kxk windows at stride s."""
    v = np.lib.stride_tricks.sliding_window_view(src, (k, k), axis=(2, 3))
    return v[:, :, ::s, ::s]


def _scatter_windows(target, dpatch, k, s):
    """target[n,c,s*oy+i,s*ox+j] += dpatch[i,j,n,c,oy,ox]."""
    ho, wo = dpatch.shape[4], dpatch.shape[5]
    for i in range(k):
        for j in range(k):
            target[:, :, i:i + s * (ho - 1) + 1:s,
                   j:j + s * (wo - 1) + 1:s] += dpatch[i, j]


def _fwd_conv2d(node, ins, p, graph, aux, n):
    (x,) = ins
    w = p[node.params[0]].astype(x.dtype, copy=False)
    b = p[node.params[1]].astype(x.dtype, copy=False)
    s, pad, k = node.attrs["stride"], node.attrs["padding"], node.attrs["kernel"]
    xp = _pad_hw(x, pad)
    v = _windows(xp, k, s)
    y = np.einsum("nchwij,ocij->nohw", v, w, optimize=True)
    return y + b[None, :, None, None], xp


def _bwd_conv2d(node, dy, ins, caches, params, wants_params):
    (x,) = ins
    xp = caches
    w = params[node.params[0]].astype(dy.dtype, copy=False)
    s, pad, k = node.attrs["stride"], node.attrs["padding"], node.attrs["kernel"]
    dpatch = np.einsum("nohw,ocij->ijnchw", dy, w, optimize=True)
    dxp = np.zeros(xp.shape, dtype=dy.dtype)
    _scatter_windows(dxp, dpatch, k, s)
    dx = dxp[:, :, pad:pad + x.shape[2], pad:pad + x.shape[3]] if pad else dxp
    dps = {}
    if wants_params:
        v = _windows(xp, k, s)
        dps[node.params[0]] = np.einsum("nchwij,nohw->ocij", v, dy,
                                        optimize=True)
        dps[node.params[1]] = dy.sum(axis=(0, 2, 3), dtype=np.float64).astype(dy.dtype)
    return [dx], dps


def _fwd_conv2d_t(node, ins, p, graph, aux, n):
    # Adjoint of the strided correlation: scatter each input pixel's
    # weighted kernel into the (padded) output canvas.
    (x,) = ins
    w = p[node.params[0]].astype(x.dtype, copy=False)   # (Cin, Cout, k, k)
    b = p[node.params[1]].astype(x.dtype, copy=False)
    s, pad, k = node.attrs["stride"], node.attrs["padding"], node.attrs["kernel"]
    cout, ho, wo = node.shape
    t = np.einsum("nchw,coij->ijnohw", x, w, optimize=True)
    canvas = np.zeros((x.shape[0], cout, ho + 2 * pad, wo + 2 * pad),
                      dtype=x.dtype)
    _scatter_windows(canvas, t, k, s)
    y = canvas[:, :, pad:pad + ho, pad:pad + wo] if pad else canvas
    return y + b[None, :, None, None], None


def _bwd_conv2d_t(node, dy, ins, caches, params, wants_params):
    (x,) = ins
    w = params[node.params[0]].astype(dy.dtype, copy=False)
    s, pad, k = node.attrs["stride"], node.attrs["padding"], node.attrs["kernel"]
    dyp = _pad_hw(dy, pad)
    v = _windows(dyp, k, s)                             # (N,Cout,H,W,k,k)
    dx = np.einsum("nohwij,coij->nchw", v, w, optimize=True)
    dps = {}
    if wants_params:
        dps[node.params[0]] = np.einsum("nchw,nohwij->coij", x, v,
                                        optimize=True)
        dps[node.params[1]] = dy.sum(axis=(0, 2, 3), dtype=np.float64).astype(dy.dtype)
    return [dx], dps


def _fwd_linear(node, ins, p, graph, aux, n):
    (x,) = ins
    w = p[node.params[0]].astype(x.dtype, copy=False)
    b = p[node.params[1]].astype(x.dtype, copy=False)
    x2 = x.reshape(x.shape[0], -1)
    return x2 @ w.T + b, x.shape


def _bwd_linear(node, dy, ins, caches, params, wants_params):
    (x,) = ins
    w = params[node.params[0]].astype(dy.dtype, copy=False)
    x2 = x.reshape(x.shape[0], -1)
    dx = (dy @ w).reshape(caches)
    dps = {}
    if wants_params:
        dps[node.params[0]] = dy.T @ x2
        dps[node.params[1]] = dy.sum(axis=0, dtype=np.float64).astype(dy.dtype)
    return [dx], dps


def _fwd_leaky_relu(node, ins, p, graph, aux, n):
    (x,) = ins
    slope = node.attrs["slope"]
    return np.where(x > 0, x, slope * x), None


def _bwd_leaky_relu(node, dy, ins, caches, params, wants_params):
    (x,) = ins
    slope = node.attrs["slope"]
    # Subgradient 0 exactly at the kink.
    factor = np.where(x > 0, 1.0, np.where(x < 0, slope, 0.0)).astype(dy.dtype)
    return [dy * factor], {}


def _fwd_silu(node, ins, p, graph, aux, n):
    (x,) = ins
    s = _sigmoid(x)
    return x * s, s


def _bwd_silu(node, dy, ins, caches, params, wants_params):
    (x,) = ins
    s = caches
    return [dy * (s * (1.0 + x * (1.0 - s)))], {}


def _fwd_add(node, ins, p, graph, aux, n):
    a, b = ins
    return a + b, None


def _bwd_add(node, dy, ins, caches, params, wants_params):
    return [dy, dy], {}


def _fwd_mul(node, ins, p, graph, aux, n):
    a, b = ins
    return a * b, None


def _bwd_mul(node, dy, ins, caches, params, wants_params):
    a, b = ins
    return [dy * b, dy * a], {}


def _fwd_channel_bias(node, ins, p, graph, aux, n):
    (x,) = ins
    v = graph._aux_value(aux, node.attrs["aux"], n, x.dtype)
    return x + v[:, :, None, None], None


def _bwd_channel_bias(node, dy, ins, caches, params, wants_params):
    return [dy], {}


def _sample_axes(x):
    return tuple(range(1, x.ndim))


def _expand(dy, x):
    return dy.reshape((-1,) + (1,) * (x.ndim - 1))


def _fwd_global_sum(node, ins, p, graph, aux, n):
    (x,) = ins
    return _reduce_sum(x, _sample_axes(x)), None


def _bwd_global_sum(node, dy, ins, caches, params, wants_params):
    (x,) = ins
    return [np.broadcast_to(_expand(dy, x), x.shape).astype(dy.dtype)], {}


def _fwd_global_mean(node, ins, p, graph, aux, n):
    (x,) = ins
    m = x[0].size
    return _reduce_sum(x, _sample_axes(x)) / np.asarray(m, dtype=x.dtype), None


def _bwd_global_mean(node, dy, ins, caches, params, wants_params):
    (x,) = ins
    m = x[0].size
    g = _expand(dy, x) / np.asarray(m, dtype=dy.dtype)
    return [np.broadcast_to(g, x.shape).astype(dy.dtype)], {}


def _fwd_upsample2x(node, ins, p, graph, aux, n):
    (x,) = ins
    return x.repeat(2, axis=2).repeat(2, axis=3), None


def _bwd_upsample2x(node, dy, ins, caches, params, wants_params):
    (x,) = ins
    nb, c, h, w = x.shape
    dx = dy.reshape(nb, c, h, 2, w, 2).sum(axis=(3, 5), dtype=np.float64)
    return [dx.astype(dy.dtype)], {}


def _fwd_group_norm(node, ins, p, graph, aux, n):
    (x,) = ins
    g = node.attrs["groups"]
    eps = node.attrs["eps"]
    gamma = p[node.params[0]].astype(x.dtype, copy=False)
    beta = p[node.params[1]].astype(x.dtype, copy=False)
    nb, c, h, w = x.shape
    xg = x.reshape(nb, g, -1).astype(np.float64, copy=False)
    mu = xg.mean(axis=2, keepdims=True)
    var = ((xg - mu) ** 2).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).astype(x.dtype).reshape(nb, c, h, w)
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, (xhat, inv.astype(x.dtype))


def _bwd_group_norm(node, dy, ins, caches, params, wants_params):
    (x,) = ins
    xhat, inv = caches
    g = node.attrs["groups"]
    gamma = params[node.params[0]].astype(dy.dtype, copy=False)
    nb, c, h, w = x.shape
    dxhat = (dy * gamma[None, :, None, None]).reshape(nb, g, -1).astype(np.float64)
    xh = xhat.reshape(nb, g, -1).astype(np.float64)
    m1 = dxhat.mean(axis=2, keepdims=True)
    m2 = (dxhat * xh).mean(axis=2, keepdims=True)
    dx = inv.reshape(nb, g, 1).astype(np.float64) * (dxhat - m1 - xh * m2)
    dps = {}
    if wants_params:
        dps[node.params[0]] = (dy * xhat).sum(axis=(0, 2, 3),
                                              dtype=np.float64).astype(dy.dtype)
        dps[node.params[1]] = dy.sum(axis=(0, 2, 3),
                                     dtype=np.float64).astype(dy.dtype)
    return [dx.astype(dy.dtype).reshape(nb, c, h, w)], dps


_FORWARD = {
    "conv2d": _fwd_conv2d,
    "conv2d_t": _fwd_conv2d_t,
    "linear": _fwd_linear,
    "leaky_relu": _fwd_leaky_relu,
    "silu": _fwd_silu,
    "add": _fwd_add,
    "mul": _fwd_mul,
    "channel_bias": _fwd_channel_bias,
    "global_sum": _fwd_global_sum,
    "global_mean": _fwd_global_mean,
    "upsample2x": _fwd_upsample2x,
    "group_norm": _fwd_group_norm,
}

_BACKWARD = {
    "conv2d": _bwd_conv2d,
    "conv2d_t": _bwd_conv2d_t,
    "linear": _bwd_linear,
    "leaky_relu": _bwd_leaky_relu,
    "silu": _bwd_silu,
    "add": _bwd_add,
    "mul": _bwd_mul,
    "channel_bias": _bwd_channel_bias,
    "global_sum": _bwd_global_sum,
    "global_mean": _bwd_global_mean,
    "upsample2x": _bwd_upsample2x,
    "group_norm": _bwd_group_norm,
}


# -------------------------------------------------------------------- builder


class GraphBuilder:
    """Constructs a Graph; each method appends a node and returns its id."""

    def __init__(self, input_shape, seed=0):
        if len(input_shape) != 3:
            raise ConfigError("input shape must be (channels, height, width)")
        self._nodes = [Node("input", shape=tuple(int(d) for d in input_shape))]
        self._params = {}
        self._aux = {}
        self._rng = np.random.default_rng(seed)
        self._counter = 0

    @property
    def input(self):
        return 0

    def _shape(self, nid):
        return self._nodes[nid].shape

    def _push(self, node):
        self._nodes.append(node)
        return len(self._nodes) - 1

    def _name(self, base, name):
        if name is None:
            name = f"{base}{self._counter}"
            self._counter += 1
        if f"{name}.w" in self._params or f"{name}.gamma" in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        return name

    def _init(self, shape, fan_in, zero=False):
        if zero:
            return np.zeros(shape, dtype=DTYPE)
        std = np.sqrt(2.0 / fan_in)
        return (self._rng.normal(0.0, std, size=shape)).astype(DTYPE)

    def conv2d(self, src, out_channels, kernel=3, stride=1, padding=1,
               name=None, zero_init=False):
        c, h, w = self._shape(src)
        if not 0 <= padding <= kernel - 1:
            raise ConfigError("convolution padding must lie in [0, kernel-1]")
        ho, wo = _conv_out_hw(h, w, kernel, stride, padding)
        if ho < 1 or wo < 1:
            raise ConfigError("convolution output collapsed to zero size")
        name = self._name("conv", name)
        self._params[f"{name}.w"] = self._init(
            (out_channels, c, kernel, kernel), c * kernel * kernel, zero_init)
        self._params[f"{name}.b"] = np.zeros(out_channels, dtype=DTYPE)
        return self._push(Node(
            "conv2d", (src,), (f"{name}.w", f"{name}.b"),
            {"stride": stride, "padding": padding, "kernel": kernel},
            (out_channels, ho, wo)))

    def conv2d_transpose(self, src, out_channels, kernel=4, stride=2, padding=1,
                         name=None):
        c, h, w = self._shape(src)
        if not 0 <= padding <= kernel - 1:
            raise ConfigError("convolution padding must lie in [0, kernel-1]")
        ho = (h - 1) * stride + kernel - 2 * padding
        wo = (w - 1) * stride + kernel - 2 * padding
        if ho < 1 or wo < 1:
            raise ConfigError("transposed convolution output collapsed")
        name = self._name("tconv", name)
        self._params[f"{name}.w"] = self._init(
            (c, out_channels, kernel, kernel), c * kernel * kernel)
        self._params[f"{name}.b"] = np.zeros(out_channels, dtype=DTYPE)
        return self._push(Node(
            "conv2d_t", (src,), (f"{name}.w", f"{name}.b"),
            {"stride": stride, "padding": padding, "kernel": kernel},
            (out_channels, ho, wo)))

    def linear(self, src, out_features, name=None, zero_init=False):
        d = int(np.prod(self._shape(src)))
        name = self._name("fc", name)
        self._params[f"{name}.w"] = self._init((out_features, d), d, zero_init)
        self._params[f"{name}.b"] = np.zeros(out_features, dtype=DTYPE)
        return self._push(Node("linear", (src,), (f"{name}.w", f"{name}.b"),
                               {}, (out_features,)))

    def leaky_relu(self, src, slope=0.2):
        return self._push(Node("leaky_relu", (src,), (), {"slope": slope},
                               self._shape(src)))

    def silu(self, src):
        return self._push(Node("silu", (src,), (), {}, self._shape(src)))

    def add(self, a, b):
        if self._shape(a) != self._shape(b):
            raise ConfigError(f"add shape mismatch {self._shape(a)} vs {self._shape(b)}")
        return self._push(Node("add", (a, b), (), {}, self._shape(a)))

    def mul(self, a, b):
        if self._shape(a) != self._shape(b):
            raise ConfigError(f"mul shape mismatch {self._shape(a)} vs {self._shape(b)}")
        return self._push(Node("mul", (a, b), (), {}, self._shape(a)))

    def channel_bias(self, src, aux_name):
        c = self._shape(src)[0]
        existing = self._aux.get(aux_name)
        if existing is not None and existing != c:
            raise ConfigError(f"aux {aux_name!r} reused with width {c} != {existing}")
        self._aux[aux_name] = c
        return self._push(Node("channel_bias", (src,), (), {"aux": aux_name},
                               self._shape(src)))

    def global_sum(self, src):
        return self._push(Node("global_sum", (src,), (), {}, ()))

    def global_mean(self, src):
        return self._push(Node("global_mean", (src,), (), {}, ()))

    def upsample2x(self, src):
        c, h, w = self._shape(src)
        return self._push(Node("upsample2x", (src,), (), {}, (c, 2 * h, 2 * w)))

    def group_norm(self, src, groups, name=None, eps=1e-5):
        c = self._shape(src)[0]
        if c % groups:
            raise ConfigError(f"{c} channels not divisible into {groups} groups")
        name = self._name("gn", name)
        self._params[f"{name}.gamma"] = np.ones(c, dtype=DTYPE)
        self._params[f"{name}.beta"] = np.zeros(c, dtype=DTYPE)
        return self._push(Node("group_norm", (src,),
                               (f"{name}.gamma", f"{name}.beta"),
                               {"groups": groups, "eps": eps}, self._shape(src)))

    def build(self, arch=""):
        return Graph(self._nodes, dict(self._params),
                     self._nodes[0].shape, self._aux, arch=arch)


# --------------------------------------------------------- finite differences


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple
    checked: int

    def __str__(self):
        tensor, idx = self.worst
        return (f"max relative gradient error {self.max_rel_error:.3e} "
                f"({tensor}[{idx}]) over {self.checked} probes")


def finite_diff_check(graph, x, h=1e-3, probes=64, seed=0, aux=None):
    """Compare analytic gradients against central differences.

    Probes a deterministic subsample of input and parameter coordinates.
    Numeric differences are evaluated in float64 to keep the comparison
    limited by truncation error rather than float32 cancellation.
    """
    if h <= 0:
        raise ContractError("finite difference step h must be positive")
    x = np.asarray(x, dtype=DTYPE)
    gx = graph.grad_input(x, aux=aux)
    gp = graph.grad_params(x, aux=aux)

    x64 = x.astype(np.float64)
    p64 = {k: v.astype(np.float64) for k, v in graph.params.items()}

    def value(xv, pv):
        y, _ = graph.run(xv, aux=aux, params=pv)
        return float(y[0])

    rng = np.random.default_rng(seed)
    targets = [("input", x64.size)]
    targets += [(name, p64[name].size) for name in sorted(p64)]
    total = sum(t[1] for t in targets)
    plan = []
    for name, size in targets:
        share = max(1, round(probes * size / total))
        idx = rng.choice(size, size=min(share, size), replace=False)
        plan.append((name, np.sort(idx)))

    worst = (0.0, ("input", 0))
    checked = 0
    for name, idxs in plan:
        analytic = gx if name == "input" else gp[name]
        analytic = np.asarray(analytic).ravel()
        for i in idxs:
            if name == "input":
                xp, xm = x64.copy().ravel(), x64.copy().ravel()
                xp[i] += h
                xm[i] -= h
                fp = value(xp.reshape(x64.shape), p64)
                fm = value(xm.reshape(x64.shape), p64)
            else:
                base = p64[name]
                pp, pm = base.copy().ravel(), base.copy().ravel()
                pp[i] += h
                pm[i] -= h
                fp = value(x64, {**p64, name: pp.reshape(base.shape)})
                fm = value(x64, {**p64, name: pm.reshape(base.shape)})
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic[i])
            denom = max(abs(a), abs(numeric), 1e-6)
            rel = abs(a - numeric) / denom
            checked += 1
            if rel > worst[0]:
                worst = (rel, (name, int(i)))
    return GradCheckReport(worst[0], worst[1], checked)


# ------------------------------------------------------------ checkpoint file


def save_params(params, path):
    """Write a parameter checkpoint: magic PGCK, version, then each tensor as
    (u16 name length, utf-8 name, u32 rank, u32 dims, little-endian f32 data)."""
    names = sorted(params)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(names)))
        for name in names:
            arr = np.ascontiguousarray(params[name], dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_params(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise DataError(f"{path}: truncated payload")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    params = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            end = off + 4 * size
            if end > len(blob):
                raise DataError(f"{path}: truncated payload")
            arr = np.frombuffer(blob[off:end], dtype="<f4").reshape(dims)
            params[name] = arr.astype(DTYPE)
            off = end
    except struct.error as exc:
        raise DataError(f"{path}: truncated payload") from exc
    if off != len(blob):
        raise DataError(f"{path}: trailing bytes after checkpoint payload")
    return params
