"""A small dense-tensor engine with reverse-mode differentiation.

Operations are coarse grained: each op (convolution, LSTM layer, pooling, ...)
computes its forward pass in numpy and registers one backward closure. Every op
accepts arbitrary leading batch dimensions in front of the shapes documented on
it. Everything runs in float64.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError

NORM_FLOOR = 1e-12


class Tensor:
    """An array plus the bookkeeping needed to backpropagate through it."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.name = name
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = topo_order(self)
        self.grad = np.asarray(grad, dtype=np.float64).reshape(self.shape).copy()
        for node in reversed(order):
            if node.backward_fn is None or node.grad is None:
                continue
            pgrads = node.backward_fn(node.grad)
            for p, g in zip(node.parents, pgrads):
                if g is None or not p.requires_grad:
                    continue
                if p.grad is None:
                    p.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    p.grad += g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Create an op output. ``backward(g)`` returns one gradient (or None) per parent."""
    out = Tensor(data)
    out.parents = tuple(parents)
    out.requires_grad = any(p.requires_grad for p in parents)
    out.backward_fn = backward if out.requires_grad else None
    out.op = op
    return out


def topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


# --- elementwise and shape ops -----------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_node(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return make_node(np.concatenate([x.data for x in xs], axis=axis), xs,
                     lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map on the last axis: ``x @ w + b`` with ``w`` of shape (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} vs weight {w.shape}")
    x2 = x.data.reshape(-1, w.shape[0])
    y = (x2 @ w.data + b.data).reshape(x.shape[:-1] + (w.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        return (g2 @ w.data.T).reshape(x.shape), x2.T @ g2, g2.sum(axis=0)

    return make_node(y, (x, w, b), backward, "linear")


def unit_normalize(x: Tensor) -> Tensor:
    """Scale every trailing vector to unit L2 norm; zero vectors stay zero."""
    norm = np.sqrt(np.sum(x.data ** 2, axis=-1, keepdims=True))
    denom = np.maximum(norm, NORM_FLOOR)
    y = x.data / denom
    live = norm > NORM_FLOOR

    def backward(g):
        proj = np.sum(y * g, axis=-1, keepdims=True)
        return (np.where(live, (g - y * proj) / denom, g / denom),)

    return make_node(y, (x,), backward, "unit_normalize")


# --- convolution and pooling -------------------------------------------------------

def _same_pad(k: int) -> tuple[int, int]:
    before = (k - 1) // 2
    return before, k - 1 - before


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 cross-correlation with zero 'same' padding.

    x: (..., T, F, Cin), kernel: (wt, wf, Cin, Cout), bias: (Cout,).
    For even kernel extents the extra padding row goes after the signal.
    """
    wt, wf, cin, cout = kernel.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d: input has {x.shape[-1]} channels, kernel expects {cin}")
    lead = x.shape[:-3]
    T, F = x.shape[-3], x.shape[-2]
    pt, pf = _same_pad(wt), _same_pad(wf)
    xp = np.pad(x.data, [(0, 0)] * len(lead) + [pt, pf, (0, 0)])
    K = kernel.data
    y = np.empty(lead + (T, F, cout))
    y[...] = bias.data
    for i in range(wt):
        for j in range(wf):
            y += xp[..., i:i + T, j:j + F, :] @ K[i, j]

    def backward(g):
        dxp = np.zeros_like(xp)
        dK = np.empty_like(K)
        g2 = g.reshape(-1, cout)
        for i in range(wt):
            for j in range(wf):
                xs = xp[..., i:i + T, j:j + F, :].reshape(-1, cin)
                dK[i, j] = xs.T @ g2
                dxp[..., i:i + T, j:j + F, :] += g @ K[i, j].T
        dx = dxp[..., pt[0]:pt[0] + T, pf[0]:pf[0] + F, :]
        return dx, dK, g2.sum(axis=0)

    return make_node(y, (x, kernel, bias), backward, "conv2d")


@dataclass(frozen=True)
class PoolIndices:
    """Argmax positions of a max-pool, as flat offsets into the pre-pool (T, F) plane."""

    flat: np.ndarray  # int, (..., T2, F2, C)
    in_shape: tuple[int, ...]  # (..., T, F, C)
    window: tuple[int, int]


def maxpool(x: Tensor, pool_t: int, pool_f: int) -> tuple[Tensor, PoolIndices]:
    """Non-overlapping max-pool in ceil mode over the (T, F) axes.

    Ties resolve to the lowest linear index inside the window.
    """
    if pool_t not in (1, 2) or pool_f not in (1, 2):
        raise ShapeError(f"pool extents must be 1 or 2, got ({pool_t}, {pool_f})")
    lead = x.shape[:-3]
    T, F, C = x.shape[-3:]
    T2, F2 = -(-T // pool_t), -(-F // pool_f)
    xp = np.pad(x.data, [(0, 0)] * len(lead) + [(0, T2 * pool_t - T), (0, F2 * pool_f - F), (0, 0)],
                constant_values=-np.inf)
    nl = len(lead)
    win = xp.reshape(lead + (T2, pool_t, F2, pool_f, C))
    win = np.moveaxis(win, (nl + 1, nl + 3), (-2, -1)).reshape(lead + (T2, F2, C, pool_t * pool_f))
    arg = np.argmax(win, axis=-1)
    dt, df = np.divmod(arg, pool_f)
    rows = np.arange(T2).reshape(T2, 1, 1) * pool_t + dt
    cols = np.arange(F2).reshape(1, F2, 1) * pool_f + df
    flat = rows * F + cols
    idx = PoolIndices(flat, tuple(x.shape), (pool_t, pool_f))
    y = _gather(x.data, idx)

    def backward(g):
        return (_scatter(g, idx),)

    return make_node(y, (x,), backward, "maxpool"), idx


def _gather(x: np.ndarray, idx: PoolIndices) -> np.ndarray:
    T, F, C = idx.in_shape[-3:]
    lead = idx.in_shape[:-3]
    x2 = x.reshape((-1, T * F, C))
    f2 = idx.flat.reshape((x2.shape[0], -1, C))
    return np.take_along_axis(x2, f2, axis=1).reshape(idx.flat.shape)


def _scatter(y: np.ndarray, idx: PoolIndices) -> np.ndarray:
    T, F, C = idx.in_shape[-3:]
    out = np.zeros((int(np.prod(idx.in_shape[:-3], dtype=np.int64)), T * F, C))
    f2 = idx.flat.reshape((out.shape[0], -1, C))
    np.put_along_axis(out, f2, y.reshape(f2.shape), axis=1)
    return out.reshape(idx.in_shape)


def unpool(x: Tensor, idx: PoolIndices) -> Tensor:
    """Place pooled values back at their recorded argmax positions, zeros elsewhere."""
    if x.shape != idx.flat.shape:
        raise ShapeError(f"unpool: input {x.shape} does not match recorded indices {idx.flat.shape}")
    return make_node(_scatter(x.data, idx), (x,), lambda g: (_gather(g, idx),), "unpool")


def upsample_nearest(x: Tensor, factor_t: int, factor_f: int, out_tf: tuple[int, int]) -> Tensor:
    """Repeat along T and F, then crop (or zero-pad) to ``out_tf``."""
    T, F = out_tf
    r = np.repeat(np.repeat(x.data, factor_t, axis=-3), factor_f, axis=-2)
    rt, rf = r.shape[-3], r.shape[-2]
    y = np.zeros(x.shape[:-3] + (T, F, x.shape[-1]))
    y[..., :min(T, rt), :min(F, rf), :] = r[..., :T, :F, :]

    def backward(g):
        full = np.zeros(r.shape)
        full[..., :min(T, rt), :min(F, rf), :] = g[..., :rt, :rf, :]
        lead = x.shape[:-3]
        t2, f2, c = x.shape[-3:]
        full = full.reshape(lead + (t2, factor_t, f2, factor_f, c))
        return (full.sum(axis=(len(lead) + 1, len(lead) + 3)),)

    return make_node(y, (x,), backward, "upsample")


# --- branch merging -----------------------------------------------------------------

def concat_broadcast(cnn: Tensor, lstm: Tensor) -> Tensor:
    """(..., T, F, C) and (..., T, N) -> (..., T, F, C+N), LSTM rows copied across F."""
    if cnn.shape[:-2] != lstm.shape[:-1]:
        raise ShapeError(f"concat_broadcast: frame axes differ, {cnn.shape} vs {lstm.shape}")
    F, C = cnn.shape[-2:]
    N = lstm.shape[-1]
    rep = np.broadcast_to(lstm.data[..., None, :], lstm.shape[:-1] + (F, N))
    y = np.concatenate([cnn.data, rep], axis=-1)
    return make_node(y, (cnn, lstm), lambda g: (g[..., :C], g[..., C:].sum(axis=-2)), "concat_broadcast")


def concat_broadcast_linear(cnn: Tensor, lstm: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``linear(concat_broadcast(cnn, lstm), w, b)`` without materializing the
    broadcast; the LSTM half of ``w`` is applied once per frame."""
    if cnn.shape[:-2] != lstm.shape[:-1]:
        raise ShapeError(f"concat_broadcast: frame axes differ, {cnn.shape} vs {lstm.shape}")
    C, N = cnn.shape[-1], lstm.shape[-1]
    if w.shape[0] != C + N:
        raise ShapeError(f"linear: input width {C + N} vs weight {w.shape}")
    out = w.shape[1]
    wc, wl = w.data[:C], w.data[C:]
    c2 = cnn.data.reshape(-1, C)
    l2 = lstm.data.reshape(-1, N)
    y = (c2 @ wc).reshape(cnn.shape[:-1] + (out,)) + (l2 @ wl).reshape(lstm.shape[:-1] + (1, out)) + b.data

    def backward(g):
        g2 = g.reshape(-1, out)
        gs = g.sum(axis=-2).reshape(-1, out)
        dw = np.concatenate([c2.T @ g2, l2.T @ gs], axis=0)
        return (g2 @ wc.T).reshape(cnn.shape), (gs @ wl.T).reshape(lstm.shape), dw, g2.sum(axis=0)

    return make_node(y, (cnn, lstm, w, b), backward, "concat_broadcast_linear")


def concat_flatten(cnn: Tensor, lstm: Tensor) -> Tensor:
    """(..., T, F, C) and (..., T, N) -> (..., T, F*C+N)."""
    if cnn.shape[:-2] != lstm.shape[:-1]:
        raise ShapeError(f"concat_flatten: frame axes differ, {cnn.shape} vs {lstm.shape}")
    F, C = cnn.shape[-2:]
    flat = cnn.data.reshape(cnn.shape[:-2] + (F * C,))
    y = np.concatenate([flat, lstm.data], axis=-1)
    return make_node(y, (cnn, lstm), lambda g: (g[..., :F * C].reshape(cnn.shape), g[..., F * C:]),
                     "concat_flatten")


# --- recurrent -----------------------------------------------------------------------

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lstm(x: Tensor, wx: Tensor, wh: Tensor, b: Tensor, reverse: bool = False) -> Tensor:
    """One unidirectional LSTM pass over (..., T, Din) -> (..., T, N).

    Gate blocks in ``wx`` (Din, 4N), ``wh`` (N, 4N) and ``b`` (4N,) are ordered
    input, forget, cell candidate, output. Initial states are zero.
    """
    din, n4 = wx.shape
    N = n4 // 4
    if x.shape[-1] != din:
        raise ShapeError(f"lstm: input width {x.shape[-1]} vs weight {wx.shape}")
    lead = x.shape[:-2]
    T = x.shape[-2]
    xs = x.data.reshape(-1, T, din)
    B = xs.shape[0]
    zx = xs @ wx.data + b.data
    steps = range(T - 1, -1, -1) if reverse else range(T)
    W = wh.data
    gates = np.empty((B, T, n4))
    cs = np.empty((B, T, N))
    hs = np.empty((B, T, N))
    h = np.zeros((B, N))
    c = np.zeros((B, N))
    for t in steps:
        z = zx[:, t] + h @ W
        ga = gates[:, t]
        ga[:, :2 * N] = _sigmoid(z[:, :2 * N])
        ga[:, 2 * N:3 * N] = np.tanh(z[:, 2 * N:3 * N])
        ga[:, 3 * N:] = _sigmoid(z[:, 3 * N:])
        c = ga[:, N:2 * N] * c + ga[:, :N] * ga[:, 2 * N:3 * N]
        h = ga[:, 3 * N:] * np.tanh(c)
        cs[:, t] = c
        hs[:, t] = h

    def backward(g):
        g = g.reshape(B, T, N)
        dz = np.empty((B, T, n4))
        dW = np.zeros_like(W)
        dh_next = np.zeros((B, N))
        dc_next = np.zeros((B, N))
        zero = np.zeros((B, N))
        for k, t in enumerate(reversed(list(steps))):
            prev = t + 1 if reverse else t - 1
            first = (t == T - 1) if reverse else (t == 0)
            c_prev = zero if first else cs[:, prev]
            h_prev = zero if first else hs[:, prev]
            ga = gates[:, t]
            i, f, gg, o = ga[:, :N], ga[:, N:2 * N], ga[:, 2 * N:3 * N], ga[:, 3 * N:]
            tc = np.tanh(cs[:, t])
            dh = g[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            d = dz[:, t]
            d[:, :N] = dc * gg * i * (1.0 - i)
            d[:, N:2 * N] = dc * c_prev * f * (1.0 - f)
            d[:, 2 * N:3 * N] = dc * i * (1.0 - gg * gg)
            d[:, 3 * N:] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dW += h_prev.T @ d
            dh_next = d @ W.T
        dz2 = dz.reshape(-1, n4)
        dx = (dz2 @ wx.data.T).reshape(x.shape)
        return dx, xs.reshape(-1, din).T @ dz2, dW, dz2.sum(axis=0)

    return make_node(hs.reshape(lead + (T, N)), (x, wx, wh, b), backward, "lstm")


def lstm_layer(x: Tensor, forward: tuple[Tensor, Tensor, Tensor],
               backward: tuple[Tensor, Tensor, Tensor] | None = None) -> Tensor:
    """LSTM layer; with ``backward`` weights it is bidirectional and the two
    passes are concatenated per time step (forward first)."""
    out = lstm(x, *forward)
    if backward is None:
        return out
    return concat([out, lstm(x, *backward, reverse=True)], axis=-1)


def init_lstm(rng: np.random.Generator, din: int, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    bound = 1.0 / np.sqrt(din + n)
    wx = rng.uniform(-bound, bound, (din, 4 * n))
    wh = rng.uniform(-bound, bound, (n, 4 * n))
    b = np.zeros(4 * n)
    b[n:2 * n] = 1.0
    return wx, wh, b


def init_dense(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


# --- parameter containers ----------------------------------------------------------------

class Graph:
    """Named trainable parameters plus the node tape of the latest forward pass."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.nodes: list[Tensor] = []

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def forward(self, x: np.ndarray) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: np.ndarray) -> Tensor:
        out = self.forward(x)
        self.nodes = topo_order(out)
        return out

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {v.shape} vs parameter {p.shape}")
            p.data = v.copy()


# --- optimizer --------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> dict[str, Tensor]:
    """Apply one bias-corrected Adam update in place."""
    for k, g in grads.items():
        if np.shape(g) != params[k].shape:
            raise ShapeError(f"{k}: gradient {np.shape(g)} vs parameter {params[k].shape}")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for k, g in grads.items():
        m = state.m.setdefault(k, np.zeros_like(g))
        v = state.v.setdefault(k, np.zeros_like(g))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[k].data = params[k].data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# --- checkpoints --------------------------------------------------------------------------

def save_checkpoint(path: str | os.PathLike, state: dict[str, np.ndarray], extra: dict | None = None) -> None:
    """Write ``<path>.bin`` (little-endian float64 blob) and ``<path>.json`` (manifest)."""
    path = str(path)
    entries, offset, chunks = [], 0, []
    for name, arr in state.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    with open(path + ".bin", "wb") as f:
        f.write(b"".join(chunks))
    manifest = {"dtype": "float64", "byte_order": "little", "tensors": entries}
    if extra:
        manifest["extra"] = extra
    with open(path + ".json", "w") as f:
        json.dump(manifest, f, indent=1)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    path = str(path)
    with open(path + ".json") as f:
        manifest = json.load(f)
    with open(path + ".bin", "rb") as f:
        blob = f.read()
    state = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(blob, dtype="<f8", count=e["nbytes"] // 8, offset=e["offset"])
        state[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return state, manifest.get("extra", {})


# --- verification helper ---------------------------------------------------------------

def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], rng: np.random.Generator,
              h: float = 1e-5, wrt: Iterable[int] | None = None) -> float:
    """Largest norm-wise relative error between backprop and central differences.

    The scalar probed is ``sum(fn(*inputs) * R)`` for a fixed random ``R``.
    """
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    wrt = list(range(len(inputs))) if wrt is None else list(wrt)
    ts = [Tensor(a, requires_grad=(i in wrt)) for i, a in enumerate(inputs)]
    out = fn(*ts)
    R = rng.standard_normal(out.shape)
    out.backward(R)
    worst = 0.0
    for i in wrt:
        analytic = ts[i].grad if ts[i].grad is not None else np.zeros_like(inputs[i])
        numeric = np.zeros_like(inputs[i])
        flat = inputs[i].reshape(-1)
        nflat = numeric.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            fp = np.sum(fn(*[Tensor(a) for a in inputs]).data * R)
            flat[k] = orig - h
            fm = np.sum(fn(*[Tensor(a) for a in inputs]).data * R)
            flat[k] = orig
            nflat[k] = (fp - fm) / (2 * h)
        scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-12)
        worst = max(worst, float(np.linalg.norm(numeric - analytic) / scale))
    return worst
