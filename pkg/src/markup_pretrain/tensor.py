"""Dense tensors with reverse-mode gradients.

Each op computes its forward pass eagerly with numpy and records a closure
that maps the output gradient to input gradients. ``Tensor.backward`` walks
the recorded graph in reverse topological order.
"""

from __future__ import annotations

import io
import struct
from collections import OrderedDict
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy.special import erf

ATTN_MASK_VALUE = -1e9
LN_EPS = 1e-12


class ShapeMismatch(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
    ):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # light operator sugar; the named functions below are the primary API
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topo_order(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    post: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            post.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    return post[::-1]


def _make(data, parents, backward) -> Tensor:
    if not any(_needs_grad(p) for p in parents):
        return Tensor(data)
    return Tensor(data, parents=parents, backward=backward)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise / shape


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    return _make((x.data * c).astype(x.dtype), (x,), lambda g: ((g * c).astype(x.dtype),))


def take_last(x: Tensor, index: int) -> Tensor:
    """``x[..., index]``."""

    def back(g):
        gx = np.zeros_like(x.data)
        gx[..., index] = g
        return (gx,)

    return _make(x.data[..., index], (x,), back)


def sum_all(x: Tensor) -> Tensor:
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def back(g):
        return np.split(g, bounds, axis=axis)

    return _make(out, xs, back)


def gather_rows(x: Tensor, batch_idx: np.ndarray, pos_idx: np.ndarray) -> Tensor:
    """``x[batch_idx, pos_idx]`` for x of shape [B, S, d]."""
    batch_idx = np.asarray(batch_idx, dtype=np.int64)
    pos_idx = np.asarray(pos_idx, dtype=np.int64)
    out = x.data[batch_idx, pos_idx]

    def back(g):
        B, S = x.shape[0], x.shape[1]
        flat = scatter_add_rows(B * S, batch_idx * S + pos_idx, g.astype(x.dtype, copy=False))
        return (flat.reshape(x.shape),)

    return _make(out, (x,), back)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * pos,))


_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT1_2))
    out = (x.data * cdf).astype(x.dtype)

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return ((g * (cdf + x.data * pdf)).astype(x.dtype),)

    return _make(out, (x,), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        gxhat = g * gain.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, bias), back)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- linear maps / lookups


def affine(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W.T + b`` over the last axis of x; W has shape [out, in]."""
    x, W = as_tensor(x), as_tensor(W)
    if W.data.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ShapeMismatch(f"affine: x {x.shape} vs W {W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise ShapeMismatch(f"affine: bias {b.shape} vs W {W.shape}")
    out = x.data @ W.data.T
    if b is not None:
        out = out + b.data

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        gx = g @ W.data
        gW = g2.T @ x2
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    parents = (x, W) if b is None else (x, W, b)
    return _make(out, parents, back)


def scatter_add_rows(n_rows: int, idx: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """``out[idx[i]] += rows[i]``; sort + reduceat, much faster than ``np.add.at``."""
    out = np.zeros((n_rows,) + rows.shape[1:], dtype=rows.dtype)
    if idx.size == 0:
        return out
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    uniq, starts = np.unique(sorted_idx, return_index=True)
    out[uniq] = np.add.reduceat(rows[order], starts, axis=0)
    return out


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexOutOfRange(f"ids outside [0, {V})")
    out = table.data[ids]

    def back(g):
        return (scatter_add_rows(V, ids.reshape(-1), g.reshape(-1, table.shape[1])),)

    return _make(out, (table,), back)


def level_embedding_lookup(tables: Tensor, ids) -> Tensor:
    """Per-level lookup: ``tables[j, ids[..., j]]`` for tables of shape [L, V, e].

    Returns shape ``ids.shape + (e,)``. Each level j reads only its own table.
    """
    ids = np.asarray(ids, dtype=np.int64)
    L, V, e = tables.shape
    if ids.shape[-1] != L:
        raise ShapeMismatch(f"ids last axis {ids.shape[-1]} vs {L} levels")
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexOutOfRange(f"ids outside [0, {V})")
    flat = ids + np.arange(L) * V
    flat_table = tables.data.reshape(L * V, e)
    out = flat_table[flat]

    def back(g):
        gt = scatter_add_rows(L * V, flat.reshape(-1), g.reshape(-1, e).astype(tables.dtype, copy=False))
        return (gt.reshape(L, V, e),)

    return _make(out, (tables,), back)


def bilinear(a: Tensor, b: Tensor, W: Tensor, bias: Tensor) -> Tensor:
    """``out[n, k] = a[n] @ W[k] @ b[n] + bias[k]``."""
    aw = np.einsum("ni,kij->nkj", a.data, W.data)
    out = np.einsum("nkj,nj->nk", aw, b.data) + bias.data

    def back(g):
        ga = np.einsum("nk,kij,nj->ni", g, W.data, b.data)
        gb = np.einsum("nk,nkj->nj", g, aw)
        gW = np.einsum("nk,ni,nj->kij", g, a.data, b.data)
        return ga, gb, gW, g.sum(axis=0)

    return _make(out, (a, b, W, bias), back)


# ---------------------------------------------------------------- losses


def softmax_cross_entropy(logits: Tensor, labels, ignore_index: int = -100) -> tuple[Tensor, bool]:
    """Mean cross-entropy over rows whose label is not ``ignore_index``.

    Returns ``(loss, all_ignored)``; with every row ignored the loss is 0 and
    no gradient flows.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    active = labels != ignore_index
    n_active = int(active.sum())
    if n_active == 0:
        return Tensor(np.zeros((), dtype=logits.dtype)), True
    if np.any((labels[active] < 0) | (labels[active] >= c)):
        raise IndexOutOfRange("label outside class range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.nonzero(active)[0]
    loss = -logp[rows, labels[rows]].sum() / n_active

    def back(g):
        p = np.exp(logp)
        p[~active] = 0.0
        p[rows, labels[rows]] -= 1.0
        return ((g * p / n_active).astype(logits.dtype),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), back), False


# ---------------------------------------------------------------- attention / encoder


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, key_mask, n_heads: int) -> Tensor:
    """Multi-head attention core on already-projected q, k, v of shape [B, S, d].

    ``key_mask`` is boolean [B, S]; False keys receive an additive -1e9.
    """
    B, S, d = q.shape
    if d % n_heads:
        raise ShapeMismatch(f"hidden size {d} not divisible by {n_heads} heads")
    hd = d // n_heads
    scale = 1.0 / np.sqrt(hd)

    def split(t):
        return t.reshape(B, S, n_heads, hd).transpose(0, 2, 1, 3)  # B,H,S,hd

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    add_mask = np.where(np.asarray(key_mask, dtype=bool), 0.0, ATTN_MASK_VALUE).astype(q.dtype)
    scores = scores + add_mask[:, None, None, :]
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    ctx = p @ vh
    out = ctx.transpose(0, 2, 1, 3).reshape(B, S, d)

    def back(g):
        gctx = g.reshape(B, S, n_heads, hd).transpose(0, 2, 1, 3)
        gp = gctx @ vh.transpose(0, 1, 3, 2)
        gv = p.transpose(0, 1, 3, 2) @ gctx
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ kh
        gk = gs.transpose(0, 1, 3, 2) @ qh

        def merge(t):
            return t.transpose(0, 2, 1, 3).reshape(B, S, d)

        return merge(gq), merge(gk), merge(gv)

    return _make(out, (q, k, v), back)


def attention_probs(q: np.ndarray, k: np.ndarray, key_mask, n_heads: int) -> np.ndarray:
    """Attention weights [B, H, S, S] for inspection (no graph)."""
    B, S, d = q.shape
    hd = d // n_heads
    qh = q.reshape(B, S, n_heads, hd).transpose(0, 2, 1, 3)
    kh = k.reshape(B, S, n_heads, hd).transpose(0, 2, 1, 3)
    s = qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(hd)
    s = s + np.where(np.asarray(key_mask, bool), 0.0, ATTN_MASK_VALUE)[:, None, None, :]
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    return p / p.sum(axis=-1, keepdims=True)


def multi_head_attention(x: Tensor, p: dict[str, Tensor], mask, n_heads: int) -> Tensor:
    q = affine(x, p["q.weight"], p["q.bias"])
    k = affine(x, p["k.weight"], p["k.bias"])
    v = affine(x, p["v.weight"], p["v.bias"])
    ctx = scaled_dot_attention(q, k, v, mask, n_heads)
    return affine(ctx, p["o.weight"], p["o.bias"])


def encoder_layer(
    x: Tensor,
    p: dict[str, Tensor],
    mask,
    n_heads: int,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Post-norm transformer block (attention, then GELU feed-forward)."""
    a = multi_head_attention(x, p, mask, n_heads)
    h = layer_norm(add(x, dropout(a, dropout_p, rng)), p["attn_ln.gain"], p["attn_ln.bias"])
    f = affine(gelu(affine(h, p["ffn_in.weight"], p["ffn_in.bias"])), p["ffn_out.weight"], p["ffn_out.bias"])
    return layer_norm(add(h, dropout(f, dropout_p, rng)), p["ffn_ln.gain"], p["ffn_ln.bias"])


def encoder_layer_shapes(d: int, d_ff: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for n in ("q", "k", "v", "o"):
        shapes[f"{n}.weight"] = (d, d)
        shapes[f"{n}.bias"] = (d,)
    shapes["attn_ln.gain"] = (d,)
    shapes["attn_ln.bias"] = (d,)
    shapes["ffn_in.weight"] = (d_ff, d)
    shapes["ffn_in.bias"] = (d_ff,)
    shapes["ffn_out.weight"] = (d, d_ff)
    shapes["ffn_out.bias"] = (d,)
    shapes["ffn_ln.gain"] = (d,)
    shapes["ffn_ln.bias"] = (d,)
    return shapes


# ---------------------------------------------------------------- parameters


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float64) -> np.ndarray:
    """Normal(0, std) resampled until every value lies within two std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def init_param(name: str, shape, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    if name.endswith(".gain"):
        return np.ones(shape, dtype=dtype)
    if name.endswith(".bias"):
        return np.zeros(shape, dtype=dtype)
    return truncated_normal(rng, shape, dtype=dtype)


_MAGIC = b"MLPS"
_VERSION = 1


class ParamStore:
    """Named parameters in registration order."""

    def __init__(self) -> None:
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} registered twice")
        t = Tensor(np.asarray(data), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def prefixed(self, prefix: str) -> dict[str, Tensor]:
        n = len(prefix)
        return {k[n:]: v for k, v in self._params.items() if k.startswith(prefix)}

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def astype(self, dtype) -> None:
        for t in self._params.values():
            t.data = t.data.astype(dtype)

    # Binary layout: magic, version, count, then per parameter
    # (name length, utf-8 name, ndim, dims) followed by the fp32 payloads in the same order.
    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(_MAGIC)
        buf.write(struct.pack("<II", _VERSION, len(self._params)))
        for name, t in self._params.items():
            raw = name.encode("utf-8")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<B", t.data.ndim))
            buf.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        for t in self._params.values():
            buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes, dtype=np.float32) -> "ParamStore":
        view = memoryview(blob)
        if bytes(view[:4]) != _MAGIC:
            raise ValueError("not a parameter file")
        version, count = struct.unpack_from("<II", view, 4)
        if version != _VERSION:
            raise ValueError(f"unsupported parameter file version {version}")
        off = 12
        header = []
        for _ in range(count):
            (n,) = struct.unpack_from("<H", view, off)
            off += 2
            name = bytes(view[off : off + n]).decode("utf-8")
            off += n
            (ndim,) = struct.unpack_from("<B", view, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", view, off)
            off += 4 * ndim
            header.append((name, shape))
        store = cls()
        for name, shape in header:
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            store.add(name, arr.astype(dtype))
        if off != len(blob):
            raise ValueError("trailing bytes in parameter file")
        return store

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path, dtype=np.float32) -> "ParamStore":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), dtype=dtype)
