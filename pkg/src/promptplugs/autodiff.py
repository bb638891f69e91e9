"""Reverse-mode automatic differentiation on small float64 arrays.

This is a define-by-run tape: every op builds a node holding its parents and
a backward closure, and ``Tensor.backward()`` walks the graph once in reverse
topological order.  Scope is deliberately narrow — rank <= 2 float64 arrays,
the ops a small encoder-decoder transformer needs, nothing else:

* primitives: add, mul, scale, matmul, transpose, sigmoid, gelu,
  softmax_rows, layer_norm, cross_entropy, sum/mean, concat/slice/gather;
* fused composites used on the hot path: ``embedding_sum``,
  ``assemble_rows``, ``multi_head_attention``, ``gate_rows``,
  ``residual_norm``.  Each has a hand-derived backward; the finite-difference
  checker (:func:`grad_check`) is the independent referee for all of them.

Batching convention: a batch of B same-shape sequences of length L is stored
stacked as one ``(B*L, d)`` matrix.  Ops that must not mix rows across
examples (attention, gating, the partial residual norm) take ``batch`` and
per-example lengths and reshape internally; everything row-local (matmul,
layer_norm, gelu, ...) runs on the stacked matrix directly.

Determinism: float64 throughout, and every reduction is a numpy reduction
over fixed axes, so identical inputs give bit-identical values and gradients
run to run (numpy's summation order is fixed for a given shape).
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

Array = np.ndarray

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus optional gradient and graph linkage."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ValueError(f"Tensor rank must be <= 2, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Backpropagate from a scalar output through the recorded graph.

        Gradients accumulate into every reachable tensor with
        ``requires_grad``; each node's closure runs exactly once.  The graph
        is released afterwards so long training loops do not hold memory.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, emitted = stack.pop()
            if emitted:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited and parent.requires_grad:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
                node._backward = None
                node._parents = ()


def _make(data: Array, parents: Sequence[Tensor], backward: Callable[[Array], None]) -> Tensor:
    """Create a graph node if any parent needs gradients, else a plain leaf."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: Array) -> None:
    if t.requires_grad:
        if t.grad is None:
            t.grad = g if g.base is None else g.copy()
        else:
            t.grad = t.grad + g


# ---------------------------------------------------------------------------
# Elementwise and linear primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a (1, n) row vector broadcast over rows."""
    out = a.data + b.data
    broadcast = b.data.shape != a.data.shape

    def backward(g: Array) -> None:
        _accum(a, g)
        if b.requires_grad:
            _accum(b, g.sum(axis=0, keepdims=True) if broadcast else g)

    return _make(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")

    def backward(g: Array) -> None:
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g: Array) -> None:
        _accum(a, g * c)

    return _make(a.data * c, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul requires rank-2 tensors")

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    def backward(g: Array) -> None:
        _accum(a, g.T)

    return _make(a.data.T.copy(), (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    """Numerically stable logistic function."""
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g: Array) -> None:
        _accum(a, g * out * (1.0 - out))

    return _make(out, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian error linear unit, 0.5*x*(1 + erf(x/sqrt(2)))."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def backward(g: Array) -> None:
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        _accum(a, g * (cdf + x * pdf))

    return _make(out, (a,), backward)


def ffn(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Fused two-layer feed-forward block: ``gelu(x @ w1 + b1) @ w2 + b2``.

    One graph node instead of five; the backward is the composition of the
    matmul, bias and gelu rules.
    """
    z = x.data @ w1.data + b1.data
    cdf = 0.5 * (1.0 + erf(z * _INV_SQRT2))
    a = z * cdf
    out = a @ w2.data + b2.data

    def backward(g: Array) -> None:
        if w2.requires_grad:
            _accum(w2, a.T @ g)
        if b2.requires_grad:
            _accum(b2, g.sum(axis=0, keepdims=True))
        da = g @ w2.data.T
        pdf = _INV_SQRT2PI * np.exp(-0.5 * z * z)
        dz = da * (cdf + z * pdf)
        if w1.requires_grad:
            _accum(w1, x.data.T @ dz)
        if b1.requires_grad:
            _accum(b1, dz.sum(axis=0, keepdims=True))
        if x.requires_grad:
            _accum(x, dz @ w1.data.T)

    return _make(out, (x, w1, b1, w2, b2), backward)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction for stability."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g: Array) -> None:
        dot = (g * p).sum(axis=-1, keepdims=True)
        _accum(a, p * (g - dot))

    return _make(p, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row layer normalisation with learned (1, d) gain and bias."""
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    d = x.data.shape[1]

    def backward(g: Array) -> None:
        if gain.requires_grad:
            _accum(gain, (g * xhat).sum(axis=0, keepdims=True))
        if bias.requires_grad:
            _accum(bias, g.sum(axis=0, keepdims=True))
        dxhat = g * gain.data
        term = dxhat - dxhat.mean(axis=1, keepdims=True) \
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        if x.requires_grad:
            _accum(x, inv * term)

    return _make(out, (x, gain, bias), backward)


def cross_entropy(logits: Tensor, targets: Array) -> Tensor:
    """Mean token-level cross-entropy of (N, V) logits against N target ids."""
    t = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or t.ndim != 1 or t.shape[0] != logits.data.shape[0]:
        raise ValueError("cross_entropy expects (N, V) logits and N targets")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(z[:, 0])
    n = x.shape[0]
    picked = x[np.arange(n), t]
    out = np.asarray((lse - picked).mean())

    def backward(g: Array) -> None:
        p = e / z
        p[np.arange(n), t] -= 1.0
        _accum(logits, p * (float(g) / n))

    return _make(out, (logits,), backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g: Array) -> None:
        _accum(a, np.full_like(a.data, float(g)))

    return _make(np.asarray(a.data.sum()), (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g: Array) -> None:
        _accum(a, np.full_like(a.data, float(g) / n))

    return _make(np.asarray(a.data.mean()), (a,), backward)


# ---------------------------------------------------------------------------
# Row plumbing
# ---------------------------------------------------------------------------

def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack rank-2 tensors along rows."""
    parts = list(parts)
    sizes = [p.data.shape[0] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=0)

    def backward(g: Array) -> None:
        lo = 0
        for p, n in zip(parts, sizes):
            _accum(p, g[lo:lo + n])
            lo += n

    return _make(out, parts, backward)


def slice_rows(a: Tensor, lo: int, hi: int) -> Tensor:
    def backward(g: Array) -> None:
        full = np.zeros_like(a.data)
        full[lo:hi] = g
        _accum(a, full)

    return _make(a.data[lo:hi].copy(), (a,), backward)


def gather_rows(table: Tensor, idx: Array) -> Tensor:
    """Select rows ``table[idx]``; backward scatter-adds into the table."""
    ix = np.asarray(idx, dtype=np.int64)

    def backward(g: Array) -> None:
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ix, g)
            _accum(table, full)

    return _make(table.data[ix], (table,), backward)


def embedding_sum(pairs: Sequence[tuple[Tensor, Array]]) -> Tensor:
    """Sum of table lookups, e.g. token + position + segment embeddings.

    ``pairs`` is a list of (table, index-array); all index arrays share one
    length N and the result is the (N, d) sum of the selected rows.
    """
    pairs = [(t, np.asarray(ix, dtype=np.int64)) for t, ix in pairs]
    out = pairs[0][0].data[pairs[0][1]].copy()
    for t, ix in pairs[1:]:
        out += t.data[ix]

    def backward(g: Array) -> None:
        for t, ix in pairs:
            if t.requires_grad:
                full = np.zeros_like(t.data)
                np.add.at(full, ix, g)
                _accum(t, full)

    return _make(out, tuple(t for t, _ in pairs), backward)


def assemble_rows(emb: Tensor, prompts: Sequence[Tensor], batch: int, n_emb: int) -> Tensor:
    """Append shared prompt blocks to each example's embedded rows.

    ``emb`` is the stacked (batch*n_emb, d) embedding output; each prompt is
    a (p_i, d) parameter block appended after the embedded rows of *every*
    example, giving (batch*(n_emb + sum p_i), d).  Prompt gradients sum over
    the batch.
    """
    prompts = list(prompts)
    d = emb.data.shape[1]
    p_sizes = [p.data.shape[0] for p in prompts]
    length = n_emb + sum(p_sizes)
    out3 = np.empty((batch, length, d))
    out3[:, :n_emb] = emb.data.reshape(batch, n_emb, d)
    lo = n_emb
    for p, n in zip(prompts, p_sizes):
        out3[:, lo:lo + n] = p.data
        lo += n

    def backward(g: Array) -> None:
        g3 = g.reshape(batch, length, d)
        _accum(emb, g3[:, :n_emb].reshape(batch * n_emb, d))
        start = n_emb
        for p, n in zip(prompts, p_sizes):
            _accum(p, g3[:, start:start + n].sum(axis=0))
            start += n

    return _make(out3.reshape(batch * length, d), (emb, *prompts), backward)


def gate_rows(a: Tensor, blocks: Sequence[tuple[int, int, Tensor, Tensor]],
              batch: int, length: int) -> Tensor:
    """Replace per-example row blocks with ``sigmoid(G) * (rows + P)``.

    ``blocks`` lists (lo, hi, P, G) in example-local row coordinates; P and G
    are (hi-lo, d) parameters shared across the batch.  Rows outside every
    block pass through unchanged.
    """
    d = a.data.shape[1]
    a3 = a.data.reshape(batch, length, d)
    out3 = a3.copy()
    saved = []
    for lo, hi, p, gL in blocks:
        s = 1.0 / (1.0 + np.exp(-gL.data))
        blk = a3[:, lo:hi]
        out3[:, lo:hi] = s * (blk + p.data)
        saved.append((lo, hi, p, gL, s, blk))

    def backward(g: Array) -> None:
        g3 = g.reshape(batch, length, d)
        da3 = g3.copy()
        for lo, hi, p, gL, s, blk in saved:
            gb = g3[:, lo:hi]
            da3[:, lo:hi] = gb * s
            _accum(p, (gb * s).sum(axis=0))
            _accum(gL, (gb * (blk + p.data) * s * (1.0 - s)).sum(axis=0))
        _accum(a, da3.reshape(batch * length, d))

    parents = [a]
    for lo, hi, p, gL in blocks:
        parents.extend((p, gL))
    return _make(out3.reshape(batch * length, d), parents, backward)


def residual_norm(h_prev: Tensor, a: Tensor, gain: Tensor, bias: Tensor,
                  batch: int, length: int, n_norm: int, eps: float = 1e-5) -> Tensor:
    """Residual + layer norm on the first ``n_norm`` rows of each example.

    Rows [0, n_norm) become ``LN(h_prev + a)``; rows [n_norm, length) pass
    ``a`` through untouched (used for plugin rows, which take no residual).
    With ``n_norm == length`` this is the ordinary post-norm sublayer.
    """
    d = a.data.shape[1]
    h3 = h_prev.data.reshape(batch, length, d)
    a3 = a.data.reshape(batch, length, d)
    x = h3[:, :n_norm] + a3[:, :n_norm]          # (batch, n_norm, d)
    mu = x.mean(axis=2, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out3 = a3.copy()
    out3[:, :n_norm] = xhat * gain.data + bias.data

    def backward(g: Array) -> None:
        g3 = g.reshape(batch, length, d)
        gn = g3[:, :n_norm]
        if gain.requires_grad:
            _accum(gain, (gn * xhat).sum(axis=(0, 1)).reshape(1, d))
        if bias.requires_grad:
            _accum(bias, gn.sum(axis=(0, 1)).reshape(1, d))
        dxhat = gn * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=2, keepdims=True))
        da3 = g3.copy()
        da3[:, :n_norm] = dx
        _accum(a, da3.reshape(batch * length, d))
        dh3 = np.zeros_like(h3)
        dh3[:, :n_norm] = dx
        _accum(h_prev, dh3.reshape(batch * length, d))

    return _make(out3.reshape(batch * length, d), (h_prev, a, gain, bias), backward)


# ---------------------------------------------------------------------------
# Fused multi-head attention
# ---------------------------------------------------------------------------

def multi_head_attention(q_in: Tensor, kv_in: Tensor,
                         wq: Tensor, bq: Tensor, wk: Tensor, bk: Tensor,
                         wv: Tensor, bv: Tensor, wo: Tensor, bo: Tensor,
                         n_heads: int, batch: int, q_len: int, kv_len: int,
                         prefixes: Sequence[tuple[Tensor, Tensor]] = (),
                         causal: bool = False,
                         key_mask: Array | None = None,
                         weights_sink: dict | None = None) -> Tensor:
    """Scaled dot-product attention over stacked same-length examples.

    ``q_in`` is (batch*q_len, d) and ``kv_in`` (batch*kv_len, d); for
    self-attention they are the same tensor.  Each entry of ``prefixes`` is a
    (Pk, Pv) pair of (p_i, d) parameters whose per-head column slices are
    prepended to the projected keys/values of every example, in order, before
    the original keys — so attention rows have ``sum(p_i) + kv_len`` columns.
    Prefix rows are used as keys/values directly (no projection, no bias).

    ``causal`` masks strictly-future original keys (not valid together with
    prefixes; the decoder never mixes them).  ``key_mask``, when given, is a
    (batch, n_prefix + kv_len) boolean array; True columns are dropped from
    the softmax for every query of that example, which renormalizes the
    remaining weights.  An example must keep at least one unmasked column.
    ``weights_sink``, when given, receives the softmax weights as ``weights``
    (batch, heads, q_len, total) plus ``n_prefix`` for splitting.
    """
    if causal and prefixes:
        raise ValueError("causal attention with prefixes is not supported")
    d = q_in.data.shape[1]
    if d % n_heads:
        raise ValueError("d_model must divide evenly into heads")
    e = d // n_heads
    inv_sqrt_e = 1.0 / np.sqrt(e)

    q_flat = q_in.data @ wq.data + bq.data
    k_flat = kv_in.data @ wk.data + bk.data
    v_flat = kv_in.data @ wv.data + bv.data
    # (batch, heads, len, e)
    q4 = q_flat.reshape(batch, q_len, n_heads, e).transpose(0, 2, 1, 3)
    k4 = k_flat.reshape(batch, kv_len, n_heads, e).transpose(0, 2, 1, 3)
    v4 = v_flat.reshape(batch, kv_len, n_heads, e).transpose(0, 2, 1, 3)

    p_sizes = [pk.data.shape[0] for pk, _ in prefixes]
    n_prefix = sum(p_sizes)
    if n_prefix:
        pk3 = np.concatenate(
            [pk.data.reshape(n, n_heads, e).transpose(1, 0, 2) for (pk, _), n in zip(prefixes, p_sizes)],
            axis=1)                               # (heads, n_prefix, e)
        pv3 = np.concatenate(
            [pv.data.reshape(n, n_heads, e).transpose(1, 0, 2) for (_, pv), n in zip(prefixes, p_sizes)],
            axis=1)
        s_pref = (q4 @ pk3.transpose(0, 2, 1)[None]) * inv_sqrt_e
    else:
        pk3 = pv3 = None
        s_pref = np.empty((batch, n_heads, q_len, 0))
    s_orig = (q4 @ k4.swapaxes(2, 3)) * inv_sqrt_e
    if causal:
        mask = np.triu(np.ones((q_len, kv_len), dtype=bool), k=1)
        s_orig = np.where(mask, -np.inf, s_orig)
    scores = np.concatenate([s_pref, s_orig], axis=-1)
    if key_mask is not None:
        scores = np.where(key_mask[:, None, None, :], -np.inf, scores)

    shifted = scores - scores.max(axis=-1, keepdims=True)
    ew = np.exp(shifted)
    w = ew / ew.sum(axis=-1, keepdims=True)       # (batch, heads, q_len, total)
    w_pref, w_orig = w[..., :n_prefix], w[..., n_prefix:]

    ctx = w_orig @ v4
    if n_prefix:
        ctx = ctx + w_pref @ pv3[None]
    ctx_flat = ctx.transpose(0, 2, 1, 3).reshape(batch * q_len, d)
    out = ctx_flat @ wo.data + bo.data

    if weights_sink is not None:
        weights_sink["weights"] = w.copy()
        weights_sink["n_prefix"] = n_prefix

    def backward(g: Array) -> None:
        dctx_flat = g @ wo.data.T
        if wo.requires_grad:
            _accum(wo, ctx_flat.T @ g)
        if bo.requires_grad:
            _accum(bo, g.sum(axis=0, keepdims=True))
        dctx = dctx_flat.reshape(batch, q_len, n_heads, e).transpose(0, 2, 1, 3)

        dw_orig = dctx @ v4.swapaxes(2, 3)
        dv4 = w_orig.swapaxes(2, 3) @ dctx
        if n_prefix:
            dw_pref = dctx @ pv3.swapaxes(1, 2)[None]
            dpv3 = (w_pref.swapaxes(2, 3) @ dctx).sum(axis=0)
            dw = np.concatenate([dw_pref, dw_orig], axis=-1)
        else:
            dw = dw_orig
        ds = w * (dw - (dw * w).sum(axis=-1, keepdims=True))
        ds_pref, ds_orig = ds[..., :n_prefix], ds[..., n_prefix:]

        dq4 = (ds_orig @ k4) * inv_sqrt_e
        dk4 = (ds_orig.swapaxes(2, 3) @ q4) * inv_sqrt_e
        if n_prefix:
            dq4 += (ds_pref @ pk3[None]) * inv_sqrt_e
            dpk3 = (ds_pref.swapaxes(2, 3) @ q4).sum(axis=0) * inv_sqrt_e
            lo = 0
            for (pk, pv), n in zip(prefixes, p_sizes):
                _accum(pk, dpk3[:, lo:lo + n].transpose(1, 0, 2).reshape(n, d))
                _accum(pv, dpv3[:, lo:lo + n].transpose(1, 0, 2).reshape(n, d))
                lo += n

        dq_flat = dq4.transpose(0, 2, 1, 3).reshape(batch * q_len, d)
        dk_flat = dk4.transpose(0, 2, 1, 3).reshape(batch * kv_len, d)
        dv_flat = dv4.transpose(0, 2, 1, 3).reshape(batch * kv_len, d)

        if wq.requires_grad:
            _accum(wq, q_in.data.T @ dq_flat)
        if bq.requires_grad:
            _accum(bq, dq_flat.sum(axis=0, keepdims=True))
        if wk.requires_grad:
            _accum(wk, kv_in.data.T @ dk_flat)
        if bk.requires_grad:
            _accum(bk, dk_flat.sum(axis=0, keepdims=True))
        if wv.requires_grad:
            _accum(wv, kv_in.data.T @ dv_flat)
        if bv.requires_grad:
            _accum(bv, dv_flat.sum(axis=0, keepdims=True))
        if q_in.requires_grad:
            _accum(q_in, dq_flat @ wq.data.T)
        if kv_in.requires_grad:
            _accum(kv_in, dk_flat @ wk.data.T + dv_flat @ wv.data.T)

    parents = [q_in, kv_in, wq, bq, wk, bk, wv, bv, wo, bo]
    for pk, pv in prefixes:
        parents.extend((pk, pv))
    return _make(out, parents, backward)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients to central differences.

    ``rows`` holds one ``(param, flat_index, analytic, numeric, rel_err)``
    tuple per probed entry, in probe order.
    """

    n_checked: int
    max_rel_err: float
    worst_param: str
    worst_index: int
    step: float
    tol: float
    rows: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"gradcheck {status}: max rel err {self.max_rel_err:.3e} "
                f"(tol {self.tol:.1e}) at {self.worst_param}[{self.worst_index}] "
                f"over {self.n_checked} entries")


def grad_check(build_loss: Callable[[], Tensor], params: dict[str, Tensor],
               sample_indices: Iterable[tuple[str, int]],
               step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``build_loss`` must rebuild the scalar loss from the current parameter
    values on every call (define-by-run), so perturbing ``params[name].data``
    in place and re-evaluating gives the numerical derivative
    ``(f(x+h) - f(x-h)) / 2h``.  ``sample_indices`` picks which (parameter,
    flat index) entries to probe.  Relative error uses a 1e-5 floor in the
    denominator so that finite-difference noise on near-zero gradients does
    not read as disagreement.

    Raises ``FloatingPointError`` if any probed loss is non-finite.
    """
    loss = build_loss()
    if not np.isfinite(loss.data):
        raise FloatingPointError("loss is not finite")
    loss.backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params.items()}

    max_rel = 0.0
    worst = ("", 0)
    rows = []
    for name, flat_ix in sample_indices:
        p = params[name]
        saved = p.data.flat[flat_ix]
        with no_grad():
            p.data.flat[flat_ix] = saved + step
            up = float(build_loss().data)
            p.data.flat[flat_ix] = saved - step
            down = float(build_loss().data)
            p.data.flat[flat_ix] = saved
        if not (np.isfinite(up) and np.isfinite(down)):
            raise FloatingPointError("perturbed loss is not finite")
        fd = (up - down) / (2.0 * step)
        an = float(analytic[name].flat[flat_ix])
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-5)
        rows.append((name, int(flat_ix), an, fd, rel))
        if rel > max_rel:
            max_rel = rel
            worst = (name, flat_ix)
    return GradCheckReport(n_checked=len(rows), max_rel_err=max_rel,
                           worst_param=worst[0], worst_index=worst[1],
                           step=step, tol=tol, rows=rows)
