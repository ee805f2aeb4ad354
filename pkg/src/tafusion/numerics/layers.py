"""Layer primitives built on :mod:`tensor`.

Layers are plain functions that read weights out of a
:class:`~tafusion.numerics.params.ParameterSet` by name prefix.  Inputs are
batch-first; most layers also accept unbatched input.
"""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError, EmptySequenceError, VocabularyError
from .params import ParameterSet
from .tensor import (Tensor, _emit, _rowsum, as_tensor, concat, getitem, matmul, mul, relu,
                     reshape, sigmoid, softmax, stack, swapaxes, tanh, transpose)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    x = as_tensor(x)
    if x.ndim < 2 or W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    y = matmul(x, W)
    if b is not None:
        if b.shape != (W.shape[1],):
            raise DimensionError(f"linear: bias {b.shape} does not match weight {W.shape}")
        y = y + b
    return y


def dense(x: Tensor, ps: ParameterSet, name: str) -> Tensor:
    b = ps[f"{name}.b"] if f"{name}.b" in ps else None
    return linear(x, ps[f"{name}.W"], b)


def mlp(x: Tensor, ps: ParameterSet, name: str, n_layers: int, final_relu: bool = False) -> Tensor:
    for i in range(n_layers):
        x = dense(x, ps, f"{name}.{i}")
        if i < n_layers - 1 or final_relu:
            x = relu(x)
    return x


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    V, d = table.shape
    if ids.size:
        bad = ids[(ids < 0) | (ids >= V)]
        if bad.size:
            raise VocabularyError(f"token id {int(bad[0])} out of range for vocabulary of {V}")

    def vjp(g):
        full = np.zeros((V, d))
        np.add.at(full, ids.reshape(-1), g.reshape(-1, d))
        return (full,)

    return _emit("embedding", table.data[ids.reshape(-1)].reshape(ids.shape + (d,)), (table,), vjp)


def mean_pool(rows: Tensor) -> Tensor:
    """Mean over the row axis (-2), accumulated strictly in ascending row order."""
    rows = as_tensor(rows)
    if rows.ndim < 2:
        raise DimensionError(f"mean_pool expects rows x width, got {rows.shape}")
    n = rows.shape[-2]
    if n == 0:
        raise EmptySequenceError("mean_pool over zero rows")
    shape = rows.shape
    total = np.cumsum(rows.data, axis=-2)[..., -1, :]

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g / n, -2), shape).copy(),)

    return _emit("mean_pool", total / n, (rows,), vjp)


def canonical_row_order(rows: np.ndarray) -> np.ndarray:
    """Indices sorting rows lexicographically; a fixed order for pooling."""
    rows = np.asarray(rows)
    if rows.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.lexsort(rows.T[::-1])


def scaled_dot_attention(Q: Tensor, K: Tensor, V: Tensor, return_weights: bool = False):
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    if Q.shape[-1] != K.shape[-1]:
        raise DimensionError(f"attention: query width {Q.shape} != key width {K.shape}")
    if K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"attention: key length {K.shape} != value length {V.shape}")
    d = Q.shape[-1]
    scores = mul(matmul(Q, swapaxes(K, -1, -2)), 1.0 / np.sqrt(d))
    # Cauchy-Schwarz bound on every score in a row, cheaper than the row maximum
    qn = np.sqrt(_rowsum(Q.data * Q.data, -1))
    kn = np.sqrt((K.data * K.data).sum(axis=-1)).max(axis=-1)[..., None, None]
    w = softmax(scores, axis=-1, shift=qn * kn / np.sqrt(d))
    out = matmul(w, V)
    return (out, w) if return_weights else out


# ------------------------------------------------------------------ convolution


def conv1d(x: Tensor, W: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """x: (B, C_in, L), W: (C_out, C_in, k) -> (B, C_out, L_out)."""
    x = as_tensor(x)
    if x.ndim != 3 or W.ndim != 3 or x.shape[1] != W.shape[1]:
        raise DimensionError(f"conv1d: input {x.shape} incompatible with kernel {W.shape}")
    B, C, L = x.shape
    O, _, k = W.shape
    Lp = L + 2 * padding
    if Lp < k:
        raise DimensionError(f"conv1d: length {L} (padded {Lp}) shorter than kernel {k}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    L_out = (Lp - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, ::stride, :][:, :, :L_out]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B * L_out, C * k)
    Wm = W.data.reshape(O, C * k)
    y = cols @ Wm.T
    if b is not None:
        y = y + b.data
    out = y.reshape(B, L_out, O).transpose(0, 2, 1)

    def vjp(g):
        gt = g.transpose(0, 2, 1).reshape(B * L_out, O)
        gW = (gt.T @ cols).reshape(O, C, k) if W.requires_grad else None
        gb = gt.sum(axis=0) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            gcols = (gt @ Wm).reshape(B, L_out, C, k)
            gxp = np.zeros((B, C, Lp))
            span = stride * (L_out - 1) + 1
            for j in range(k):
                gxp[:, :, j:j + span:stride] += gcols[:, :, :, j].transpose(0, 2, 1)
            gx = gxp[:, :, padding:padding + L]
        return (gx, gW, gb) if b is not None else (gx, gW)

    inputs = (x, W, b) if b is not None else (x, W)
    return _emit("conv1d", np.ascontiguousarray(out), inputs, vjp)


def conv(x: Tensor, ps: ParameterSet, name: str, stride: int = 1, padding: int | None = None) -> Tensor:
    W = ps[f"{name}.W"]
    if padding is None:
        padding = (W.shape[2] - 1) // 2
    return conv1d(x, W, ps[f"{name}.b"], stride=stride, padding=padding)


def residual_conv1d_block(x: Tensor, ps: ParameterSet, name: str) -> Tensor:
    """Pre-activation block: skip(x) + conv2(relu(conv1(relu(x)))), length preserved."""
    k = ps[f"{name}.conv1.W"].shape[2]
    if x.shape[-1] < k:
        raise DimensionError(f"residual block {name}: length {x.shape[-1]} < kernel {k}")
    h = conv(relu(x), ps, f"{name}.conv1")
    h = conv(relu(h), ps, f"{name}.conv2")
    skip = conv(x, ps, f"{name}.proj", padding=0) if f"{name}.proj.W" in ps else x
    return skip + h


def residual_stack(x: Tensor, ps: ParameterSet, name: str, n_blocks: int) -> Tensor:
    for i in range(n_blocks):
        x = residual_conv1d_block(x, ps, f"{name}.{i}")
    return x


# ------------------------------------------------------------------ recurrent


def _batched(seq: Tensor):
    seq = as_tensor(seq)
    if seq.ndim == 2:
        return reshape(seq, (1,) + seq.shape), True
    if seq.ndim != 3:
        raise DimensionError(f"sequence must be (T, d) or (B, T, d), got {seq.shape}")
    return seq, False


def lstm_forward(seq: Tensor, ps: ParameterSet, name: str, reverse: bool = False):
    """Returns (per-step hidden states aligned to input positions, final hidden)."""
    seq, single = _batched(seq)
    B, T, _ = seq.shape
    if T == 0:
        raise EmptySequenceError("LSTM over an empty sequence")
    Wx, Wh, b = ps[f"{name}.Wx"], ps[f"{name}.Wh"], ps[f"{name}.b"]
    H = Wh.shape[0]
    xw = linear(seq, Wx, b)
    h = Tensor(np.zeros((B, H)))
    c = Tensor(np.zeros((B, H)))
    outs: list[Tensor] = [None] * T  # type: ignore[list-item]
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        gates = getitem(xw, (slice(None), t)) + matmul(h, Wh)
        i = sigmoid(gates[:, 0:H])
        f = sigmoid(gates[:, H:2 * H])
        g = tanh(gates[:, 2 * H:3 * H])
        o = sigmoid(gates[:, 3 * H:4 * H])
        c = f * c + i * g
        h = o * tanh(c)
        outs[t] = h
    steps = stack(outs, axis=1)
    if single:
        return reshape(steps, (T, H)), reshape(h, (H,))
    return steps, h


def bilstm_forward(seq: Tensor, ps: ParameterSet, name: str):
    """Returns (per-step (.., T, 2H), summary (.., 2H)).

    The summary joins the forward direction's last state with the backward
    direction's last state (which sits at position 0).
    """
    fw_steps, fw_last = lstm_forward(seq, ps, f"{name}.fw")
    bw_steps, bw_last = lstm_forward(seq, ps, f"{name}.bw", reverse=True)
    return concat([fw_steps, bw_steps], axis=-1), concat([fw_last, bw_last], axis=-1)


def gru_forward(seq: Tensor, ps: ParameterSet, name: str):
    seq, single = _batched(seq)
    B, T, _ = seq.shape
    if T == 0:
        raise EmptySequenceError("GRU over an empty sequence")
    Wh = ps[f"{name}.Wh"]
    H = Wh.shape[0]
    xw = linear(seq, ps[f"{name}.Wx"], ps[f"{name}.bx"])
    h = Tensor(np.zeros((B, H)))
    outs = []
    for t in range(T):
        xt = getitem(xw, (slice(None), t))
        hw = linear(h, Wh, ps[f"{name}.bh"])
        r = sigmoid(xt[:, 0:H] + hw[:, 0:H])
        z = sigmoid(xt[:, H:2 * H] + hw[:, H:2 * H])
        n = tanh(xt[:, 2 * H:] + r * hw[:, 2 * H:])
        h = (1.0 - z) * n + z * h
        outs.append(h)
    steps = stack(outs, axis=1)
    if single:
        return reshape(steps, (T, H)), reshape(h, (H,))
    return steps, h


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, L) -> (B, C)."""
    return x.mean(axis=-1)


def channels_last(x: Tensor) -> Tensor:
    """(B, C, L) -> (B, L, C)."""
    return transpose(x, (0, 2, 1))
