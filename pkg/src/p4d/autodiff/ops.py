"""Differentiable operations with explicit forward and backward passes.

Conventions:
- channel axis is last everywhere
- every op takes the tape first; `tape=None` skips recording (inference)
- convolutions use 'same' padding; col2im scatters run through a single
  bincount over precomputed flat indices, cached per shape
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Tape, Tensor, accumulate_grad


class ShapeError(ValueError):
    pass


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def constant(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# dense / elementwise


def affine(tape: Tape | None, x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b over the trailing axis; leading axes are preserved."""
    fin, fout = w.value.shape
    _require(
        x.value.shape[-1] == fin,
        f"affine: input features {x.value.shape[-1]} != weight rows {fin}",
    )
    y = x.value @ w.value
    if b is not None:
        _require(b.value.shape == (fout,), f"affine: bias shape {b.value.shape} != ({fout},)")
        y = y + b.value
    out = Tensor(y)
    if tape is not None:
        def back():
            if out.grad is None:
                return
            g2 = out.grad.reshape(-1, fout)
            x2 = x.value.reshape(-1, fin)
            accumulate_grad(x, (g2 @ w.value.T).reshape(x.value.shape))
            accumulate_grad(w, x2.T @ g2)
            if b is not None:
                accumulate_grad(b, g2.sum(axis=0))
        tape.record(back)
    return out


def relu(tape: Tape | None, x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.value, 0.0))
    if tape is not None:
        def back():
            if out.grad is None:
                return
            accumulate_grad(x, out.grad * (x.value > 0.0))
        tape.record(back)
    return out


def add(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    _require(a.value.shape == b.value.shape, f"add: {a.value.shape} vs {b.value.shape}")
    out = Tensor(a.value + b.value)
    if tape is not None:
        def back():
            if out.grad is None:
                return
            accumulate_grad(a, out.grad)
            accumulate_grad(b, out.grad)
        tape.record(back)
    return out


def scale(tape: Tape | None, x: Tensor, c: float) -> Tensor:
    out = Tensor(x.value * c)
    if tape is not None:
        def back():
            if out.grad is None:
                return
            accumulate_grad(x, out.grad * c)
        tape.record(back)
    return out


def mul_constant(tape: Tape | None, x: Tensor, const: np.ndarray) -> Tensor:
    """Elementwise multiply by a fixed (non-learned) array, broadcasting."""
    c = np.asarray(const, dtype=x.value.dtype)
    out = Tensor(x.value * c)
    if tape is not None:
        def back():
            if out.grad is None:
                return
            g = out.grad * c
            if g.shape != x.value.shape:  # undo broadcast of x
                extra = g.ndim - x.value.ndim
                g = g.sum(axis=tuple(range(extra)))
                keep = tuple(i for i, s in enumerate(x.value.shape) if s == 1)
                if keep:
                    g = g.sum(axis=keep, keepdims=True)
            accumulate_grad(x, g)
        tape.record(back)
    return out


def softmax(tape: Tape | None, x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)
    if tape is not None:
        def back():
            if out.grad is None:
                return
            g = out.grad
            dot = (g * y).sum(axis=axis, keepdims=True)
            accumulate_grad(x, y * (g - dot))
        tape.record(back)
    return out


def concat(tape: Tape | None, parts: list[Tensor], axis: int = -1) -> Tensor:
    _require(len(parts) > 0, "concat: need at least one input")
    out = Tensor(np.concatenate([p.value for p in parts], axis=axis))
    if tape is not None:
        sizes = [p.value.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)
        def back():
            if out.grad is None:
                return
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(lo, hi)
                accumulate_grad(p, out.grad[tuple(sl)])
        tape.record(back)
    return out


def reshape(tape: Tape | None, x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.value.reshape(shape))
    if tape is not None:
        def back():
            if out.grad is None:
                return
            accumulate_grad(x, out.grad.reshape(x.value.shape))
        tape.record(back)
    return out


def slice_channels(tape: Tape | None, x: Tensor, lo: int, hi: int) -> Tensor:
    _require(0 <= lo < hi <= x.value.shape[-1], f"slice_channels: [{lo},{hi}) of {x.value.shape}")
    out = Tensor(x.value[..., lo:hi])
    if tape is not None:
        def back():
            if out.grad is None:
                return
            g = np.zeros_like(x.value)
            g[..., lo:hi] = out.grad
            accumulate_grad(x, g)
        tape.record(back)
    return out


def mean_over_axes(tape: Tape | None, x: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(x.value.mean(axis=axes))
    if tape is not None:
        count = 1
        for a in axes:
            count *= x.value.shape[a]
        def back():
            if out.grad is None:
                return
            g = np.expand_dims(out.grad, axes) / count
            accumulate_grad(x, np.broadcast_to(g, x.value.shape).copy())
        tape.record(back)
    return out


def tile_to_map(tape: Tape | None, vec: Tensor, height: int, width: int) -> Tensor:
    """Broadcast a (C,) vector to an (H, W, C) map."""
    _require(vec.value.ndim == 1, f"tile_to_map: expected vector, got {vec.value.shape}")
    out = Tensor(np.broadcast_to(vec.value, (height, width, vec.value.shape[0])).copy())
    if tape is not None:
        def back():
            if out.grad is None:
                return
            accumulate_grad(vec, out.grad.sum(axis=(0, 1)))
        tape.record(back)
    return out


# ---------------------------------------------------------------------------
# normalization

_NORM_EPS = 1e-5


def feature_norm(
    tape: Tape | None,
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Per-channel standardization with learned scale and shift.

    Mean and variance are computed per forward pass over the positions
    selected by `mask` (all positions when mask is None); there are no
    running statistics. Outputs are produced at every position.
    """
    c = x.value.shape[-1]
    _require(gamma.value.shape == (c,), f"feature_norm: gamma {gamma.value.shape} != ({c},)")
    _require(beta.value.shape == (c,), f"feature_norm: beta {beta.value.shape} != ({c},)")
    flat = x.value.reshape(-1, c)
    if mask is None:
        sel = flat
        mask_flat = None
        m = flat.shape[0]
    else:
        mask_flat = np.asarray(mask, dtype=bool).reshape(-1)
        _require(
            mask_flat.shape[0] == flat.shape[0],
            f"feature_norm: mask covers {mask_flat.shape[0]} rows, input has {flat.shape[0]}",
        )
        sel = flat[mask_flat]
        m = max(int(mask_flat.sum()), 1)
    mu = sel.mean(axis=0) if sel.shape[0] else np.zeros(c)
    var = sel.var(axis=0) if sel.shape[0] else np.zeros(c)
    inv = 1.0 / np.sqrt(var + _NORM_EPS)
    xhat = (flat - mu) * inv
    y = xhat * gamma.value + beta.value
    out = Tensor(y.reshape(x.value.shape))
    if tape is not None:
        def back():
            if out.grad is None:
                return
            g = out.grad.reshape(-1, c)
            s1 = g.sum(axis=0)
            s2 = (g * xhat).sum(axis=0)
            dx = g.copy()
            if mask_flat is None:
                dx -= (s1 + xhat * s2) / m
            else:
                dx[mask_flat] -= (s1 + xhat[mask_flat] * s2) / m
            dx *= gamma.value * inv
            accumulate_grad(x, dx.reshape(x.value.shape))
            accumulate_grad(gamma, s2)
            accumulate_grad(beta, s1)
        tape.record(back)
    return out


# ---------------------------------------------------------------------------
# convolutions

_COL2IM_CACHE: dict[tuple, np.ndarray] = {}


def _col2im_indices(lead: int, hp: int, wp: int, c: int, kh: int, kw: int, stride: int,
                    ho: int, wo: int) -> np.ndarray:
    key = (lead, hp, wp, c, kh, kw, stride)
    idx = _COL2IM_CACHE.get(key)
    if idx is None:
        rows = (np.arange(ho) * stride)[:, None] + np.arange(kh)[None, :]  # (ho, kh)
        cols = (np.arange(wo) * stride)[:, None] + np.arange(kw)[None, :]  # (wo, kw)
        pos = rows[:, None, :, None] * wp + cols[None, :, None, :]  # (ho, wo, kh, kw)
        idx = (pos[..., None] * c + np.arange(c)).ravel()
        if lead > 1:
            idx = (idx[None, :] + (np.arange(lead) * (hp * wp * c))[:, None]).ravel()
        _COL2IM_CACHE[key] = idx
    return idx


def conv2d(tape: Tape | None, x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1) -> Tensor:
    """Same-padded KxK convolution on (..., H, W, C); leading axes batched."""
    kh, kw, cin, cout = w.value.shape
    _require(
        x.value.shape[-1] == cin,
        f"conv2d: input channels {x.value.shape[-1]} != kernel channels {cin}",
    )
    lead_shape = x.value.shape[:-3]
    h, wd = x.value.shape[-3:-1]
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x.value, [(0, 0)] * len(lead_shape) + [(ph, ph), (pw, pw), (0, 0)])
    win = sliding_window_view(xp, (kh, kw), axis=(-3, -2))  # (..., h', w', C, kh, kw)
    win = win[..., ::stride, ::stride, :, :, :]
    ho, wo = win.shape[-5], win.shape[-4]
    cols = np.ascontiguousarray(np.moveaxis(win, -3, -1))  # (..., ho, wo, kh, kw, C)
    cols2 = cols.reshape(-1, kh * kw * cin)
    w2 = w.value.reshape(kh * kw * cin, cout)
    y = cols2 @ w2
    if b is not None:
        y += b.value
    out = Tensor(y.reshape(lead_shape + (ho, wo, cout)))
    if tape is not None:
        lead = int(np.prod(lead_shape)) if lead_shape else 1
        hp, wp = h + 2 * ph, wd + 2 * pw
        def back():
            if out.grad is None:
                return
            g2 = out.grad.reshape(-1, cout)
            accumulate_grad(w, (cols2.T @ g2).reshape(w.value.shape))
            if b is not None:
                accumulate_grad(b, g2.sum(axis=0))
            dcols = g2 @ w2.T
            idx = _col2im_indices(lead, hp, wp, cin, kh, kw, stride, ho, wo)
            dxp = np.bincount(idx, weights=dcols.ravel(), minlength=lead * hp * wp * cin)
            dxp = dxp.reshape((lead, hp, wp, cin)).astype(x.value.dtype, copy=False)
            dx = dxp[:, ph:ph + h, pw:pw + wd, :].reshape(x.value.shape)
            accumulate_grad(x, dx)
        tape.record(back)
    return out


def conv1d_time(tape: Tape | None, x: Tensor, w: Tensor, b: Tensor | None = None,
                stride: int = 1) -> Tensor:
    """Same-padded temporal convolution on (T, ..., C) along the first axis."""
    kt, cin, cout = w.value.shape
    _require(
        x.value.shape[-1] == cin,
        f"conv1d_time: input channels {x.value.shape[-1]} != kernel channels {cin}",
    )
    t = x.value.shape[0]
    mid_shape = x.value.shape[1:-1]
    pt = (kt - 1) // 2
    xp = np.pad(x.value, [(pt, pt)] + [(0, 0)] * (x.value.ndim - 1))
    win = sliding_window_view(xp, kt, axis=0)  # (t', ..., C, kt)
    win = win[::stride]
    to = win.shape[0]
    cols = np.ascontiguousarray(np.moveaxis(win, -1, -2))  # (to, ..., kt, C)
    cols2 = cols.reshape(-1, kt * cin)
    w2 = w.value.reshape(kt * cin, cout)
    y = cols2 @ w2
    if b is not None:
        y += b.value
    out = Tensor(y.reshape((to,) + mid_shape + (cout,)))
    if tape is not None:
        mid = int(np.prod(mid_shape)) if mid_shape else 1
        tp = t + 2 * pt
        def back():
            if out.grad is None:
                return
            g2 = out.grad.reshape(-1, cout)
            accumulate_grad(w, (cols2.T @ g2).reshape(w.value.shape))
            if b is not None:
                accumulate_grad(b, g2.sum(axis=0))
            dcols = (g2 @ w2.T).reshape(to, mid, kt, cin)
            # scatter back along the padded time axis
            dxp = np.zeros((tp, mid, cin), dtype=x.value.dtype)
            for a in range(kt):
                rows = np.arange(to) * stride + a
                np.add.at(dxp, rows, dcols[:, :, a, :])
            dx = dxp[pt:pt + t].reshape(x.value.shape)
            accumulate_grad(x, dx)
        tape.record(back)
    return out


def conv_transpose(tape: Tape | None, x: Tensor, w: Tensor, b: Tensor | None = None,
                   stride: int = 2) -> Tensor:
    """Non-overlapping transposed convolution (kernel size = stride).

    Each input cell expands into a stride x stride output block; this is the
    learned-upsampling form used to bring coarse maps back to the output
    grid resolution.
    """
    s = stride
    _require(w.value.ndim == 4 and w.value.shape[0] == s and w.value.shape[1] == s,
             f"conv_transpose: kernel {w.value.shape} must be ({s},{s},cin,cout)")
    _, _, cin, cout = w.value.shape
    _require(
        x.value.shape[-1] == cin,
        f"conv_transpose: input channels {x.value.shape[-1]} != kernel channels {cin}",
    )
    h, wd = x.value.shape[-3:-1]
    _require(x.value.ndim == 3, f"conv_transpose: expected (H, W, C), got {x.value.shape}")
    x2 = x.value.reshape(-1, cin)
    w2 = w.value.transpose(2, 0, 1, 3).reshape(cin, s * s * cout)
    yblk = (x2 @ w2).reshape(h, wd, s, s, cout)
    y = yblk.transpose(0, 2, 1, 3, 4).reshape(h * s, wd * s, cout)
    if b is not None:
        y = y + b.value
    out = Tensor(y)
    if tape is not None:
        def back():
            if out.grad is None:
                return
            gblk = out.grad.reshape(h, s, wd, s, cout).transpose(0, 2, 1, 3, 4)
            g2 = gblk.reshape(-1, s * s * cout)
            if b is not None:
                accumulate_grad(b, out.grad.sum(axis=(0, 1)))
            dw2 = x2.T @ g2
            accumulate_grad(w, dw2.reshape(cin, s, s, cout).transpose(1, 2, 0, 3))
            accumulate_grad(x, (g2 @ w2.T).reshape(x.value.shape))
        tape.record(back)
    return out


# ---------------------------------------------------------------------------
# pooling / gather / scatter


def segment_max(tape: Tape | None, x: Tensor, starts: np.ndarray) -> Tensor:
    """Per-segment column-wise max over contiguous row blocks.

    `starts` holds P+1 boundaries into the rows of x (R, C); every segment
    must be non-empty. Gradients route to the first maximal row of each
    segment (ties broken by lowest row index).
    """
    starts = np.asarray(starts, dtype=np.int64)
    r, c = x.value.shape
    _require(starts[0] == 0 and starts[-1] == r, "segment_max: boundaries must cover all rows")
    _require(np.all(np.diff(starts) > 0), "segment_max: empty segment")
    y = np.maximum.reduceat(x.value, starts[:-1], axis=0)
    out = Tensor(y)
    if tape is not None:
        seg_of_row = np.repeat(np.arange(len(starts) - 1), np.diff(starts))
        def back():
            if out.grad is None:
                return
            # first row index achieving the max, per segment and channel
            expanded = y[seg_of_row]  # (R, C)
            rows = np.where(x.value == expanded, np.arange(r)[:, None], r)
            argmax = np.minimum.reduceat(rows, starts[:-1], axis=0)  # (P, C)
            dx = np.zeros_like(x.value)
            cols_idx = np.broadcast_to(np.arange(c), argmax.shape)
            np.add.at(dx, (argmax.ravel(), cols_idx.ravel()), out.grad.ravel())
            accumulate_grad(x, dx)
        tape.record(back)
    return out


def gather_cells(tape: Tape | None, fmap: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Pick (H, W, C) map values at integer cells; returns (P, C)."""
    h, w, c = fmap.value.shape
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    _require(rows.min(initial=0) >= 0 and (rows.max(initial=0) < h if rows.size else True),
             f"gather_cells: row index out of range for map {fmap.value.shape}")
    _require(cols.min(initial=0) >= 0 and (cols.max(initial=0) < w if cols.size else True),
             f"gather_cells: col index out of range for map {fmap.value.shape}")
    out = Tensor(fmap.value[rows, cols])
    if tape is not None:
        def back():
            if out.grad is None:
                return
            flat_idx = ((rows * w + cols)[:, None] * c + np.arange(c)).ravel()
            dm = np.bincount(flat_idx, weights=out.grad.ravel(), minlength=h * w * c)
            accumulate_grad(fmap, dm.reshape(h, w, c).astype(fmap.value.dtype, copy=False))
        tape.record(back)
    return out


def scatter_mean(tape: Tape | None, vectors: Tensor, rows: np.ndarray, cols: np.ndarray,
                 height: int, width: int) -> Tensor:
    """Average (P, C) vectors into their (row, col) cells of an (H, W, C) map.

    Cells receiving no vector stay exactly zero; cells receiving several
    vectors store their mean, which keeps magnitudes stable when many
    source cells collapse onto one coarse cell.
    """
    p, c = vectors.value.shape
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    cell = rows * width + cols
    counts = np.bincount(cell, minlength=height * width)
    flat_idx = (cell[:, None] * c + np.arange(c)).ravel()
    sums = np.bincount(flat_idx, weights=vectors.value.ravel(), minlength=height * width * c)
    denom = np.maximum(counts, 1).astype(vectors.value.dtype)
    y = (sums.reshape(height * width, c) / denom[:, None]).reshape(height, width, c)
    y = y.astype(vectors.value.dtype, copy=False)
    out = Tensor(y)
    if tape is not None:
        def back():
            if out.grad is None:
                return
            g = out.grad.reshape(height * width, c) / denom[:, None]
            accumulate_grad(vectors, g[cell])
        tape.record(back)
    return out


def scatter_rows(tape: Tape | None, vectors: Tensor, rows: np.ndarray, cols: np.ndarray,
                 height: int, width: int) -> Tensor:
    """Place (P, C) vectors at unique (row, col) cells of a zero (H, W, C) map."""
    p, c = vectors.value.shape
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    y = np.zeros((height, width, c), dtype=vectors.value.dtype)
    y[rows, cols] = vectors.value
    out = Tensor(y)
    if tape is not None:
        def back():
            if out.grad is None:
                return
            accumulate_grad(vectors, out.grad[rows, cols])
        tape.record(back)
    return out


# ---------------------------------------------------------------------------
# candidate mixing (connection weighting)


def mix_static(tape: Tape | None, feats: Tensor, weights: Tensor) -> Tensor:
    """Sum_b weights[b] * feats[b] for feats (B, P, C) and weights (B,)."""
    bcount = feats.value.shape[0]
    _require(weights.value.shape == (bcount,),
             f"mix_static: weights {weights.value.shape} vs {bcount} candidates")
    y = np.einsum("bpc,b->pc", feats.value, weights.value)
    out = Tensor(y)
    if tape is not None:
        def back():
            if out.grad is None:
                return
            accumulate_grad(feats, out.grad[None] * weights.value[:, None, None])
            accumulate_grad(weights, np.einsum("pc,bpc->b", out.grad, feats.value))
        tape.record(back)
    return out


def mix_dynamic(tape: Tape | None, feats: Tensor, weights: Tensor) -> Tensor:
    """Per-row mixing: feats (B, P, C) with weights (P, B) -> (P, C)."""
    bcount, p, _ = feats.value.shape
    _require(weights.value.shape == (p, bcount),
             f"mix_dynamic: weights {weights.value.shape} vs ({p},{bcount})")
    y = np.einsum("bpc,pb->pc", feats.value, weights.value)
    out = Tensor(y)
    if tape is not None:
        def back():
            if out.grad is None:
                return
            accumulate_grad(feats, np.einsum("pc,pb->bpc", out.grad, weights.value))
            accumulate_grad(weights, np.einsum("pc,bpc->pb", out.grad, feats.value))
        tape.record(back)
    return out


def stack(tape: Tape | None, parts: list[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    shape = parts[0].value.shape
    for p in parts:
        _require(p.value.shape == shape, f"stack: {p.value.shape} vs {shape}")
    out = Tensor(np.stack([p.value for p in parts], axis=0))
    if tape is not None:
        def back():
            if out.grad is None:
                return
            for i, p in enumerate(parts):
                accumulate_grad(p, out.grad[i])
        tape.record(back)
    return out


# ---------------------------------------------------------------------------
# losses


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def binary_cross_entropy_logits(tape: Tape | None, logits: Tensor,
                                targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean BCE over the positions selected by mask."""
    t = np.asarray(targets, dtype=float)
    m = np.asarray(mask, dtype=bool)
    _require(t.shape == logits.value.shape, f"bce: targets {t.shape} vs logits {logits.value.shape}")
    _require(m.shape == logits.value.shape, f"bce: mask {m.shape} vs logits {logits.value.shape}")
    count = max(int(m.sum()), 1)
    x = logits.value
    per = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = Tensor(np.asarray(per[m].sum() / count))
    if tape is not None:
        def back():
            if out.grad is None:
                return
            g = (sigmoid(x) - t) * m / count
            accumulate_grad(logits, (g * out.grad).astype(x.dtype, copy=False))
        tape.record(back)
    return out


def squared_error_mean(tape: Tape | None, pred: Tensor, targets: np.ndarray,
                       mask: np.ndarray) -> Tensor:
    """Mean of (pred - target)^2 over elements whose leading mask is true.

    mask covers pred.shape[:-1]; the final axis elements of each selected
    position all contribute.
    """
    t = np.asarray(targets, dtype=float)
    m = np.asarray(mask, dtype=bool)
    _require(t.shape == pred.value.shape, f"mse: targets {t.shape} vs pred {pred.value.shape}")
    _require(m.shape == pred.value.shape[:-1], f"mse: mask {m.shape} vs {pred.value.shape[:-1]}")
    k = pred.value.shape[-1]
    count = max(int(m.sum()) * k, 1)
    diff = (pred.value - t) * m[..., None]
    out = Tensor(np.asarray((diff * diff).sum() / count))
    if tape is not None:
        def back():
            if out.grad is None:
                return
            g = (2.0 / count) * diff * out.grad
            accumulate_grad(pred, g.astype(pred.value.dtype, copy=False))
        tape.record(back)
    return out
