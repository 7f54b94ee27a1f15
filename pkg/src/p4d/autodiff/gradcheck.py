"""Central finite-difference verification of every operation's backward pass.

Each op kind gets a builder that draws a small random instance (inputs kept
away from ReLU kinks and max-pool ties so the derivative exists at the test
point) and reduces the output to a scalar through a fixed random projection.
The analytic gradient from the tape is compared against central differences
with h = 1e-5 in double precision; the reported figure is

    max |analytic - numeric| / max(|analytic| + |numeric|, 1e-3)

over every scalar of every leaf, worst case across trials.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import ops
from .core import Tape, Tensor

DEFAULT_STEP = 1e-5
PASS_THRESHOLD = 1e-4


def max_relative_error(eval_fn: Callable[[Tape | None], Tensor], leaves: list[Tensor],
                       h: float = DEFAULT_STEP) -> float:
    """Worst relative error between tape gradients and central differences.

    `eval_fn(tape)` must rebuild the computation from the leaves' current
    values and return a scalar Tensor.
    """
    for leaf in leaves:
        leaf.grad = None
    tape = Tape()
    out = eval_fn(tape)
    if out.value.size != 1:
        raise ValueError(f"gradient check needs a scalar output, got {out.value.shape}")
    tape.backward(out)
    analytic = [np.zeros_like(l.value) if l.grad is None else l.grad.copy() for l in leaves]
    worst = 0.0
    for leaf, ana in zip(leaves, analytic):
        flat = leaf.value.ravel()
        fa = ana.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            jp = float(eval_fn(None).value)
            flat[i] = orig - h
            jm = float(eval_fn(None).value)
            flat[i] = orig
            numeric = (jp - jm) / (2.0 * h)
            err = abs(fa[i] - numeric) / max(abs(fa[i]) + abs(numeric), 1e-3)
            worst = max(worst, err)
    return worst


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.uniform(0.1, 1.2, shape) * rng.choice([-1.0, 1.0], shape)


def _projection(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.normal(size=shape)


def _projected(tape, t: Tensor, proj: np.ndarray) -> Tensor:
    flatten = ops.reshape(tape, t, (-1,))
    w = Tensor(proj.reshape(-1, 1))
    return ops.reshape(tape, ops.affine(tape, ops.reshape(tape, flatten, (1, -1)), w), ())


def _well_separated(rng: np.random.Generator, shape, min_gap: float = 1e-3) -> np.ndarray:
    # resample until per-column top-two gaps are clear of the FD step
    for _ in range(50):
        x = rng.normal(size=shape)
        flat = np.sort(x.reshape(-1, shape[-1]), axis=0)
        if flat.shape[0] < 2 or np.diff(flat, axis=0).min() > min_gap:
            return x
    raise RuntimeError("could not draw well-separated values")


# --- builders: each returns (eval_fn, leaves) ------------------------------


def _build_affine(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    w = Tensor(rng.normal(size=(4, 5)))
    b = Tensor(rng.normal(size=5))
    proj = _projection(rng, (3, 5))
    return lambda tape: _projected(tape, ops.affine(tape, x, w, b), proj), [x, w, b]


def _build_relu(rng):
    x = Tensor(_away_from_zero(rng, (4, 3)))
    proj = _projection(rng, (4, 3))
    return lambda tape: _projected(tape, ops.relu(tape, x), proj), [x]


def _build_softmax(rng):
    x = Tensor(rng.normal(size=(3, 5)))
    proj = _projection(rng, (3, 5))
    return lambda tape: _projected(tape, ops.softmax(tape, x, axis=-1), proj), [x]


def _build_conv2d(rng):
    stride = int(rng.integers(1, 3))
    x = Tensor(rng.normal(size=(6, 4, 2)))
    w = Tensor(rng.normal(size=(3, 3, 2, 3)) * 0.5)
    b = Tensor(rng.normal(size=3))
    ho = (6 + 2 - 3) // stride + 1
    wo = (4 + 2 - 3) // stride + 1
    proj = _projection(rng, (ho, wo, 3))
    return (
        lambda tape: _projected(tape, ops.conv2d(tape, x, w, b, stride=stride), proj),
        [x, w, b],
    )


def _build_conv2d_batched(rng):
    x = Tensor(rng.normal(size=(2, 4, 4, 2)))
    w = Tensor(rng.normal(size=(3, 3, 2, 2)) * 0.5)
    b = Tensor(rng.normal(size=2))
    proj = _projection(rng, (2, 2, 2, 2))
    return (
        lambda tape: _projected(tape, ops.conv2d(tape, x, w, b, stride=2), proj),
        [x, w, b],
    )


def _build_conv1d_time(rng):
    stride = int(rng.integers(1, 3))
    x = Tensor(rng.normal(size=(6, 3, 3, 2)))
    w = Tensor(rng.normal(size=(3, 2, 3)) * 0.5)
    b = Tensor(rng.normal(size=3))
    to = (6 + 2 - 3) // stride + 1
    proj = _projection(rng, (to, 3, 3, 3))
    return (
        lambda tape: _projected(tape, ops.conv1d_time(tape, x, w, b, stride=stride), proj),
        [x, w, b],
    )


def _build_conv_transpose(rng):
    x = Tensor(rng.normal(size=(3, 2, 4)))
    w = Tensor(rng.normal(size=(2, 2, 4, 3)) * 0.5)
    b = Tensor(rng.normal(size=3))
    proj = _projection(rng, (6, 4, 3))
    return (
        lambda tape: _projected(tape, ops.conv_transpose(tape, x, w, b, stride=2), proj),
        [x, w, b],
    )


def _build_segment_max(rng):
    starts = np.array([0, 3, 4, 7])
    x = Tensor(_well_separated(rng, (7, 3)))
    proj = _projection(rng, (3, 3))
    return lambda tape: _projected(tape, ops.segment_max(tape, x, starts), proj), [x]


def _build_concat(rng):
    a = Tensor(rng.normal(size=(3, 2)))
    b = Tensor(rng.normal(size=(3, 4)))
    proj = _projection(rng, (3, 6))
    return lambda tape: _projected(tape, ops.concat(tape, [a, b], axis=-1), proj), [a, b]


def _build_feature_norm(rng):
    x = Tensor(rng.normal(size=(6, 4)))
    gamma = Tensor(rng.uniform(0.5, 1.5, 4))
    beta = Tensor(rng.normal(size=4))
    mask = rng.random(6) > 0.3
    mask[0] = True  # keep at least one row selected
    proj = _projection(rng, (6, 4))
    return (
        lambda tape: _projected(tape, ops.feature_norm(tape, x, gamma, beta, mask), proj),
        [x, gamma, beta],
    )


def _build_gather_cells(rng):
    fmap = Tensor(rng.normal(size=(4, 5, 3)))
    rows = rng.integers(0, 4, size=6)
    cols = rng.integers(0, 5, size=6)
    proj = _projection(rng, (6, 3))
    return (
        lambda tape: _projected(tape, ops.gather_cells(tape, fmap, rows, cols), proj),
        [fmap],
    )


def _build_scatter_mean(rng):
    v = Tensor(rng.normal(size=(6, 2)))
    rows = rng.integers(0, 3, size=6)
    cols = rng.integers(0, 3, size=6)
    proj = _projection(rng, (3, 3, 2))
    return (
        lambda tape: _projected(tape, ops.scatter_mean(tape, v, rows, cols, 3, 3), proj),
        [v],
    )


def _build_scatter_rows(rng):
    v = Tensor(rng.normal(size=(4, 2)))
    cells = rng.choice(9, size=4, replace=False)
    rows, cols = cells // 3, cells % 3
    proj = _projection(rng, (3, 3, 2))
    return (
        lambda tape: _projected(tape, ops.scatter_rows(tape, v, rows, cols, 3, 3), proj),
        [v],
    )


def _build_mix_static(rng):
    feats = Tensor(rng.normal(size=(3, 4, 2)))
    w = Tensor(rng.normal(size=3))
    proj = _projection(rng, (4, 2))
    return lambda tape: _projected(tape, ops.mix_static(tape, feats, w), proj), [feats, w]


def _build_mix_dynamic(rng):
    feats = Tensor(rng.normal(size=(3, 4, 2)))
    w = Tensor(rng.normal(size=(4, 3)))
    proj = _projection(rng, (4, 2))
    return lambda tape: _projected(tape, ops.mix_dynamic(tape, feats, w), proj), [feats, w]


def _build_mean_over_axes(rng):
    x = Tensor(rng.normal(size=(4, 3, 2)))
    proj = _projection(rng, (2,))
    return lambda tape: _projected(tape, ops.mean_over_axes(tape, x, (0, 1)), proj), [x]


def _build_tile_to_map(rng):
    v = Tensor(rng.normal(size=3))
    proj = _projection(rng, (2, 4, 3))
    return lambda tape: _projected(tape, ops.tile_to_map(tape, v, 2, 4), proj), [v]


def _build_slice_channels(rng):
    x = Tensor(rng.normal(size=(3, 6)))
    proj = _projection(rng, (3, 2))
    return lambda tape: _projected(tape, ops.slice_channels(tape, x, 1, 3), proj), [x]


def _build_bce(rng):
    logits = Tensor(rng.normal(size=(4, 3)))
    targets = rng.integers(0, 2, size=(4, 3)).astype(float)
    mask = rng.random((4, 3)) > 0.25
    mask[0, 0] = True
    return lambda tape: ops.binary_cross_entropy_logits(tape, logits, targets, mask), [logits]


def _build_squared_error(rng):
    pred = Tensor(rng.normal(size=(4, 3)))
    targets = rng.normal(size=(4, 3))
    mask = rng.random(4) > 0.25
    mask[0] = True
    return lambda tape: ops.squared_error_mean(tape, pred, targets, mask), [pred]


def _build_mul_constant(rng):
    x = Tensor(rng.normal(size=(4, 3)))
    c = rng.normal(size=(4, 3))
    proj = _projection(rng, (4, 3))
    return lambda tape: _projected(tape, ops.mul_constant(tape, x, c), proj), [x]


def _build_chain(rng):
    # affine -> relu -> softmax composition, end-to-end chain rule
    x = Tensor(rng.normal(size=(2, 4)))
    w = Tensor(rng.normal(size=(4, 4)))
    b = Tensor(_away_from_zero(rng, 4))
    proj = _projection(rng, (2, 4))

    def run(tape):
        h1 = ops.affine(tape, x, w, b)
        h2 = ops.relu(tape, h1)
        return _projected(tape, ops.softmax(tape, h2, axis=-1), proj)

    return run, [x, w, b]


OP_KINDS: dict[str, Callable] = {
    "affine": _build_affine,
    "relu": _build_relu,
    "softmax": _build_softmax,
    "conv2d": _build_conv2d,
    "conv2d_batched": _build_conv2d_batched,
    "conv1d_time": _build_conv1d_time,
    "conv_transpose": _build_conv_transpose,
    "max_pool": _build_segment_max,
    "concat": _build_concat,
    "feature_norm": _build_feature_norm,
    "gather_cells": _build_gather_cells,
    "scatter_mean": _build_scatter_mean,
    "scatter_rows": _build_scatter_rows,
    "mix_static": _build_mix_static,
    "mix_dynamic": _build_mix_dynamic,
    "mean_over_axes": _build_mean_over_axes,
    "mul_constant": _build_mul_constant,
    "tile_to_map": _build_tile_to_map,
    "slice_channels": _build_slice_channels,
    "bce_logits": _build_bce,
    "squared_error": _build_squared_error,
    "chain_affine_relu_softmax": _build_chain,
}


def finite_diff_check(kind: str, trial_count: int = 5, seed: int = 0) -> float:
    """Worst relative gradient error for one op kind over random trials."""
    if kind not in OP_KINDS:
        raise KeyError(f"unknown op kind {kind!r}; known: {sorted(OP_KINDS)}")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trial_count):
        eval_fn, leaves = OP_KINDS[kind](rng)
        worst = max(worst, max_relative_error(eval_fn, leaves))
    return worst


def check_all_ops(trial_count: int = 5, seed: int = 0) -> dict[str, float]:
    return {
        kind: finite_diff_check(kind, trial_count, seed + i)
        for i, kind in enumerate(OP_KINDS)
    }
