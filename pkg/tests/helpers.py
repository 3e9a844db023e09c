"""Shared test oracles, independent of the implementations they check."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from kwbias.autodiff import Tape, backward
from kwbias.rng import stream
from kwbias.training import TRAINABLE_GROUPS, set_trainable


def finite_difference(fn, tensor, index, h: float = 1e-5) -> float:
    """Central finite difference of a scalar-valued fn at one coordinate."""
    orig = tensor.data[index]
    tensor.data[index] = orig + h
    up = fn()
    tensor.data[index] = orig - h
    down = fn()
    tensor.data[index] = orig
    return (up - down) / (2.0 * h)


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def brute_force_edit_distance(ref: list[str], hyp: list[str]) -> int:
    """Second, independent edit-distance implementation (memoized recursion)."""

    @lru_cache(maxsize=None)
    def go(i: int, j: int) -> int:
        if i == len(ref):
            return len(hyp) - j
        if j == len(hyp):
            return len(ref) - i
        if ref[i] == hyp[j]:
            return go(i + 1, j + 1)
        return 1 + min(go(i + 1, j + 1), go(i + 1, j), go(i, j + 1))

    return go(0, 0)


def gradcheck_modes(params, loss_builders, n_coords=20, h=1e-5):
    """Analytic-vs-finite-difference check per mode; returns worst rel errors.

    `loss_builders` maps mode -> zero-argument callable building the loss
    Tensor from the current parameter values (pure in the parameters).
    Frozen groups are asserted to carry exactly zero gradient.
    """
    results = {}
    for mode, build in loss_builders.items():
        set_trainable(params, mode)
        with Tape():
            loss = build()
            backward(loss)

        def loss_value() -> float:
            return float(build().data)

        worst = 0.0
        coord_rng = stream(2024, "gradcheck", mode)
        for gname in sorted(TRAINABLE_GROUPS[mode]):
            group = params.groups()[gname]
            if not group:
                continue
            names = sorted(group)
            for _ in range(n_coords):
                name = names[int(coord_rng.integers(len(names)))]
                t = group[name]
                flat = int(coord_rng.integers(t.data.size))
                index = np.unravel_index(flat, t.data.shape)
                analytic = 0.0 if t.grad is None else float(t.grad[index])
                fd = finite_difference(loss_value, t, index, h=h)
                worst = max(worst, relative_error(analytic, fd))
        for gname, group in params.groups().items():
            if gname in TRAINABLE_GROUPS[mode]:
                continue
            for name, t in group.items():
                assert t.grad is None or not t.grad.any(), (
                    f"{mode}: frozen {gname}.{name} accumulated gradient"
                )
        for group in params.groups().values():
            for t in group.values():
                t.grad = None
        results[mode] = worst
    return results
