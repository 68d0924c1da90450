"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tape import Tape, Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_coords: int
    worst: tuple[str, int] | None = None
    failures: list[str] = field(default_factory=list)


def grad_check(
    f,
    params: dict[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords_per_param: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of a scalar `f` against central differences.

    `f` maps a dict of leaf Tensors (sharing one tape) to a scalar Tensor.
    The numeric estimate re-evaluates the forward pass only, so it is
    independent of the backward implementation under test.  Relative error
    per coordinate is |a - n| / max(1e-8, |a| + |n|).  When
    `max_coords_per_param` is set, a seeded random subset of coordinates is
    checked per parameter.

    A central difference cannot resolve derivatives below the rounding floor
    eps * |f| / h (around 1e-10 here); where analytic and numeric agree within
    that floor the coordinate counts as passed even if the relative formula
    is inflated by a near-zero denominator.
    """
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    out = f(leaves)
    if not isinstance(out, Tensor) or out.value.size != 1:
        raise ValueError("grad_check: f must return a scalar Tensor")
    tape.backward(out)
    analytic = {k: leaves[k].grad for k in params}
    noise_floor = 4.0 * np.finfo(np.float64).eps * max(1.0, abs(float(out.value))) / h

    def eval_at(theta: dict[str, np.ndarray]) -> float:
        t = Tape()
        return float(f({k: t.leaf(v) for k, v in theta.items()}).value)

    rng = np.random.default_rng(seed)
    work = {k: v.astype(np.float64).copy() for k, v in params.items()}
    max_rel = 0.0
    worst = None
    failures: list[str] = []
    n_checked = 0
    for name, arr in work.items():
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            coords = rng.choice(flat.size, size=max_coords_per_param, replace=False)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + h
            fp = eval_at(work)
            flat[idx] = orig - h
            fm = eval_at(work)
            flat[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                failures.append(f"non-finite f near {name}[{idx}]")
                continue
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[idx])
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            n_checked += 1
            if abs(a - numeric) <= noise_floor:
                continue
            if rel > max_rel:
                max_rel = rel
                worst = (name, int(idx))
            if rel > tol:
                failures.append(
                    f"{name}[{idx}]: analytic {a:.6g} vs numeric {numeric:.6g} (rel {rel:.3g})"
                )
    passed = not failures and max_rel <= tol
    return GradCheckReport(max_rel, passed, n_checked, worst, failures)
