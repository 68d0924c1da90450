"""Micro-benchmark comparing the numba and numpy kernel backends.

Run with ``python -m arenatraj.bench``.  Each kernel is warmed up (which also
triggers JIT compilation), timed over a number of repeats, and the two
backends are checked for agreement before the table is printed.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from . import kernels


def _time(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _make_workloads(batch: int, steps: int, hidden: int, d_in: int, seed: int):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, steps, d_in))
    w_ih = rng.standard_normal((3 * hidden, d_in)) * 0.1
    w_hh = rng.standard_normal((3 * hidden, hidden)) * 0.1
    b_ih = rng.standard_normal(3 * hidden) * 0.1
    b_hh = rng.standard_normal(3 * hidden) * 0.1
    dh = rng.standard_normal((batch, steps, hidden))
    p = rng.standard_normal(batch * steps * hidden)
    g = rng.standard_normal(p.size)

    def fwd():
        return kernels.gru_forward(x, w_ih, w_hh, b_ih, b_hh)

    def bwd():
        _, cache = kernels.gru_forward(x, w_ih, w_hh, b_ih, b_hh)
        return kernels.gru_backward(dh, x, cache, w_ih, w_hh)

    def adam():
        kernels.adam_update(p.copy(), g, np.zeros_like(p), np.zeros_like(p),
                            step=1, lr=1e-3)

    return {"gru_forward": fwd, "gru_backward": bwd, "adam_update": adam}


def _check_agreement(workloads) -> float:
    """Max |numba - numpy| across all kernel outputs."""
    worst = 0.0
    for name in ("gru_forward", "gru_backward"):
        outs = {}
        for backend in ("numpy", "numba"):
            kernels.use(backend)
            res = workloads[name]()
            outs[backend] = res[0] if name == "gru_forward" else res
        if name == "gru_forward":
            worst = max(worst, float(np.abs(outs["numba"] - outs["numpy"]).max()))
        else:
            for a, b in zip(outs["numba"], outs["numpy"]):
                worst = max(worst, float(np.abs(a - b).max()))
    return worst


def run_bench(batch: int, steps: int, hidden: int, d_in: int, repeats: int,
              seed: int = 0) -> list[dict]:
    """Time every kernel on every available backend; returns result rows."""
    workloads = _make_workloads(batch, steps, hidden, d_in, seed)
    backends = ["numpy"] + (["numba"] if kernels.HAS_NUMBA else [])
    original = kernels.active_backend()
    rows = []
    try:
        for backend in backends:
            kernels.use(backend)
            for name, fn in workloads.items():
                fn()  # warm-up / JIT
                rows.append({"kernel": name, "backend": backend,
                             "best_s": _time(fn, repeats)})
        if kernels.HAS_NUMBA:
            gap = _check_agreement(workloads)
            if gap > 1e-9:
                raise AssertionError(f"backend outputs disagree by {gap:.3e}")
    finally:
        kernels.use(original)
    return rows


def format_table(rows: list[dict]) -> str:
    by_kernel: dict[str, dict[str, float]] = {}
    for r in rows:
        by_kernel.setdefault(r["kernel"], {})[r["backend"]] = r["best_s"]
    lines = [f"{'kernel':<14} {'numpy (ms)':>12} {'numba (ms)':>12} {'speedup':>9}"]
    for name, t in by_kernel.items():
        np_ms = t["numpy"] * 1e3
        if "numba" in t:
            nb_ms = t["numba"] * 1e3
            lines.append(f"{name:<14} {np_ms:>12.3f} {nb_ms:>12.3f} "
                         f"{np_ms / nb_ms:>8.2f}x")
        else:
            lines.append(f"{name:<14} {np_ms:>12.3f} {'n/a':>12} {'n/a':>9}")
    return "\n".join(lines)


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="arenatraj.bench",
                                 description="kernel backend benchmark")
    ap.add_argument("--batch", type=int, default=160)
    ap.add_argument("--steps", type=int, default=24)
    ap.add_argument("--hidden", type=int, default=32)
    ap.add_argument("--d-in", type=int, default=32)
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args(argv)
    rows = run_bench(args.batch, args.steps, args.hidden, args.d_in, args.repeats)
    print(f"workload: batch={args.batch} steps={args.steps} "
          f"hidden={args.hidden} d_in={args.d_in}, best of {args.repeats}")
    print(format_table(rows))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
