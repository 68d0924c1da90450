"""Evaluation metrics for trajectory completion plus ground-truth motion stats.

Conventions:
- masks mark observations with 1; the evaluation region is mask == 0
- min_ade_k scores only that region (visible steps are inputs, copying them
  earns nothing); a config flag upstream may widen to the full sequence
- oob is boundary-inclusive: a point exactly on the boundary is in-bounds
- path_d ships in both published readings, a per-sequence length discrepancy
  (max - min total path length across agents) and a start-to-end endpoint
  displacement; the two disagree by construction, so both are always reported
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, FieldBounds

METRIC_NAMES = ("min_ade_k", "oob_rate", "step", "path_l",
                "path_d_discrepancy", "path_d_endpoint")


def _check_traj(traj: np.ndarray, min_t: int = 1) -> np.ndarray:
    traj = np.asarray(traj, dtype=float)
    if traj.ndim < 2 or traj.shape[-1] != 2:
        raise ValueError(f"trajectory must end in a coordinate axis of 2, got {traj.shape}")
    if traj.shape[-2] < min_t:
        raise ValueError(f"need at least {min_t} timesteps, got {traj.shape[-2]}")
    return traj


def min_ade_k(samples: np.ndarray, y: np.ndarray, mask: np.ndarray) -> float:
    """Best-of-K mean displacement over the missing region.

    samples: (K, N, T, 2); y: (N, T, 2); mask: (N, T) with 0 marking the
    entries to score.  Raises if the mask leaves nothing to evaluate.
    """
    samples = np.asarray(samples, dtype=float)
    y = _check_traj(y)
    mask = np.asarray(mask)
    if samples.ndim != 4 or samples.shape[1:] != y.shape:
        raise ValueError(f"samples {samples.shape} do not stack over targets {y.shape}")
    if mask.shape != y.shape[:2]:
        raise ValueError(f"mask {mask.shape} does not match agents x steps {y.shape[:2]}")
    missing = mask == 0
    if not missing.any():
        raise ValueError("evaluation region is empty: mask marks no missing entries")
    d = np.linalg.norm(samples - y, axis=-1)          # (K, N, T)
    ades = d[:, missing].mean(axis=1)                 # (K,)
    return float(ades.min())


def oob(y_hat: np.ndarray, bounds: FieldBounds) -> float:
    """Fraction of points outside [x_min,x_max] x [y_min,y_max]."""
    pts = _check_traj(y_hat)
    x, y = pts[..., 0], pts[..., 1]
    out = (x < bounds.x_min) | (x > bounds.x_max) | \
          (y < bounds.y_min) | (y > bounds.y_max)
    return float(out.mean())


def _step_norms(traj: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.diff(traj, axis=-2), axis=-1)


def step_stat(traj: np.ndarray) -> float:
    """Mean per-step displacement of one trajectory (T, 2); needs T >= 2."""
    traj = _check_traj(traj, min_t=2)
    if traj.ndim != 2:
        raise ValueError(f"step_stat takes a single (T, 2) trajectory, got {traj.shape}")
    return float(_step_norms(traj).mean())


def path_l(traj: np.ndarray) -> float:
    """Total path length of one trajectory (T, 2)."""
    traj = _check_traj(traj, min_t=2)
    if traj.ndim != 2:
        raise ValueError(f"path_l takes a single (T, 2) trajectory, got {traj.shape}")
    return float(_step_norms(traj).sum())


def path_d(x: np.ndarray, agent_indices=None) -> tuple[float, np.ndarray]:
    """Both path-variation readings for one scene (N, T, 2).

    Returns (length discrepancy over the selected agents, per-agent endpoint
    displacements).  A single selected agent has discrepancy 0.
    """
    x = _check_traj(x, min_t=2)
    if x.ndim != 3:
        raise ValueError(f"path_d takes one scene (N, T, 2), got {x.shape}")
    sel = np.arange(x.shape[0]) if agent_indices is None else np.asarray(agent_indices)
    if sel.size < 1:
        raise ValueError("path_d needs at least one agent")
    lengths = _step_norms(x[sel]).sum(axis=-1)
    disc = float(lengths.max() - lengths.min())
    endpoints = np.linalg.norm(x[sel, -1] - x[sel, 0], axis=-1)
    return disc, endpoints


@dataclass
class MetricsReport:
    """Metric values grouped by (domain, role), plus ("all", "all") overall."""
    rows: dict = field(default_factory=dict)

    def put(self, domain: str, role: str, metric: str, value: float) -> None:
        if metric not in METRIC_NAMES:
            raise KeyError(f"unknown metric {metric!r}; expected one of {METRIC_NAMES}")
        value = float(value)
        if metric == "oob_rate" and not 0.0 <= value <= 1.0:
            raise ValueError(f"oob_rate {value} outside [0, 1]")
        if value < 0.0:
            raise ValueError(f"{metric} must be >= 0, got {value}")
        self.rows.setdefault((domain, role), {})[metric] = value

    def get(self, domain: str, role: str, metric: str) -> float:
        return self.rows[(domain, role)][metric]

    def write_csv(self, path, dataset_name: str, protocol: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["dataset", "protocol", "domain", "role", "metric", "value"])
            for (domain, role) in sorted(self.rows):
                for metric in METRIC_NAMES:
                    if metric in self.rows[(domain, role)]:
                        w.writerow([dataset_name, protocol, domain, role, metric,
                                    repr(self.rows[(domain, role)][metric])])


def _role_rows(dataset: Dataset):
    for seq in dataset.sequences:
        roles = np.asarray(seq.roles)
        for role in ("ball", "player", "all"):
            idx = np.arange(len(roles)) if role == "all" else np.flatnonzero(roles == role)
            if idx.size:
                yield seq.domain, role, seq.X, idx


def gt_stats(dataset: Dataset) -> list[dict]:
    """Mean Step / Path-L / Path-D per (domain, role); role "all" pools agents.

    Discrepancy is computed within each sequence over that role's agents and
    then averaged across sequences; single-agent groups contribute 0.
    """
    if not dataset.sequences:
        raise ValueError("gt_stats needs a non-empty dataset")
    acc: dict[tuple[str, str], dict[str, list]] = {}
    for domain, role, x, idx in _role_rows(dataset):
        slot = acc.setdefault((domain, role), {"step": [], "path_l": [],
                                               "disc": [], "end": []})
        steps = _step_norms(x[idx])
        slot["step"].extend(steps.mean(axis=-1).tolist())
        slot["path_l"].extend(steps.sum(axis=-1).tolist())
        disc, ends = path_d(x, idx)
        slot["disc"].append(disc)
        slot["end"].extend(ends.tolist())
    out = []
    for (domain, role) in sorted(acc):
        slot = acc[(domain, role)]
        out.append({
            "domain": domain, "role": role,
            "step": float(np.mean(slot["step"])),
            "path_l": float(np.mean(slot["path_l"])),
            "path_d_discrepancy": float(np.mean(slot["disc"])),
            "path_d_endpoint": float(np.mean(slot["end"])),
        })
    return out


def gt_stats_csv(dataset: Dataset, path) -> list[dict]:
    rows = gt_stats(dataset)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["domain", "role", "step", "path_l",
                                           "path_d_discrepancy", "path_d_endpoint"])
        w.writeheader()
        w.writerows(rows)
    return rows
