"""Scene sequences, synthetic generation, masking, and dataset IO.

A scene holds N agents over T steps: coordinates X (N,T,2), an observation
mask M (N,T) with 1 = observed, role and team labels per agent, and a domain
label.  Datasets serialize to JSONL, one scene per line.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

ROLES = ("ball", "player")
TEAMS = ("offense", "defense", "none")


class DataFormatError(ValueError):
    """A dataset file or record violates the schema."""


@dataclass(frozen=True)
class FieldBounds:
    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate bounds {self}")

    def as_dict(self) -> dict:
        return {"x_min": self.x_min, "x_max": self.x_max,
                "y_min": self.y_min, "y_max": self.y_max}


UNIT_BOUNDS = FieldBounds(0.0, 1.0, 0.0, 1.0)


@dataclass
class SceneSequence:
    X: np.ndarray           # (N, T, 2) float64
    M: np.ndarray           # (N, T) float64, values in {0, 1}
    roles: list[str]        # per agent, exactly one "ball"
    team: list[str]         # per agent, one of TEAMS
    domain: str

    @property
    def n_agents(self) -> int:
        return self.X.shape[0]

    @property
    def t_steps(self) -> int:
        return self.X.shape[1]

    def validate(self) -> None:
        X, M = self.X, self.M
        if X.ndim != 3 or X.shape[2] != 2:
            raise DataFormatError(f"X must be (N,T,2), got {X.shape}")
        if M.shape != X.shape[:2]:
            raise DataFormatError(f"mask shape {M.shape} != agent/step shape {X.shape[:2]}")
        if not np.all(np.isfinite(X)):
            raise DataFormatError("X contains non-finite values")
        if not np.all((M == 0.0) | (M == 1.0)):
            raise DataFormatError("mask must be binary")
        if np.any(M.sum(axis=1) == 0):
            raise DataFormatError("every agent needs at least one observed step")
        if len(self.roles) != X.shape[0] or len(self.team) != X.shape[0]:
            raise DataFormatError("labels must match agent count")
        if sum(r == "ball" for r in self.roles) != 1:
            raise DataFormatError("a scene needs exactly one ball agent")
        for r in self.roles:
            if r not in ROLES:
                raise DataFormatError(f"unknown role {r!r}")
        for t in self.team:
            if t not in TEAMS:
                raise DataFormatError(f"unknown team {t!r}")


@dataclass
class Dataset:
    sequences: list[SceneSequence]
    bounds: FieldBounds | None
    units: str
    orig_bounds: FieldBounds | None = None
    orig_units: str | None = None

    def __len__(self) -> int:
        return len(self.sequences)

    def domains(self) -> list[str]:
        out: list[str] = []
        for s in self.sequences:
            if s.domain not in out:
                out.append(s.domain)
        return out


@dataclass(frozen=True)
class DomainProfile:
    """Motion statistics for one synthetic sport-like domain.

    `player_step` and `ball_step` are per-step displacement scales in domain
    units.  Players follow a smooth mean-reverting random walk around a home
    anchor: velocity noise is AR(1)-correlated with persistence `momentum`,
    and `reversion` pulls each player back toward its home each step.  The
    ball sprints along piecewise-linear segments between re-sampled waypoints,
    forced onto a new one every `ball_seg` steps.  Homes and waypoints live
    inside the fractional field rectangle `zone`, so domains also differ in
    where play concentrates.  Together the fields give each domain a
    recognizably different movement style, mirroring how real sports differ
    in tempo, smoothness, and occupancy.
    """
    name: str
    bounds: FieldBounds
    units: str
    player_step: float
    ball_step: float
    momentum: float = 0.6
    reversion: float = 0.08
    ball_seg: tuple[int, int] = (4, 9)
    zone: tuple[float, float, float, float] = (0.0, 1.0, 0.0, 1.0)

    def __post_init__(self):
        if self.player_step < 0 or self.ball_step < 0:
            raise ValueError("step scales must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if not 0.0 < self.reversion < 1.0:
            raise ValueError("reversion must be in (0, 1)")
        lo, hi = self.ball_seg
        if not 1 <= lo < hi:
            raise ValueError("segment bounds must satisfy 1 <= lo < hi")
        zx0, zx1, zy0, zy1 = self.zone
        if not (0.0 <= zx0 < zx1 <= 1.0 and 0.0 <= zy0 < zy1 <= 1.0):
            raise ValueError("zone must be a fractional rectangle inside the field")
        if self.ball_step <= self.player_step:
            warnings.warn(
                f"profile {self.name!r}: ball_step {self.ball_step} <= "
                f"player_step {self.player_step}; ball should move faster"
            )


# Field sizes: indoor court in feet, gridiron in yards, pitch in broadcast
# pixels.  Ball speeds are set so that after per-axis normalization the mean
# ball speed orders basketball > soccer > football.  Player tempo, walk
# smoothness, home pull, and operating zone are deliberately spread apart so
# each domain is separable from motion alone: basketball = fast gliding
# moves in the upper-left quarter, football = slow shuffling along the lower
# band, soccer = medium drift in the upper-right quarter.  The zones do not
# overlap, so where play happens identifies the domain as sharply as how it
# moves.
PROFILES: dict[str, DomainProfile] = {
    "basketball": DomainProfile(
        "basketball", FieldBounds(0.0, 94.0, 0.0, 50.0), "feet",
        player_step=0.60, ball_step=2.80,
        momentum=0.85, reversion=0.05, ball_seg=(4, 9),
        zone=(0.03, 0.40, 0.58, 0.97)),
    "football": DomainProfile(
        "football", FieldBounds(0.0, 120.0, 0.0, 53.3), "yards",
        player_step=0.55, ball_step=1.20,
        momentum=0.45, reversion=0.05, ball_seg=(5, 10),
        zone=(0.03, 0.97, 0.03, 0.37)),
    "soccer": DomainProfile(
        "soccer", FieldBounds(0.0, 1050.0, 0.0, 680.0), "pixels",
        player_step=8.40, ball_step=19.0,
        momentum=0.60, reversion=0.03, ball_seg=(4, 9),
        zone=(0.60, 0.97, 0.58, 0.97)),
}


def _clip(pos: np.ndarray, b: FieldBounds) -> np.ndarray:
    pos[..., 0] = np.clip(pos[..., 0], b.x_min, b.x_max)
    pos[..., 1] = np.clip(pos[..., 1], b.y_min, b.y_max)
    return pos


def generate_scene(profile: DomainProfile, n_agents: int, t_steps: int,
                   rng: np.random.Generator) -> SceneSequence:
    """One synthetic scene: agent 0 is the ball, the rest are players."""
    if n_agents < 2:
        raise ValueError("need at least one ball and one player")
    if t_steps < 2:
        raise ValueError("need at least two steps")
    b = profile.bounds
    lo = np.array([b.x_min, b.y_min])
    hi = np.array([b.x_max, b.y_max])
    zx0, zx1, zy0, zy1 = profile.zone
    zlo = lo + np.array([zx0, zy0]) * (hi - lo)
    zhi = lo + np.array([zx1, zy1]) * (hi - lo)
    n_players = n_agents - 1
    X = np.empty((n_agents, t_steps, 2))

    # ball: piecewise-linear sprints between waypoints inside the zone;
    # forced re-targeting every few steps keeps direction changes inside any
    # half-scene horizon
    pos = rng.uniform(zlo, zhi)
    waypoint = rng.uniform(zlo, zhi)
    b_lo, b_hi = profile.ball_seg
    seg_left = int(rng.integers(b_lo, b_hi))
    speed = profile.ball_step
    X[0, 0] = pos
    for t in range(1, t_steps):
        delta = waypoint - pos
        dist = float(np.hypot(*delta))
        if seg_left <= 0 or dist <= speed:
            waypoint = rng.uniform(zlo, zhi)
            seg_left = int(rng.integers(b_lo, b_hi))
            delta = waypoint - pos
            dist = float(np.hypot(*delta))
        if dist > 0.0 and speed > 0.0:
            pos = pos + delta * (min(speed, dist) / dist)
        seg_left -= 1
        X[0, t] = pos
    _clip(X[0], b)

    # players: smooth mean-reverting random walk around a home anchor inside
    # the profile zone; AR(1) velocity keeps the path smooth, the home pull
    # keeps it local, and the persistent drift keeps any prefix average from
    # nailing the suffix
    v = profile.player_step
    rho = profile.momentum
    kappa = profile.reversion
    # white-noise scale chosen so the stationary per-step displacement ~ v
    sig_eta = v * np.sqrt(2.0 * (1.0 - rho * rho) / np.pi)
    home = rng.uniform(zlo, zhi, (n_players, 2))
    cur = home.copy()          # start at the anchor: no reversion transient
    vel = rng.normal(0.0, sig_eta / np.sqrt(1.0 - rho * rho), (n_players, 2))
    X[1:, 0] = cur
    for t in range(1, t_steps):
        vel = rho * vel + rng.normal(0.0, sig_eta, (n_players, 2))
        cur = _clip(cur + kappa * (home - cur) + vel, b)
        X[1:, t] = cur

    roles = ["ball"] + ["player"] * n_players
    team = ["none"] + ["offense" if i % 2 == 0 else "defense" for i in range(n_players)]
    scene = SceneSequence(X, np.ones((n_agents, t_steps)), roles, team,
                          f"synthetic-{profile.name}")
    scene.validate()
    return scene


def generate_dataset(profile: DomainProfile, n_sequences: int, n_agents: int = 5,
                     t_steps: int = 24, seed: int = 0) -> Dataset:
    """Deterministic per (profile, seed): each scene gets a spawned substream."""
    children = np.random.SeedSequence(seed).spawn(n_sequences)
    seqs = [generate_scene(profile, n_agents, t_steps, np.random.default_rng(c))
            for c in children]
    return Dataset(seqs, profile.bounds, profile.units)


# --- masks -------------------------------------------------------------------


@dataclass(frozen=True)
class MaskSpec:
    pattern: str = "random"          # prediction | random | block
    missing_ratio: float = 0.3
    horizon: int | None = None

    def __post_init__(self):
        if self.pattern not in ("prediction", "random", "block"):
            raise ValueError(f"unknown mask pattern {self.pattern!r}")
        if not 0.0 <= self.missing_ratio < 1.0:
            raise ValueError("missing_ratio must be in [0, 1)")


def make_mask(spec: MaskSpec, n_agents: int, t_steps: int,
              rng: np.random.Generator) -> np.ndarray:
    """Binary (N,T) observation mask; every agent keeps >= 1 observed step."""
    T = t_steps
    if spec.pattern == "prediction":
        horizon = spec.horizon if spec.horizon is not None else T // 2
        if not 0 <= horizon < T:
            raise ValueError(f"prediction horizon {horizon} must leave an observed prefix (T={T})")
        M = np.ones((n_agents, T))
        if horizon:
            M[:, T - horizon:] = 0.0
        return M
    if spec.pattern == "random":
        M = (rng.random((n_agents, T)) >= spec.missing_ratio).astype(np.float64)
        for i in np.flatnonzero(M.sum(axis=1) == 0):
            M[i, rng.integers(T)] = 1.0
        return M
    # block: one contiguous gap per agent of length ~ ratio * T
    L = int(round(spec.missing_ratio * T))
    L = max(0, min(T - 1, L))
    M = np.ones((n_agents, T))
    if L:
        for i in range(n_agents):
            start = int(rng.integers(0, T - L + 1))
            M[i, start:start + L] = 0.0
    return M


def split_visible_missing(X: np.ndarray, M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """X_v + X_m == X exactly; masks are exact 0/1 floats."""
    mm = M[..., None]
    return X * mm, X * (1.0 - mm)


# --- normalization / merging ---------------------------------------------------


def normalize(dataset: Dataset) -> Dataset:
    """Affine map of coordinates into the unit square, invertible via
    the stored original bounds."""
    if not dataset.sequences:
        raise ValueError("cannot normalize an empty dataset")
    if dataset.bounds is None:
        raise ValueError("dataset has no bounds")
    b = dataset.bounds
    sx = b.x_max - b.x_min
    sy = b.y_max - b.y_min
    seqs = []
    for s in dataset.sequences:
        X = s.X.copy()
        X[..., 0] = (X[..., 0] - b.x_min) / sx
        X[..., 1] = (X[..., 1] - b.y_min) / sy
        seqs.append(replace(s, X=X, M=s.M.copy()))
    return Dataset(seqs, UNIT_BOUNDS, "normalized",
                   orig_bounds=b, orig_units=dataset.units)


def denormalize(dataset: Dataset) -> Dataset:
    if dataset.orig_bounds is None:
        raise ValueError("dataset does not carry original bounds")
    b = dataset.orig_bounds
    sx = b.x_max - b.x_min
    sy = b.y_max - b.y_min
    seqs = []
    for s in dataset.sequences:
        X = s.X.copy()
        X[..., 0] = X[..., 0] * sx + b.x_min
        X[..., 1] = X[..., 1] * sy + b.y_min
        seqs.append(replace(s, X=X, M=s.M.copy()))
    return Dataset(seqs, b, dataset.orig_units or "", orig_bounds=None)


def is_normalized(dataset: Dataset) -> bool:
    return dataset.bounds == UNIT_BOUNDS and dataset.units == "normalized"


def merge_unified(datasets: Sequence[Dataset]) -> Dataset:
    """Concatenate normalized datasets, preserving per-sequence domain labels."""
    if not datasets:
        raise ValueError("merge_unified needs at least one dataset")
    for i, d in enumerate(datasets):
        if not is_normalized(d):
            raise ValueError(
                f"dataset {i} is not normalized; call normalize() before merging"
            )
    seqs: list[SceneSequence] = []
    for d in datasets:
        seqs.extend(d.sequences)
    return Dataset(seqs, UNIT_BOUNDS, "normalized")


# --- JSONL IO -------------------------------------------------------------------


def save_jsonl(dataset: Dataset, path: str) -> None:
    if dataset.sequences and dataset.bounds is None:
        raise ValueError("dataset has no bounds")
    with open(path, "w") as fh:
        for s in dataset.sequences:
            rec = {
                "domain": s.domain,
                "bounds": dataset.bounds.as_dict(),
                "units": dataset.units,
                "agents": [
                    {
                        "role": s.roles[i],
                        "team": s.team[i],
                        "xy": s.X[i].tolist(),
                        "mask": [int(v) for v in s.M[i]],
                    }
                    for i in range(s.n_agents)
                ],
            }
            fh.write(json.dumps(rec) + "\n")


def _parse_record(rec: dict, lineno: int) -> tuple[SceneSequence, FieldBounds, str]:
    def fail(msg: str):
        raise DataFormatError(f"line {lineno}: {msg}")

    for key in ("domain", "bounds", "units", "agents"):
        if key not in rec:
            fail(f"missing key {key!r}")
    try:
        bounds = FieldBounds(**{k: float(rec["bounds"][k])
                                for k in ("x_min", "x_max", "y_min", "y_max")})
    except (KeyError, TypeError, ValueError) as e:
        fail(f"bad bounds: {e}")
    agents = rec["agents"]
    if not isinstance(agents, list) or not agents:
        fail("agents must be a non-empty list")
    xs, ms, roles, team = [], [], [], []
    t_len = None
    for ai, a in enumerate(agents):
        if not isinstance(a, dict) or "role" not in a or "xy" not in a:
            fail(f"agent {ai}: need at least 'role' and 'xy'")
        xy = np.asarray(a["xy"], dtype=np.float64)
        if xy.ndim != 2 or xy.shape[1] != 2:
            fail(f"agent {ai}: xy must be a list of [x, y] pairs")
        if t_len is None:
            t_len = xy.shape[0]
        elif xy.shape[0] != t_len:
            fail(f"agent {ai}: has {xy.shape[0]} steps, expected {t_len}")
        if "mask" in a and a["mask"] is not None:
            mask = np.asarray(a["mask"], dtype=np.float64)
            if mask.shape != (t_len,):
                fail(f"agent {ai}: mask length {mask.shape} != {t_len}")
        else:
            warnings.warn(f"line {lineno}: agent {ai} has no mask, assuming fully observed")
            mask = np.ones(t_len)
        xs.append(xy)
        ms.append(mask)
        roles.append(a["role"])
        team.append(a.get("team", "none"))
    scene = SceneSequence(np.stack(xs), np.stack(ms), roles, team, rec["domain"])
    try:
        scene.validate()
    except DataFormatError as e:
        fail(str(e))
    return scene, bounds, rec["units"]


def load_jsonl(path: str) -> Dataset:
    """Parse errors carry the 1-based line number of the offending record."""
    seqs: list[SceneSequence] = []
    bounds: FieldBounds | None = None
    units = ""
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataFormatError(f"line {lineno}: invalid JSON ({e.msg})") from None
            scene, b, u = _parse_record(rec, lineno)
            if bounds is None:
                bounds, units = b, u
            elif b != bounds or u != units:
                raise DataFormatError(
                    f"line {lineno}: bounds/units differ from line 1 "
                    f"({b} {u!r} vs {bounds} {units!r})"
                )
            seqs.append(scene)
    return Dataset(seqs, bounds, units)
