import csv

import numpy as np
import pytest

from arenatraj import metrics
from arenatraj.data import FieldBounds, PROFILES, generate_dataset


def test_min_ade_of_an_exact_sample_is_zero():
    y = np.random.default_rng(0).normal(size=(3, 6, 2))
    mask = np.zeros((3, 6))
    assert metrics.min_ade_k(y[None], y, mask) == 0.0


def test_min_ade_takes_the_best_sample():
    y = np.zeros((1, 2, 2))
    mask = np.zeros((1, 2))
    s_far = y + np.array([5.0, 0.0])     # ADE 5
    s_near = y + np.array([2.0, 0.0])    # ADE 2
    assert metrics.min_ade_k(np.stack([s_far, s_near]), y, mask) == 2.0


def test_min_ade_single_missing_point_345_triangle():
    y = np.zeros((2, 3, 2))
    mask = np.ones((2, 3))
    mask[1, 2] = 0
    pred = y.copy()
    pred[1, 2] = [3.0, 4.0]
    assert metrics.min_ade_k(pred[None], y, mask) == 5.0


def test_min_ade_scores_only_the_missing_region():
    y = np.zeros((1, 4, 2))
    mask = np.array([[1, 1, 0, 0]])
    pred = y.copy()
    pred[0, :2] = 99.0        # junk on visible steps must not count
    pred[0, 2:] = [0.0, 1.0]
    assert metrics.min_ade_k(pred[None], y, mask) == 1.0


def test_min_ade_requires_an_evaluation_region():
    y = np.zeros((2, 3, 2))
    with pytest.raises(ValueError, match="evaluation region"):
        metrics.min_ade_k(y[None], y, np.ones((2, 3)))


def test_min_ade_is_non_increasing_in_k():
    rng = np.random.default_rng(1)
    y = rng.normal(size=(3, 5, 2))
    mask = (rng.random((3, 5)) < 0.5).astype(float)
    mask[0, 0] = 0
    samples = rng.normal(size=(6, 3, 5, 2))
    vals = [metrics.min_ade_k(samples[:k], y, mask) for k in range(1, 7)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_min_ade_is_translation_invariant():
    rng = np.random.default_rng(2)
    y = rng.normal(size=(2, 4, 2))
    mask = np.zeros((2, 4))
    s = rng.normal(size=(3, 2, 4, 2))
    shift = np.array([3.7, -1.2])
    a = metrics.min_ade_k(s, y, mask)
    b = metrics.min_ade_k(s + shift, y + shift, mask)
    assert abs(a - b) < 1e-12


def test_oob_counts_the_out_of_bounds_fraction():
    unit = FieldBounds(0, 1, 0, 1)
    pts = np.array([[[0.5, 0.5], [1.2, 0.3]]])
    assert metrics.oob(pts, unit) == 0.5
    center = np.full((2, 3, 2), 0.5)
    assert metrics.oob(center, unit) == 0.0


def test_oob_boundary_points_are_in_bounds():
    unit = FieldBounds(0, 1, 0, 1)
    corners = np.array([[[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]]])
    assert metrics.oob(corners, unit) == 0.0


def test_oob_of_clipped_points_is_zero():
    rng = np.random.default_rng(3)
    b = FieldBounds(0, 94, 0, 50)
    wild = rng.normal(scale=200, size=(4, 10, 2))
    clipped = np.stack([np.clip(wild[..., 0], 0, 94),
                        np.clip(wild[..., 1], 0, 50)], axis=-1)
    assert metrics.oob(clipped, b) == 0.0


def test_step_and_path_length_oracles():
    traj = np.array([[0.0, 0.0], [3.0, 4.0], [3.0, 4.0]])
    assert metrics.step_stat(traj) == 2.5
    assert metrics.path_l(traj) == 5.0
    line = np.stack([np.arange(11.0), np.zeros(11)], axis=-1)
    assert metrics.path_l(line) == 10.0
    static = np.zeros((5, 2))
    assert metrics.step_stat(static) == 0.0


def test_short_trajectories_are_rejected():
    with pytest.raises(ValueError, match="timesteps"):
        metrics.step_stat(np.zeros((1, 2)))
    with pytest.raises(ValueError, match="timesteps"):
        metrics.path_l(np.zeros((1, 2)))


def test_path_length_equals_step_times_intervals():
    rng = np.random.default_rng(4)
    for _ in range(200):
        t = int(rng.integers(2, 30))
        traj = rng.normal(size=(t, 2)) * rng.uniform(0.1, 20)
        lhs = metrics.path_l(traj)
        rhs = metrics.step_stat(traj) * (t - 1)
        assert abs(lhs - rhs) <= 1e-9 * max(1.0, lhs)


def test_path_d_identical_agents_have_zero_discrepancy():
    traj = np.random.default_rng(5).normal(size=(6, 2))
    x = np.stack([traj, traj, traj])
    disc, ends = metrics.path_d(x)
    assert disc == 0.0
    assert ends.shape == (3,)


def test_path_d_closed_loop_has_zero_endpoint():
    theta = np.linspace(0, 2 * np.pi, 13)
    loop = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    _, ends = metrics.path_d(loop[None])
    assert abs(ends[0]) < 1e-12


def test_endpoint_never_exceeds_path_length():
    rng = np.random.default_rng(6)
    for _ in range(200):
        x = rng.normal(size=(3, int(rng.integers(2, 15)), 2))
        _, ends = metrics.path_d(x)
        lengths = [metrics.path_l(x[i]) for i in range(3)]
        assert np.all(ends <= np.array(lengths) + 1e-12)


def test_path_d_respects_agent_selection():
    slow = np.zeros((4, 2))
    fast = np.stack([np.arange(4.0), np.zeros(4)], axis=-1)
    x = np.stack([slow, fast, slow])
    disc_all, _ = metrics.path_d(x)
    disc_single, _ = metrics.path_d(x, agent_indices=[1])
    assert disc_all == 3.0
    assert disc_single == 0.0


def test_stats_are_translation_invariant():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(3, 8, 2))
    shift = np.array([100.0, -40.0])
    assert abs(metrics.step_stat(x[0]) - metrics.step_stat(x[0] + shift)) < 1e-12
    assert abs(metrics.path_l(x[1]) - metrics.path_l(x[1] + shift)) < 1e-12
    d0, e0 = metrics.path_d(x)
    d1, e1 = metrics.path_d(x + shift)
    assert abs(d0 - d1) < 1e-9
    np.testing.assert_allclose(e0, e1, atol=1e-9)


def test_report_validates_metric_names_and_ranges():
    rep = metrics.MetricsReport()
    rep.put("synthetic-basketball", "ball", "min_ade_k", 0.25)
    assert rep.get("synthetic-basketball", "ball", "min_ade_k") == 0.25
    with pytest.raises(KeyError, match="unknown metric"):
        rep.put("d", "r", "ade", 1.0)
    with pytest.raises(ValueError, match="oob_rate"):
        rep.put("d", "r", "oob_rate", 1.5)
    with pytest.raises(ValueError, match=">= 0"):
        rep.put("d", "r", "step", -0.1)


def test_report_csv_layout(tmp_path):
    rep = metrics.MetricsReport()
    rep.put("synthetic-soccer", "all", "min_ade_k", 0.125)
    rep.put("synthetic-soccer", "all", "oob_rate", 0.0)
    out = tmp_path / "metrics.csv"
    rep.write_csv(out, "sports-u", "S2S")
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert rows[0] == {"dataset": "sports-u", "protocol": "S2S",
                       "domain": "synthetic-soccer", "role": "all",
                       "metric": "min_ade_k", "value": "0.125"}
    assert len(rows) == 2


def test_gt_stats_ball_outpaces_players_on_synthetic_data():
    ds = generate_dataset(PROFILES["basketball"], 20, n_agents=5, t_steps=24, seed=0)
    rows = {(r["domain"], r["role"]): r for r in metrics.gt_stats(ds)}
    ball = rows[("synthetic-basketball", "ball")]
    player = rows[("synthetic-basketball", "player")]
    assert ball["step"] > player["step"]
    assert ball["path_l"] > player["path_l"]
    assert rows[("synthetic-basketball", "all")]["step"] > 0
    # a single ball per scene pins its within-role discrepancy at zero
    assert ball["path_d_discrepancy"] == 0.0


def test_gt_stats_csv_roundtrip(tmp_path):
    ds = generate_dataset(PROFILES["football"], 4, n_agents=3, t_steps=10, seed=1)
    out = tmp_path / "gt.csv"
    rows = metrics.gt_stats_csv(ds, out)
    with open(out) as fh:
        read = list(csv.DictReader(fh))
    assert len(read) == len(rows) == 3   # ball, player, all for one domain
    assert {r["role"] for r in read} == {"ball", "player", "all"}
    assert float(read[0]["step"]) >= 0


def test_gt_stats_requires_data():
    from arenatraj.data import Dataset
    with pytest.raises(ValueError, match="non-empty"):
        metrics.gt_stats(Dataset(sequences=[], bounds=None, units="m"))
