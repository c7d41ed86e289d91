"""Trajectory analysis, histograms, and perturbation-growth estimation."""

import csv

import numpy as np
import pytest

from purekit.ddpm import make_schedule
from purekit.diagnostics import (crossover_step, energy_histogram,
                                 l2_trajectory, lyapunov, lyapunov_sweep,
                                 write_histogram_csv, write_lyapunov_csv,
                                 write_trajectory_csv)
from purekit.ebm import QuadraticEnergy
from purekit.errors import ContractError, DataError
from purekit.pipeline import PurifyConfig, PurifyModels
from purekit.trajectory import TrajectoryLog


def quad_models():
    return PurifyModels(energy=QuadraticEnergy(c=1.0))


def test_l2_trajectory_zero_delta_curves_coincide():
    x = np.random.default_rng(0).random((2, 4, 4)).astype(np.float32)
    cfg = PurifyConfig(ebm_steps=12, noise_scale=0.3, seed=4)
    log_clean, log_pois = l2_trajectory(quad_models(), cfg, x, x.copy())
    np.testing.assert_allclose(log_pois.l2_clean, log_pois.l2_poisoned,
                               rtol=1e-6)
    # shared stream: the two runs are the same run
    np.testing.assert_allclose(log_clean.l2_clean, log_pois.l2_clean,
                               rtol=1e-6)


def test_l2_trajectory_step_zero_distance_zero():
    x = np.random.default_rng(1).random((1, 3, 3)).astype(np.float32)
    cfg = PurifyConfig(ebm_steps=5, seed=2)
    log_clean, _ = l2_trajectory(quad_models(), cfg, x,
                                 np.clip(x + 0.05, 0, 1))
    assert log_clean.steps[0] == 0
    assert log_clean.l2_clean[0] == 0.0


def test_l2_trajectory_shape_mismatch():
    with pytest.raises(ContractError):
        l2_trajectory(quad_models(), PurifyConfig(ebm_steps=1),
                      np.zeros((1, 2, 2), dtype=np.float32),
                      np.zeros((1, 3, 3), dtype=np.float32))


def test_crossover_on_handbuilt_log():
    log = TrajectoryLog(steps=[0, 1, 2, 3, 4],
                        energy=[0.0] * 5,
                        l2_clean=[1.0, 0.9, 0.8, 0.7, 0.6],
                        l2_poisoned=[0.0, 0.5, 0.7, 0.9, 1.1])
    assert crossover_step(log) == 3


def test_crossover_none_when_never_exceeds():
    log = TrajectoryLog(steps=[0, 1, 2], energy=[0.0] * 3,
                        l2_clean=[1.0, 1.0, 1.0],
                        l2_poisoned=[0.0, 0.5, 1.0])  # equality is not enough
    assert crossover_step(log) is None


def test_crossover_zero_delta_is_none():
    x = np.random.default_rng(3).random((1, 4, 4)).astype(np.float32)
    cfg = PurifyConfig(ebm_steps=10, noise_scale=0.3, seed=7)
    _, log_pois = l2_trajectory(quad_models(), cfg, x, x.copy())
    assert crossover_step(log_pois) is None


def test_crossover_rejects_empty_log():
    with pytest.raises(ContractError):
        crossover_step(TrajectoryLog())


def test_clean_and_poisoned_trajectories_converge():
    # shared noise + contracting drift: the purified-poisoned and
    # purified-clean curves approach the same distance from the original
    x = np.random.default_rng(7).random((2, 4, 4)).astype(np.float32)
    pois = np.clip(x + 0.1, 0, 1)
    cfg = PurifyConfig(ebm_steps=120, noise_scale=0.3, seed=9)
    log_clean, log_pois = l2_trajectory(quad_models(), cfg, x, pois)
    gap_start = abs(log_pois.l2_clean[1] - log_clean.l2_clean[1])
    gap_end = abs(log_pois.l2_clean[-1] - log_clean.l2_clean[-1])
    assert gap_end < gap_start


# ------------------------------------------------------------------ histogram


def test_histogram_identical_sets_identical_counts():
    xs = np.random.default_rng(4).random((20, 1, 3, 3)).astype(np.float32)
    hist = energy_histogram(QuadraticEnergy(), xs, xs.copy(), xs.copy(), bins=8)
    np.testing.assert_array_equal(hist.counts["clean"], hist.counts["poisoned"])
    np.testing.assert_array_equal(hist.counts["clean"], hist.counts["purified"])


def test_histogram_conserves_mass():
    rng = np.random.default_rng(5)
    a = rng.random((13, 1, 3, 3)).astype(np.float32)
    b = rng.random((7, 1, 3, 3)).astype(np.float32)
    c = rng.random((29, 1, 3, 3)).astype(np.float32)
    hist = energy_histogram(QuadraticEnergy(), a, b, c, bins=6)
    assert hist.total("clean") == 13
    assert hist.total("poisoned") == 7
    assert hist.total("purified") == 29


def test_histogram_bin_and_empty_guards():
    xs = np.random.default_rng(6).random((4, 1, 2, 2)).astype(np.float32)
    with pytest.raises(ContractError):
        energy_histogram(QuadraticEnergy(), xs, xs, xs, bins=1)
    with pytest.raises(DataError):
        energy_histogram(QuadraticEnergy(), xs,
                         np.zeros((0, 1, 2, 2), dtype=np.float32), xs)


# ------------------------------------------------------------------ exponent


@pytest.mark.parametrize("c", [0.5, 1.0, 5.0])
@pytest.mark.parametrize("eta", [0.1, 1.0, 2.0])
def test_lyapunov_quadratic_closed_form(c, eta):
    model = QuadraticEnergy(c=c)
    x0 = np.full((3, 8, 8), 0.5, dtype=np.float32)
    est = lyapunov(model, x0, eta, steps=1500, renorm_interval=10,
                   rng=np.random.default_rng(11))
    assert est.value == pytest.approx(np.log(abs(1.0 - 0.01 * c)), abs=1e-3)
    assert not est.flagged


def test_lyapunov_degenerate_full_contraction_flagged():
    model = QuadraticEnergy(c=100.0)  # dt*c = 1 kills the separation
    x0 = np.full((2, 4, 4), 0.5, dtype=np.float32)
    est = lyapunov(model, x0, 1.0, steps=100, renorm_interval=10,
                   rng=np.random.default_rng(12))
    assert est.flagged
    assert est.value <= -10.0


def test_lyapunov_perturbation_is_infinitesimal_contract():
    with pytest.raises(ContractError):
        lyapunov(QuadraticEnergy(), np.zeros((1, 2, 2)), 1.0, steps=5,
                 renorm_interval=10)


def test_lyapunov_shared_noise_one_draw_per_step():
    draws = []

    class RecordingRng:
        def __init__(self):
            self._rng = np.random.default_rng(0)

        def normal(self, *args, **kwargs):
            out = self._rng.normal(*args, **kwargs)
            draws.append(np.shape(out))
            return out

    x0 = np.full((1, 3, 3), 0.5, dtype=np.float32)
    lyapunov(QuadraticEnergy(), x0, 1.0, steps=50, renorm_interval=10,
             rng=RecordingRng(), directions=2)
    # one draw for the initial directions + exactly one shared draw per step
    per_step = [s for s in draws if s == (1, 3, 3)]
    assert len(per_step) == 50


def test_lyapunov_sweep_single_point():
    rep = lyapunov_sweep(QuadraticEnergy(c=1.0),
                         np.full((1, 3, 3), 0.4, dtype=np.float32),
                         [0.5], steps=300)
    assert len(rep.noise_scales) == 1
    assert rep.transition is None  # contraction everywhere


def test_lyapunov_sweep_constant_across_noise_for_quadratic():
    rep = lyapunov_sweep(QuadraticEnergy(c=1.0),
                         np.full((2, 4, 4), 0.5, dtype=np.float32),
                         [0.1, 0.5, 1.0, 2.0], steps=800, seed=9)
    assert np.all(np.abs(rep.values - np.log(0.99)) < 1e-3)


def test_lyapunov_sweep_rejects_empty_grid():
    with pytest.raises(ContractError):
        lyapunov_sweep(QuadraticEnergy(), np.zeros((1, 2, 2)), [])


def test_lyapunov_sweep_grid_sorted():
    rep = lyapunov_sweep(QuadraticEnergy(c=1.0),
                         np.full((1, 2, 2), 0.5, dtype=np.float32),
                         [2.0, 0.1, 1.0], steps=200)
    assert list(rep.noise_scales) == [0.1, 1.0, 2.0]


# ------------------------------------------------------------------ CSV dumps


def test_trajectory_csv_layout(tmp_path):
    log = TrajectoryLog(steps=[0, 1], energy=[1.5, 1.25],
                        l2_clean=[0.0, 0.5], l2_poisoned=[0.25, 0.75])
    path = tmp_path / "traj.csv"
    write_trajectory_csv(log, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["step", "energy", "l2_clean", "l2_poisoned"]
    assert rows[1][0] == "0" and float(rows[1][1]) == 1.5
    assert len(rows) == 3
    assert "\r" not in path.read_text()


def test_histogram_csv_layout(tmp_path):
    xs = np.random.default_rng(8).random((10, 1, 2, 2)).astype(np.float32)
    hist = energy_histogram(QuadraticEnergy(), xs, xs, xs, bins=4)
    path = tmp_path / "hist.csv"
    write_histogram_csv(hist, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["bin_lo", "bin_hi", "count_clean", "count_poisoned",
                       "count_purified"]
    assert len(rows) == 5
    assert sum(int(r[2]) for r in rows[1:]) == 10


def test_lyapunov_csv_layout(tmp_path):
    rep = lyapunov_sweep(QuadraticEnergy(c=1.0),
                         np.full((1, 2, 2), 0.5, dtype=np.float32),
                         [0.5, 1.0], steps=100)
    path = tmp_path / "lyap.csv"
    write_lyapunov_csv(rep, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["eta", "lambda", "stderr"]
    assert len(rows) == 3
    assert float(rows[1][0]) == 0.5
