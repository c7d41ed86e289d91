"""Analysis instruments: purification-distance trajectories and crossover
detection, energy histograms, and maximal-exponent estimation of the noisy
gradient dynamics over a range of noise strengths.

The perturbation-growth estimator evolves a base trajectory and companion
trajectories displaced by a tiny perturbation under *shared* noise draws
(otherwise the estimate measures noise, not sensitivity), accumulating
log-growth between periodic renormalizations.  States evolve in float64 so
the tiny separations are not drowned by rounding.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DataError
from .pipeline import purify_image
from .trajectory import TrajectoryLog, TrajectoryTracker

PERTURBATION_NORM = 1e-5
GROWTH_FLOOR = -50.0  # per-step log-growth reported for fully collapsed separations


def l2_trajectory(models, cfg, x_clean, x_poisoned):
    """Purify a clean image and its poisoned counterpart with a shared noise
    stream, logging l2 distances to both references at every step.

    Returns (clean-run log, poisoned-run log).
    """
    x_clean = np.asarray(x_clean)
    x_poisoned = np.asarray(x_poisoned)
    if x_clean.shape != x_poisoned.shape:
        raise ContractError("clean and poisoned images must share a shape")
    logs = []
    for start in (x_clean, x_poisoned):
        tracker = TrajectoryTracker(ref_clean=x_clean, ref_poisoned=x_poisoned,
                                    energy_model=models.energy)
        purify_image(start, cfg, models, image_index=0, tracker=tracker)
        tracker.log.validate()
        logs.append(tracker.log)
    return logs[0], logs[1]


def crossover_step(log: TrajectoryLog):
    """First step at which the trajectory is farther from its poisoned start
    than from the clean original; None if that never happens."""
    if len(log) == 0:
        raise ContractError("crossover needs a non-empty trajectory")
    for step, dc, dp in zip(log.steps, log.l2_clean, log.l2_poisoned):
        if math.isnan(dc) or math.isnan(dp):
            continue
        if dp > dc:
            return step
    return None


@dataclass
class EnergyHistogram:
    edges: np.ndarray
    counts: dict       # name -> (bins,) int array
    means: dict        # name -> float

    def total(self, name):
        return int(self.counts[name].sum())


def energy_histogram(model, clean, poisoned, purified, bins=32):
    """Histogram the three image sets' energies over one shared bin range."""
    if bins < 2:
        raise ContractError("need at least two histogram bins")
    sets = {"clean": np.asarray(clean), "poisoned": np.asarray(poisoned),
            "purified": np.asarray(purified)}
    energies = {}
    for name, images in sets.items():
        if images.shape[0] == 0:
            raise DataError(f"energy histogram: {name} set is empty")
        energies[name] = np.asarray(model.energy_batch(images), dtype=np.float64)
    lo = min(e.min() for e in energies.values())
    hi = max(e.max() for e in energies.values())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    counts = {name: np.histogram(e, bins=edges)[0] for name, e in energies.items()}
    means = {name: float(e.mean()) for name, e in energies.items()}
    return EnergyHistogram(edges, counts, means)


@dataclass
class LyapunovEstimate:
    value: float
    stderr: float
    flagged: bool = False  # persistent separation underflow/overflow


@dataclass
class LyapunovReport:
    noise_scales: np.ndarray
    values: np.ndarray
    stderrs: np.ndarray
    transition: float | None  # first noise scale with positive exponent


def lyapunov(model, x0, noise_scale, steps, renorm_interval=10, rng=None,
             step_size=0.01, directions=3, eps0=PERTURBATION_NORM,
             burn_in=0):
    """Maximal per-step log-growth rate of an infinitesimal perturbation.

    Base and companion trajectories consume identical noise; every
    `renorm_interval` steps each companion's separation is measured and
    rescaled back to `eps0`.  Averaging over a few independent initial
    directions reduces estimator variance.  `burn_in` evolves the base
    state alone first so growth is measured on the dynamics' steady state
    rather than the transient away from `x0`.
    """
    if renorm_interval < 1 or steps < renorm_interval:
        raise ContractError("need steps >= renorm_interval >= 1")
    if rng is None:
        rng = np.random.default_rng(0)
    x = np.asarray(x0, dtype=np.float64)
    sigma = noise_scale * np.sqrt(2.0 * step_size)
    for _ in range(burn_in):
        _, grad = model.energy_and_grad(x[None])
        x = x - step_size * np.asarray(grad[0], dtype=np.float64) \
            + sigma * rng.normal(size=x.shape)
    dirs = rng.normal(size=(directions,) + x.shape)
    dirs /= np.sqrt((dirs ** 2).sum(axis=tuple(range(1, dirs.ndim)),
                                    keepdims=True))
    states = np.concatenate([x[None], x[None] + eps0 * dirs], axis=0)
    rates = [[] for _ in range(directions)]
    flagged = False
    block_start = 0
    for step in range(1, steps + 1):
        _, grad = model.energy_and_grad(states)
        noise = rng.normal(size=x.shape)  # one shared draw per step
        states = states - step_size * np.asarray(grad, dtype=np.float64) \
            + sigma * noise[None]
        if step % renorm_interval == 0 or step == steps:
            span = step - block_start
            block_start = step
            for d in range(directions):
                sep = states[1 + d] - states[0]
                norm = float(np.sqrt((sep ** 2).sum()))
                if norm <= 0.0 or not np.isfinite(norm):
                    flagged = True
                    rates[d].append(GROWTH_FLOOR)
                    sep = dirs[d] * eps0
                else:
                    rate = math.log(norm / eps0) / span
                    if rate < GROWTH_FLOOR:
                        flagged = True
                        rate = GROWTH_FLOOR
                    rates[d].append(rate)
                    sep = sep * (eps0 / norm)
                states[1 + d] = states[0] + sep
    rates = np.asarray(rates)  # (directions, blocks)
    value = float(rates.mean())
    stderr = _batch_means_stderr(rates)
    return LyapunovEstimate(value, stderr, flagged)


def _batch_means_stderr(rates, target_batches=20):
    """Standard error via batch means over consecutive renormalization
    blocks, which discounts their autocorrelation."""
    nblocks = rates.shape[1]
    if nblocks < 2:
        return 0.0
    width = max(1, nblocks // target_batches)
    usable = (nblocks // width) * width
    batches = rates[:, :usable].reshape(rates.shape[0], -1, width).mean(axis=2)
    batches = batches.reshape(-1)
    if len(batches) < 2:
        return 0.0
    return float(batches.std(ddof=1) / np.sqrt(len(batches)))


def lyapunov_sweep(model, x0, noise_scales, steps=2000, renorm_interval=10,
                   seed=0, step_size=0.01, directions=3, burn_in=0):
    """Exponent estimate per noise scale; the transition estimate is the
    first grid value whose exponent is positive."""
    grid = sorted(float(v) for v in noise_scales)
    if not grid:
        raise ContractError("noise-scale grid must be non-empty")
    values, stderrs = [], []
    transition = None
    for i, eta in enumerate(grid):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x17AB, i]))
        est = lyapunov(model, x0, eta, steps, renorm_interval, rng,
                       step_size=step_size, directions=directions,
                       burn_in=burn_in)
        values.append(est.value)
        stderrs.append(est.stderr)
        if transition is None and est.value > 0:
            transition = eta
    return LyapunovReport(np.asarray(grid), np.asarray(values),
                          np.asarray(stderrs), transition)


# ------------------------------------------------------------------ CSV dumps


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


def write_trajectory_csv(log: TrajectoryLog, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = _writer(fh)
        w.writerow(["step", "energy", "l2_clean", "l2_poisoned"])
        for row in zip(log.steps, log.energy, log.l2_clean, log.l2_poisoned):
            w.writerow([row[0]] + [repr(v) for v in row[1:]])


def write_histogram_csv(hist: EnergyHistogram, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = _writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count_clean", "count_poisoned",
                    "count_purified"])
        for i in range(len(hist.edges) - 1):
            w.writerow([repr(float(hist.edges[i])), repr(float(hist.edges[i + 1])),
                        int(hist.counts["clean"][i]),
                        int(hist.counts["poisoned"][i]),
                        int(hist.counts["purified"][i])])


def write_lyapunov_csv(report: LyapunovReport, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = _writer(fh)
        w.writerow(["eta", "lambda", "stderr"])
        for eta, lam, se in zip(report.noise_scales, report.values,
                                report.stderrs):
            w.writerow([repr(float(eta)), repr(float(lam)), repr(float(se))])
