"""Energy model: scoring, Langevin-dynamics purification, and maximum-
likelihood training with a persistent image bank.

The energy is a scalar potential G(x); lower values mean the image looks
more natural under the model.  Purification runs the discretized Langevin
update

    x <- x - dt * grad G(x) + eta * sqrt(2 dt) * N(0, I)

clamping to [0, 1] after every step (the model only ever sees images in the
unit box).  Training alternates positive batches (data plus a small Gaussian
jitter) against negative batches sampled by short Langevin chains from a
persistent bank, with plain SGD on the energy difference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nets
from .autodiff import DTYPE, assert_finite
from .errors import ConfigError, ContractError, DivergenceError
from .trajectory import TrajectoryTracker

ENERGY_GAP_LIMIT = 1e3  # training aborts when |E+ - E-| exceeds this


class EnergyModel:
    """Graph-backed scalar potential over images.

    `reference_precision` selects the reference measure of the underlying
    Gibbs density: 0 means a uniform reference (the network potential alone),
    a positive value mu adds the Gaussian-reference term
    0.5 * mu * ||x - 0.5||^2, which bounds the effective potential below and
    gives the sampling dynamics genuine attractors at desk scale.
    """

    def __init__(self, graph, train_config=None, reference_precision=0.0):
        if not graph.scalar_output:
            raise ContractError("energy graph must have a scalar output")
        if reference_precision < 0:
            raise ConfigError("reference precision must be >= 0")
        self.graph = graph
        self.input_shape = graph.input_shape
        self.train_config = train_config
        self.reference_precision = float(reference_precision)

    @property
    def arch(self):
        return self.graph.arch

    def _check(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.shape != self.input_shape and x.shape[1:] != self.input_shape:
            raise ConfigError(
                f"image shape {x.shape} does not match model input {self.input_shape}")
        return x

    def _reference(self, xs):
        mu = self.reference_precision
        if mu == 0.0:
            return 0.0
        d = xs.astype(np.float64) - 0.5
        return 0.5 * mu * (d * d).sum(axis=tuple(range(1, xs.ndim)))

    def energy(self, x):
        """Scalar potential of a single image."""
        x = self._check(x)
        if x.shape != self.input_shape:
            raise ConfigError("energy() takes one image; use energy_batch for batches")
        return float(self.energy_batch(x[None])[0])

    def energy_batch(self, xs):
        xs = self._check(xs)
        y, _ = self.graph.run(xs)
        if self.reference_precision:
            y = (y + self._reference(xs)).astype(y.dtype)
        return y

    def energy_and_grad(self, xs):
        """Per-sample energies and d(energy_i)/d(x_i) in one pass."""
        xs = self._check(xs)
        e, dx, _ = self.graph.value_and_grads(xs, wrt_params=False)
        if self.reference_precision:
            e = (e + self._reference(xs)).astype(e.dtype)
            dx = dx + self.reference_precision * (xs - DTYPE(0.5))
        return e, dx

    def grad_params_mean(self, xs):
        """Gradient of the batch-mean energy with respect to each parameter.

        The reference term carries no parameters, so it drops out here.
        """
        xs = self._check(xs)
        n = xs.shape[0]
        _, _, dparams = self.graph.value_and_grads(xs, wrt_input=False)
        return {k: v / n for k, v in dparams.items()}


class QuadraticEnergy:
    """Analytic potential G(x) = c/2 * sum(x^2); exact oracle for tests.

    Its Langevin chain is a discretized Ornstein-Uhlenbeck process with a
    closed-form stationary variance, and its perturbation dynamics are
    exactly linear.
    """

    def __init__(self, c=1.0, input_shape=None):
        self.c = float(c)
        self.input_shape = input_shape

    def energy(self, x):
        x = np.asarray(x, dtype=np.float64)
        return float(0.5 * self.c * (x * x).sum())

    def energy_batch(self, xs):
        xs = np.asarray(xs)
        return (0.5 * self.c * (xs.astype(np.float64) ** 2).sum(
            axis=tuple(range(1, xs.ndim)))).astype(xs.dtype)

    def energy_and_grad(self, xs):
        xs = np.asarray(xs)
        return self.energy_batch(xs), (self.c * xs).astype(xs.dtype)


@dataclass(frozen=True)
class EbmTrainConfig:
    """Convergent-ML training settings; field defaults follow the reference
    recipe (data jitter 0.02, step size 0.01, 100 chain steps, SGD 5e-5),
    with the step count scaled down to desk size.

    bank_init selects how the persistent chains start: "uniform" noise, or
    "data" (chains start at the training images), which reaches a usable
    landscape orders of magnitude sooner at small step budgets.
    """

    steps: int = 2000
    langevin_steps: int = 100
    data_noise: float = 0.02
    step_size: float = 0.01
    lr: float = 5e-5
    batch: int = 64
    seed: int = 0
    width: int = 32
    noise_scale: float = 1.0
    bank_init: str = "uniform"
    bank_restart: float = 0.0
    reference_precision: float = 0.0

    def __post_init__(self):
        if self.steps < 0 or min(self.langevin_steps, self.batch, self.width) < 1:
            raise ConfigError("EBM training counts must be positive")
        if self.data_noise < 0 or self.step_size <= 0 or self.lr < 0 \
                or self.noise_scale < 0 or self.reference_precision < 0:
            raise ConfigError("invalid EBM training scalars")
        if not 0.0 <= self.bank_restart <= 1.0:
            raise ConfigError("bank_restart must lie in [0, 1]")
        if self.bank_init not in ("uniform", "data"):
            raise ConfigError("bank_init must be 'uniform' or 'data'")


def _draw_noise(rngs, shape):
    if isinstance(rngs, np.random.Generator):
        return rngs.normal(0.0, 1.0, size=shape).astype(DTYPE)
    return np.stack([rng.normal(0.0, 1.0, size=shape[1:])
                     for rng in rngs]).astype(DTYPE)


def _langevin_batch(model, xs, steps, step_size, noise_scale, rngs,
                    clamp=True, trackers=None):
    """Shared Langevin kernel over a batch.

    `rngs` is either a single Generator (one stream for the whole batch,
    used during training) or one Generator per image: per-image streams make
    the result independent of how images are grouped into chunks of work,
    which is what keeps parallel purification deterministic.
    """
    if steps < 0:
        raise ContractError("langevin steps must be >= 0")
    if step_size <= 0:
        raise ContractError("langevin step size must be positive")
    if noise_scale < 0:
        raise ContractError("langevin noise scale must be >= 0")
    xs = np.array(xs, dtype=DTYPE, copy=True)
    n = xs.shape[0]
    if not isinstance(rngs, np.random.Generator) and len(rngs) != n:
        raise ContractError("need one RNG stream per image")
    sigma = noise_scale * np.sqrt(2.0 * step_size)
    if trackers:
        es0 = model.energy_batch(xs)
        for i, tr in enumerate(trackers):
            if tr is not None and len(tr.log) == 0:
                tr.record(xs[i], energy=es0[i])
    for step in range(steps):
        energies, grad = model.energy_and_grad(xs)
        if not np.isfinite(grad).all():
            bad = int(np.argmax(~np.isfinite(grad.reshape(n, -1)).all(axis=1)))
            raise DivergenceError(
                f"non-finite energy gradient at langevin step {step} "
                f"(image {bad}, energy {energies[bad]:.3e})", step=step)
        if sigma > 0:
            xs = xs - step_size * grad + sigma * _draw_noise(rngs, xs.shape)
        else:
            xs = xs - step_size * grad
        if clamp:
            np.clip(xs, 0.0, 1.0, out=xs)
        if trackers:
            es = model.energy_batch(xs)
            for i, tr in enumerate(trackers):
                if tr is not None:
                    tr.record(xs[i], energy=es[i])
    return xs


def langevin_purify(model, x, steps, step_size=0.01, noise_scale=1.0, rng=None,
                    clamp=True, tracker=None):
    """Purify one image by `steps` Langevin updates; returns (image, log).

    With a fixed RNG stream the output is bit-reproducible.  `noise_scale`
    of zero degenerates to plain gradient descent on the energy.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    x = np.asarray(x, dtype=DTYPE)
    if tracker is None:
        tracker = TrajectoryTracker(energy_model=model)
    out = _langevin_batch(model, x[None], steps, step_size, noise_scale,
                          [rng], clamp=clamp, trackers=[tracker])
    return out[0], tracker.log


@dataclass
class PersistentBank:
    """Pool of negative-sample chains reused across training steps."""

    images: np.ndarray
    updates: int = 0

    @classmethod
    def uniform(cls, count, shape, rng):
        return cls(rng.random(size=(count,) + tuple(shape)).astype(DTYPE))

    @classmethod
    def from_data(cls, images):
        return cls(np.array(images, dtype=DTYPE, copy=True))

    def draw(self, m, rng):
        idx = rng.choice(self.images.shape[0], size=m, replace=False)
        return idx, self.images[idx].copy()

    def put(self, idx, values):
        self.images[idx] = values
        self.updates += 1


@dataclass
class EbmTrainResult:
    model: EnergyModel
    bank: PersistentBank
    energy_gap: list = field(default_factory=list)


def train_ebm(images, cfg: EbmTrainConfig, seeds=None):
    """Maximum-likelihood training against persistent Langevin chains.

    `images` is an (N, C, H, W) float array in [0, 1].  Returns the trained
    model together with the final bank and the per-step energy-gap trace.
    """
    images = np.asarray(images, dtype=DTYPE)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ConfigError("training data must be a non-empty (N,C,H,W) array")
    n = images.shape[0]
    shape = images.shape[1:]
    m = min(cfg.batch, n)
    root = np.random.SeedSequence([cfg.seed, 0xEB]) if seeds is None else seeds
    init_ss, bank_ss, loop_ss = root.spawn(3)
    graph = nets.energy_net(shape, width=cfg.width,
                            seed=init_ss.generate_state(1)[0])
    model = EnergyModel(graph, train_config=cfg,
                        reference_precision=cfg.reference_precision)
    if cfg.bank_init == "data":
        bank = PersistentBank.from_data(images)
    else:
        bank = PersistentBank.uniform(n, shape, np.random.default_rng(bank_ss))
    rng = np.random.default_rng(loop_ss)
    gaps = []
    for step in range(cfg.steps):
        pos_idx = rng.choice(n, size=m, replace=False)
        pos = images[pos_idx]
        if cfg.data_noise > 0:
            pos = pos + cfg.data_noise * rng.normal(size=pos.shape).astype(DTYPE)
        neg_idx, neg = bank.draw(m, rng)
        if cfg.bank_restart > 0:
            # Rejuvenate a share of chains from fresh data starts; chains that
            # restart keep traversing the shell between the data manifold and
            # the stationary cloud, which keeps near-data energy shaped.
            restart = rng.random(m) < cfg.bank_restart
            if restart.any():
                neg[restart] = images[rng.choice(n, size=int(restart.sum()))]
        chain_rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, 0xC4A1, step]))
        neg = _langevin_batch(model, neg, cfg.langevin_steps, cfg.step_size,
                              cfg.noise_scale, chain_rng, clamp=True)
        bank.put(neg_idx, neg)
        e_pos = float(model.energy_batch(pos).mean())
        e_neg = float(model.energy_batch(neg).mean())
        gap = e_pos - e_neg
        gaps.append(gap)
        if not np.isfinite(gap) or abs(gap) > ENERGY_GAP_LIMIT:
            raise DivergenceError(
                f"energy gap {gap:.3e} exceeded {ENERGY_GAP_LIMIT:.0e} "
                f"at training step {step}", step=step)
        if cfg.lr != 0.0:
            g_pos = model.grad_params_mean(pos)
            g_neg = model.grad_params_mean(neg)
            for name in graph.params:
                graph.params[name] -= (cfg.lr * (g_pos[name] - g_neg[name])).astype(DTYPE)
    for name, value in graph.params.items():
        assert_finite(value, f"trained parameter {name}")
    return EbmTrainResult(model, bank, gaps)


def energy_rank(model, images):
    """Indices sorted by descending energy; ties break by ascending index."""
    images = np.asarray(images, dtype=DTYPE)
    if images.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    energies = model.energy_batch(images)
    return np.lexsort((np.arange(images.shape[0]), -energies.astype(np.float64)))


def save_energy_model(model, path_prefix):
    extra = {"reference_precision": repr(model.reference_precision)}
    if model.train_config is not None:
        cfg = model.train_config
        extra.update({f"train.{k}": getattr(cfg, k) for k in
                      ("steps", "langevin_steps", "data_noise", "step_size",
                       "lr", "batch", "seed", "width", "noise_scale",
                       "bank_init", "bank_restart")})
    nets.save_graph(model.graph, path_prefix, extra=extra)


def load_energy_model(path_prefix):
    graph, manifest = nets.load_graph(path_prefix)
    mu = float(manifest.get("reference_precision", 0.0))
    return EnergyModel(graph, reference_precision=mu)
