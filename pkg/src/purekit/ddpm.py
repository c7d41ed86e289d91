"""Truncated-schedule denoising diffusion: linear beta schedule, prefix-only
training, and forward-noise / reverse-denoise purification.

The model is trained to predict the Gaussian noise mixed into an image at a
uniformly sampled step t drawn only from an initial prefix of the schedule.
Purification noises an image part-way up the forward chain (never to the
prior) and runs the learned reverse kernel back down; generation quality is
deliberately sacrificed for restoration quality.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nets
from .autodiff import DTYPE, assert_finite
from .errors import ConfigError, ContractError, DivergenceError
from .trajectory import TrajectoryTracker

LOSS_LIMIT = 1e3


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule; index convention: betas[t-1] belongs to step t,
    and alpha_bar at t=1 equals alpha_1 (the empty product is 1)."""

    betas: np.ndarray        # (T,) float64
    alphas: np.ndarray       # 1 - betas
    alpha_bars: np.ndarray   # cumulative products of alphas
    beta_start: float
    beta_end: float

    @property
    def t_train(self):
        return len(self.betas)

    def alpha_bar(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.t_train):
            raise ContractError(f"diffusion step out of range 1..{self.t_train}")
        return self.alpha_bars[t - 1]

    def snr(self, t):
        ab = self.alpha_bar(t)
        return ab / (1.0 - ab)


def make_schedule(t_train, beta_start=1e-4, beta_end=0.02):
    """Linear beta schedule over `t_train` steps."""
    if t_train < 1:
        raise ConfigError("schedule needs at least one step")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"invalid beta endpoints ({beta_start}, {beta_end}); "
            "need 0 < start <= end < 1")
    betas = np.linspace(beta_start, beta_end, t_train, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas),
                         float(beta_start), float(beta_end))


def q_sample(schedule, x0, t, eps):
    """Closed-form forward noising: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.

    `t` may be a scalar (whole batch at one step) or a per-sample array.
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps, dtype=x0.dtype)
    if eps.shape != x0.shape:
        raise ContractError(f"noise shape {eps.shape} != image shape {x0.shape}")
    ab = schedule.alpha_bar(t)
    if np.ndim(ab) > 0:  # per-sample steps on a batched input
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    ab = ab.astype(np.float64)
    out = np.sqrt(ab) * x0.astype(np.float64) + np.sqrt(1.0 - ab) * eps.astype(np.float64)
    return out.astype(x0.dtype)


class NoisePredictor:
    """Graph-backed epsilon predictor, conditioned on t via sinusoidal
    per-channel biases."""

    def __init__(self, graph, prefix_steps, train_config=None):
        self.graph = graph
        self.input_shape = graph.input_shape
        self.prefix_steps = int(prefix_steps)
        self.train_config = train_config

    def _aux(self, t, n):
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        return {name: nets.timestep_embedding(t, dim)
                for name, dim in self.graph.aux_specs.items()}

    def predict(self, xs, t):
        """Predicted noise for a batch at step(s) t."""
        xs = np.asarray(xs, dtype=DTYPE)
        y, _ = self.graph.run(xs, aux=self._aux(t, xs.shape[0]))
        return y

    def predict_and_cache(self, xs, t):
        xs = np.asarray(xs, dtype=DTYPE)
        aux = self._aux(t, xs.shape[0])
        y, cache = self.graph.run(xs, aux=aux)
        return y, cache


@dataclass(frozen=True)
class DdpmTrainConfig:
    """Prefix-only training settings; by default only the first 250 steps of
    a 1000-step schedule are ever sampled."""

    prefix_steps: int = 250
    epochs: int = 200
    batch: int = 64
    lr: float = 0.02
    momentum: float = 0.9
    seed: int = 0
    width: int = 32

    def __post_init__(self):
        if self.prefix_steps < 1:
            raise ConfigError("training prefix must cover at least one step")
        if self.epochs < 0 or self.batch < 1 or self.lr < 0 or self.width < 1:
            raise ConfigError("invalid DDPM training settings")


def train_ddpm(images, schedule, cfg: DdpmTrainConfig):
    """Standard noise-regression training restricted to the schedule prefix.

    Returns (predictor, per-step losses).  SGD with momentum; aborts if the
    batch loss ever exceeds LOSS_LIMIT.
    """
    images = np.asarray(images, dtype=DTYPE)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ConfigError("training data must be a non-empty (N,C,H,W) array")
    if cfg.prefix_steps > schedule.t_train:
        raise ConfigError(
            f"training prefix {cfg.prefix_steps} exceeds schedule length "
            f"{schedule.t_train}")
    n = images.shape[0]
    m = min(cfg.batch, n)
    root = np.random.SeedSequence([cfg.seed, 0xDD])
    init_ss, loop_ss = root.spawn(2)
    graph = nets.unet(images.shape[1:], width=cfg.width,
                      seed=init_ss.generate_state(1)[0])
    predictor = NoisePredictor(graph, cfg.prefix_steps, train_config=cfg)
    rng = np.random.default_rng(loop_ss)
    velocity = {k: np.zeros_like(v) for k, v in graph.params.items()}
    losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n - m + 1, m):
            x0 = images[order[lo:lo + m]]
            t = rng.integers(1, cfg.prefix_steps + 1, size=m)
            eps = rng.normal(size=x0.shape).astype(DTYPE)
            xt = q_sample(schedule, x0, t, eps)
            pred, cache = predictor.predict_and_cache(xt, t)
            resid = pred - eps
            loss = float(np.mean(resid.astype(np.float64) ** 2))
            losses.append(loss)
            if not np.isfinite(loss) or loss > LOSS_LIMIT:
                raise DivergenceError(
                    f"noise-regression loss {loss:.3e} exceeded {LOSS_LIMIT:.0e} "
                    f"at update {len(losses) - 1}", step=len(losses) - 1)
            dy = (2.0 / resid.size) * resid
            _, dparams = graph.backward(cache, dy.astype(DTYPE), wrt_input=False)
            for name in graph.params:
                velocity[name] = cfg.momentum * velocity[name] + dparams[name]
                graph.params[name] -= (cfg.lr * velocity[name]).astype(DTYPE)
    for name, value in graph.params.items():
        assert_finite(value, f"trained parameter {name}")
    return predictor, losses


def _ddpm_purify_batch(predictor, schedule, xs, t_ddpm, rngs,
                       trackers=None, reverse_noise=True):
    """Forward-noise a batch to step t_ddpm, then run the learned reverse
    kernel back down.  Per-image RNG streams, shared step index across the
    batch.  Clamps to [0, 1] only at the very end."""
    if t_ddpm < 0:
        raise ContractError("diffusion purify steps must be >= 0")
    if t_ddpm > predictor.prefix_steps:
        raise ContractError(
            f"purify steps {t_ddpm} exceed the trained prefix "
            f"{predictor.prefix_steps}")
    xs = np.array(xs, dtype=DTYPE, copy=True)
    n = xs.shape[0]
    if trackers:
        for i, tr in enumerate(trackers):
            if tr is not None and len(tr.log) == 0:
                tr.record(xs[i])
    if t_ddpm == 0:
        return xs
    eps = _stack_noise(rngs, xs.shape)
    xs = q_sample(schedule, xs, t_ddpm, eps)
    if trackers:
        for i, tr in enumerate(trackers):
            if tr is not None:
                tr.record(xs[i])
    for t in range(t_ddpm, 0, -1):
        pred = predictor.predict(xs, t)
        beta = schedule.betas[t - 1]
        alpha = schedule.alphas[t - 1]
        ab = schedule.alpha_bars[t - 1]
        mean = (xs - (beta / np.sqrt(1.0 - ab)) * pred) / np.sqrt(alpha)
        if t > 1 and reverse_noise:
            z = _stack_noise(rngs, xs.shape)
            xs = (mean + np.sqrt(beta) * z).astype(DTYPE)
        else:
            xs = mean.astype(DTYPE)
        if trackers:
            for i, tr in enumerate(trackers):
                if tr is not None:
                    tr.record(xs[i] if t > 1 else np.clip(xs[i], 0.0, 1.0))
    np.clip(xs, 0.0, 1.0, out=xs)
    return xs


def _stack_noise(rngs, shape):
    if isinstance(rngs, np.random.Generator):
        return rngs.normal(size=shape).astype(DTYPE)
    return np.stack([rng.normal(size=shape[1:]) for rng in rngs]).astype(DTYPE)


def ddpm_purify(predictor, schedule, x, t_ddpm, rng=None, tracker=None,
                reverse_noise=True):
    """Purify one image with a T-step diffusion round trip; returns (image, log)."""
    if rng is None:
        rng = np.random.default_rng(0)
    x = np.asarray(x, dtype=DTYPE)
    if tracker is None:
        tracker = TrajectoryTracker()
    out = _ddpm_purify_batch(predictor, schedule, x[None], t_ddpm, [rng],
                             trackers=[tracker], reverse_noise=reverse_noise)
    return out[0], tracker.log


def save_predictor(predictor, schedule, path_prefix):
    extra = {
        "prefix_steps": predictor.prefix_steps,
        "t_train": schedule.t_train,
        "beta_start": repr(schedule.beta_start),
        "beta_end": repr(schedule.beta_end),
    }
    if predictor.train_config is not None:
        cfg = predictor.train_config
        extra.update({f"train.{k}": getattr(cfg, k) for k in
                      ("epochs", "batch", "lr", "momentum", "seed", "width")})
    nets.save_graph(predictor.graph, path_prefix, extra=extra)


def load_predictor(path_prefix):
    """Returns (predictor, schedule) rebuilt from a checkpoint pair."""
    graph, manifest = nets.load_graph(path_prefix)
    try:
        prefix_steps = int(manifest["prefix_steps"])
        schedule = make_schedule(int(manifest["t_train"]),
                                 float(manifest["beta_start"]),
                                 float(manifest["beta_end"]))
    except KeyError as exc:
        raise ConfigError(f"{path_prefix}.txt missing schedule key {exc}") from exc
    return NoisePredictor(graph, prefix_steps), schedule
