"""Synthetic desk-scale poisoning, a small classifier, and attack metrics.

Triggered poisoning adds a fixed full-image sign-pattern patch (bounded in
l-infinity by the budget) to a subset of one class without touching labels;
triggerless poisoning perturbs individual images with random sign patterns.
Poison success rate is measured the standard way: for triggered attacks, the
fraction of non-target-class test images that flip to the adversarial label
once the patch is applied; for triggerless attacks, the fraction of chosen
target images classified as their adversarial label.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import nets
from .autodiff import DTYPE, assert_finite
from .errors import ConfigError, ContractError, DataError, DivergenceError

LOSS_LIMIT = 1e3


@dataclass(frozen=True)
class PoisonSpec:
    """Synthetic threat description.

    budget is the l-infinity bound (e.g. 8/255), fraction the share of the
    whole dataset to poison, target_class the adversarial label.  For
    triggered attacks the patch is the deterministic checkerboard from
    `make_trigger`; triggerless perturbations are random sign patterns drawn
    from `seed`.
    """

    kind: str = "triggered"
    budget: float = 8.0 / 255.0
    fraction: float = 0.1
    target_class: int = 0
    seed: int = 0
    poisoned_indices: tuple = ()
    target_indices: tuple = ()  # test-set indices evaluated for triggerless PSR

    def __post_init__(self):
        if self.kind not in ("triggered", "triggerless"):
            raise ConfigError(f"unknown poison kind {self.kind!r}")
        if not 0.0 <= self.fraction <= 1.0:
            raise ConfigError("poison fraction must lie in [0, 1]")
        if self.budget < 0:
            raise ConfigError("perturbation budget must be >= 0")

    def to_text(self):
        lines = [f"poison.kind = {self.kind}",
                 f"poison.budget = {repr(self.budget)}",
                 f"poison.fraction = {repr(self.fraction)}",
                 f"poison.target_class = {self.target_class}",
                 f"poison.seed = {self.seed}"]
        if self.poisoned_indices:
            lines.append("poison.poisoned_indices = "
                         + ",".join(str(i) for i in self.poisoned_indices))
        if self.target_indices:
            lines.append("poison.target_indices = "
                         + ",".join(str(i) for i in self.target_indices))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, kv):
        def ints(s):
            return tuple(int(v) for v in s.split(",") if v != "")
        return cls(
            kind=kv.get("poison.kind", "triggered"),
            budget=float(kv.get("poison.budget", 8.0 / 255.0)),
            fraction=float(kv.get("poison.fraction", 0.1)),
            target_class=int(kv.get("poison.target_class", 0)),
            seed=int(kv.get("poison.seed", 0)),
            poisoned_indices=ints(kv.get("poison.poisoned_indices", "")),
            target_indices=ints(kv.get("poison.target_indices", "")),
        )


def make_trigger(shape, budget):
    """Full-image checkerboard sign pattern scaled to the budget."""
    c, h, w = shape
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    sign = np.where((yy + xx) % 2 == 0, 1.0, -1.0)
    return np.broadcast_to(sign, (c, h, w)).astype(DTYPE) * DTYPE(budget)


def inject_triggered(dataset, spec):
    """Add the trigger patch to floor(fraction*N) images of the target class.

    Labels are never modified (clean-label attack); poisoned pixels are
    clipped back into [0, 1], which can only shrink the perturbation.
    Returns (poisoned dataset, spec with the chosen indices recorded).
    """
    if spec.kind != "triggered":
        raise ConfigError("inject_triggered needs a triggered poison spec")
    images = np.array(dataset.images, dtype=DTYPE, copy=True)
    n = images.shape[0]
    count = int(np.floor(spec.fraction * n))
    if count == 0:
        if spec.fraction > 0:
            warnings.warn("poison fraction too small: zero images poisoned")
        return dataset.with_images(images), replace(spec, poisoned_indices=())
    candidates = np.flatnonzero(dataset.labels == spec.target_class)
    if len(candidates) < count:
        raise ConfigError(
            f"cannot poison {count} images: class {spec.target_class} has "
            f"only {len(candidates)}")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x9017]))
    chosen = np.sort(rng.choice(candidates, size=count, replace=False))
    rho = make_trigger(images.shape[1:], spec.budget)
    images[chosen] = np.clip(images[chosen] + rho, 0.0, 1.0)
    return (dataset.with_images(images),
            replace(spec, poisoned_indices=tuple(int(i) for i in chosen)))


def inject_triggerless(dataset, spec):
    """Perturb floor(fraction*N) target-class images with random sign patterns."""
    if spec.kind != "triggerless":
        raise ConfigError("inject_triggerless needs a triggerless poison spec")
    images = np.array(dataset.images, dtype=DTYPE, copy=True)
    n = images.shape[0]
    count = int(np.floor(spec.fraction * n))
    if count == 0:
        if spec.fraction > 0:
            warnings.warn("poison fraction too small: zero images poisoned")
        return dataset.with_images(images), replace(spec, poisoned_indices=())
    candidates = np.flatnonzero(dataset.labels == spec.target_class)
    if len(candidates) < count:
        raise ConfigError(
            f"cannot poison {count} images: class {spec.target_class} has "
            f"only {len(candidates)}")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x9018]))
    chosen = np.sort(rng.choice(candidates, size=count, replace=False))
    for i in chosen:
        delta = spec.budget * rng.choice([-1.0, 1.0], size=images.shape[1:])
        images[i] = np.clip(images[i] + delta.astype(DTYPE), 0.0, 1.0)
    return (dataset.with_images(images),
            replace(spec, poisoned_indices=tuple(int(i) for i in chosen)))


class Classifier:
    """Graph-backed class scorer; argmax prediction with lowest-index ties."""

    def __init__(self, graph, class_count, train_config=None):
        self.graph = graph
        self.class_count = int(class_count)
        self.input_shape = graph.input_shape
        self.train_config = train_config

    def scores(self, x):
        y, _ = self.graph.run(np.asarray(x, dtype=DTYPE))
        return y[0] if np.asarray(x).shape == self.input_shape else y

    def predict(self, x):
        return int(np.argmax(self.scores(np.asarray(x))))

    def predict_batch(self, xs):
        y, _ = self.graph.run(np.asarray(xs, dtype=DTYPE))
        return np.argmax(y, axis=1)


def _label_fn(classifier):
    if hasattr(classifier, "predict"):
        return classifier.predict
    if callable(classifier):
        return classifier
    raise ContractError("classifier must expose predict() or be callable")


@dataclass(frozen=True)
class ClassifierTrainConfig:
    epochs: int = 20
    lr: float = 0.05
    momentum: float = 0.9
    batch: int = 64
    width: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch < 1 or self.lr < 0 or self.width < 1:
            raise ConfigError("invalid classifier training settings")


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def train_classifier(dataset, cfg: ClassifierTrainConfig):
    """Cross-entropy SGD training of the small ConvNet; returns (classifier,
    per-update losses).  Deterministic given the seed."""
    images = np.asarray(dataset.images, dtype=DTYPE)
    labels = np.asarray(dataset.labels).astype(np.int64)
    if images.shape[0] == 0:
        raise ConfigError("cannot train a classifier on an empty dataset")
    classes = dataset.class_count
    n = images.shape[0]
    m = min(cfg.batch, n)
    root = np.random.SeedSequence([cfg.seed, 0xC15])
    init_ss, loop_ss = root.spawn(2)
    graph = nets.classifier_net(images.shape[1:], classes, width=cfg.width,
                                seed=init_ss.generate_state(1)[0])
    rng = np.random.default_rng(loop_ss)
    velocity = {k: np.zeros_like(v) for k, v in graph.params.items()}
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n - m + 1, m):
            idx = order[lo:lo + m]
            x, y = images[idx], labels[idx]
            scores, cache = graph.run(x)
            probs = _softmax(scores.astype(np.float64))
            loss = float(-np.log(np.clip(probs[np.arange(len(y)), y],
                                         1e-12, None)).mean())
            losses.append(loss)
            if not np.isfinite(loss) or loss > LOSS_LIMIT:
                raise DivergenceError(
                    f"classifier loss {loss:.3e} exceeded {LOSS_LIMIT:.0e} "
                    f"at update {len(losses) - 1}", step=len(losses) - 1)
            onehot = np.zeros_like(probs)
            onehot[np.arange(len(y)), y] = 1.0
            dy = ((probs - onehot) / len(y)).astype(DTYPE)
            _, dparams = graph.backward(cache, dy, wrt_input=False)
            for name in graph.params:
                velocity[name] = cfg.momentum * velocity[name] + dparams[name]
                graph.params[name] -= (cfg.lr * velocity[name]).astype(DTYPE)
    for name, value in graph.params.items():
        assert_finite(value, f"trained parameter {name}")
    return Classifier(graph, classes, train_config=cfg), losses


def natural_accuracy(classifier, dataset):
    """Top-1 accuracy on a clean labeled set."""
    if dataset.images.shape[0] == 0:
        raise DataError("cannot score accuracy on an empty test set")
    fn = _label_fn(classifier)
    if hasattr(classifier, "predict_batch"):
        preds = classifier.predict_batch(dataset.images)
    else:
        preds = np.array([fn(x) for x in dataset.images])
    return float((preds == dataset.labels.astype(np.int64)).mean())


def psr_triggered(classifier, test_set, spec):
    """Fraction of non-target-class test images classified as the adversarial
    label once the trigger patch is applied."""
    labels = test_set.labels.astype(np.int64)
    keep = labels != spec.target_class
    if not keep.any():
        raise DataError("triggered PSR denominator is empty")
    rho = make_trigger(test_set.images.shape[1:], spec.budget)
    triggered = np.clip(test_set.images[keep] + rho, 0.0, 1.0)
    fn = _label_fn(classifier)
    if hasattr(classifier, "predict_batch"):
        preds = classifier.predict_batch(triggered)
    else:
        preds = np.array([fn(x) for x in triggered])
    return float((preds == spec.target_class).mean())


def psr_triggerless(classifier, targets, target_class):
    """Fraction of target images classified as the adversarial label."""
    targets = np.asarray(targets, dtype=DTYPE)
    if targets.ndim == 3:
        targets = targets[None]
    if targets.shape[0] == 0:
        raise ContractError("triggerless PSR needs at least one target")
    fn = _label_fn(classifier)
    if hasattr(classifier, "predict_batch"):
        preds = classifier.predict_batch(targets)
    else:
        preds = np.array([fn(x) for x in targets])
    return float((preds == target_class).mean())


def save_classifier(classifier, path_prefix):
    nets.save_graph(classifier.graph, path_prefix,
                    extra={"classes": classifier.class_count})


def load_classifier(path_prefix):
    graph, manifest = nets.load_graph(path_prefix)
    try:
        classes = int(manifest["classes"])
    except KeyError as exc:
        raise DataError(f"{path_prefix}.txt missing class count") from exc
    return Classifier(graph, classes)
