"""Stage orchestration: make-data, poison, train-ebm, train-ddpm, purify,
train-cls, eval, diagnose, executed in canonical order from one RunConfig.

Every artifact lands in the output directory and is listed in
manifest.json with a SHA-256 content hash; identical (config, seed) pairs
produce identical hashes, with wall-clock timestamps confined to the
manifest itself.  A failing stage aborts the run but leaves completed
artifacts (and the manifest written so far) in place.
"""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

from . import data, ddpm, diagnostics, ebm, pipeline, threat
from .config import RunConfig
from .errors import ConfigError, PurekitError

ARTIFACTS = {
    "train_clean": "train_clean.pgtn",
    "test_clean": "test_clean.pgtn",
    "train_poisoned": "train_poisoned.pgtn",
    "poison_spec": "poison_spec.txt",
    "ebm": "ebm",
    "ddpm": "ddpm",
    "cls": "cls",
    "train_purified": "train_purified.pgtn",
    "metrics": "metrics.csv",
}


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class RunContext:
    def __init__(self, cfg: RunConfig, out_dir):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts = []

    def path(self, name):
        return self.out / name

    def register(self, path):
        path = Path(path)
        self.artifacts.append({
            "name": path.name,
            "path": str(path.relative_to(self.out)),
            "sha256": _sha256(path),
            "bytes": path.stat().st_size,
        })

    def register_model(self, prefix):
        self.register(Path(str(prefix) + ".pgck"))
        self.register(Path(str(prefix) + ".txt"))

    def load_train(self, prefer=("train_purified", "train_poisoned", "train_clean")):
        for key in prefer:
            p = self.path(ARTIFACTS[key])
            if p.exists():
                return data.load_dataset(p)
        raise ConfigError("no training dataset found; run make-data first")


# ------------------------------------------------------------------- stages


def stage_make_data(ctx: RunContext):
    cfg = ctx.cfg
    train = data.make_textures(
        cfg.get_int("data.n", 1024),
        cfg.get_int("data.classes", 4),
        height=cfg.get_int("data.height", 8),
        width=cfg.get_int("data.width", 8),
        channels=cfg.get_int("data.channels", 3),
        seed=cfg.stage_seed("make-data"),
        name="train")
    test = data.make_textures(
        cfg.get_int("data.test_n", 256),
        cfg.get_int("data.classes", 4),
        height=cfg.get_int("data.height", 8),
        width=cfg.get_int("data.width", 8),
        channels=cfg.get_int("data.channels", 3),
        seed=cfg.stage_seed("make-data") + 1,
        name="test")
    data.save_dataset(train, ctx.path(ARTIFACTS["train_clean"]))
    data.save_dataset(test, ctx.path(ARTIFACTS["test_clean"]))
    ctx.register(ctx.path(ARTIFACTS["train_clean"]))
    ctx.register(ctx.path(ARTIFACTS["test_clean"]))


def _poison_spec(cfg: RunConfig):
    return threat.PoisonSpec(
        kind=cfg.get_str("poison.kind", "triggered"),
        budget=cfg.get_float("poison.budget", 8.0 / 255.0),
        fraction=cfg.get_float("poison.fraction", 0.1),
        target_class=cfg.get_int("poison.target_class", 0),
        seed=cfg.stage_seed("poison"))


def stage_poison(ctx: RunContext):
    clean = data.load_dataset(ctx.path(ARTIFACTS["train_clean"]))
    spec = _poison_spec(ctx.cfg)
    if spec.kind == "triggered":
        poisoned, spec = threat.inject_triggered(clean, spec)
    else:
        poisoned, spec = threat.inject_triggerless(clean, spec)
    data.save_dataset(poisoned, ctx.path(ARTIFACTS["train_poisoned"]))
    with open(ctx.path(ARTIFACTS["poison_spec"]), "w", encoding="utf-8") as fh:
        fh.write(spec.to_text())
    ctx.register(ctx.path(ARTIFACTS["train_poisoned"]))
    ctx.register(ctx.path(ARTIFACTS["poison_spec"]))


def stage_train_ebm(ctx: RunContext):
    cfg = ctx.cfg
    source = cfg.get_str("ebm.train_on", "clean")
    if source not in ("clean", "poisoned"):
        raise ConfigError(f"ebm.train_on must be clean|poisoned, got {source!r}")
    key = "train_clean" if source == "clean" else "train_poisoned"
    train = data.load_dataset(ctx.path(ARTIFACTS[key]))
    tc = ebm.EbmTrainConfig(
        steps=cfg.get_int("ebm.steps", 2000),
        langevin_steps=cfg.get_int("ebm.langevin_steps", 100),
        data_noise=cfg.get_float("ebm.data_noise", 0.02),
        step_size=cfg.get_float("ebm.step_size", 0.01),
        lr=cfg.get_float("ebm.lr", 5e-5),
        batch=cfg.get_int("ebm.batch", 64),
        width=cfg.get_int("ebm.width", 32),
        noise_scale=cfg.get_float("ebm.noise_scale", 1.0),
        bank_init=cfg.get_str("ebm.bank_init", "uniform"),
        bank_restart=cfg.get_float("ebm.bank_restart", 0.0),
        reference_precision=cfg.get_float("ebm.reference_precision", 0.0),
        seed=cfg.stage_seed("train-ebm"))
    result = ebm.train_ebm(train.images, tc)
    ebm.save_energy_model(result.model, ctx.path(ARTIFACTS["ebm"]))
    ctx.register_model(ctx.path(ARTIFACTS["ebm"]))


def stage_train_ddpm(ctx: RunContext):
    cfg = ctx.cfg
    source = cfg.get_str("ddpm.train_on", "clean")
    key = "train_clean" if source == "clean" else "train_poisoned"
    train = data.load_dataset(ctx.path(ARTIFACTS[key]))
    schedule = ddpm.make_schedule(
        cfg.get_int("ddpm.t_train", 1000),
        cfg.get_float("ddpm.beta_start", 1e-4),
        cfg.get_float("ddpm.beta_end", 0.02))
    tc = ddpm.DdpmTrainConfig(
        prefix_steps=cfg.get_int("ddpm.prefix_steps", 250),
        epochs=cfg.get_int("ddpm.epochs", 200),
        batch=cfg.get_int("ddpm.batch", 64),
        lr=cfg.get_float("ddpm.lr", 0.02),
        momentum=cfg.get_float("ddpm.momentum", 0.9),
        width=cfg.get_int("ddpm.width", 32),
        seed=cfg.stage_seed("train-ddpm"))
    predictor, _ = ddpm.train_ddpm(train.images, schedule, tc)
    ddpm.save_predictor(predictor, schedule, ctx.path(ARTIFACTS["ddpm"]))
    ctx.register_model(ctx.path(ARTIFACTS["ddpm"]))


def _purify_config(cfg: RunConfig):
    return pipeline.PurifyConfig(
        ebm_steps=cfg.get_int("purify.ebm_steps", 0),
        ddpm_steps=cfg.get_int("purify.ddpm_steps", 0),
        reps=cfg.get_int("purify.reps", 1),
        filter_fraction=cfg.get_float("purify.k", 1.0),
        step_size=cfg.get_float("purify.step_size", 0.01),
        noise_scale=cfg.get_float("purify.eta", 1.0),
        seed=cfg.stage_seed("purify"))


def _load_models(ctx: RunContext, need_energy, need_predictor):
    models = pipeline.PurifyModels()
    ebm_path = ctx.path(ARTIFACTS["ebm"])
    if Path(str(ebm_path) + ".pgck").exists():
        models.energy = ebm.load_energy_model(ebm_path)
    ddpm_path = ctx.path(ARTIFACTS["ddpm"])
    if Path(str(ddpm_path) + ".pgck").exists():
        models.predictor, models.schedule = ddpm.load_predictor(ddpm_path)
    if need_energy and models.energy is None:
        raise ConfigError("stage needs an energy model; run train-ebm first")
    if need_predictor and models.predictor is None:
        raise ConfigError("stage needs a noise predictor; run train-ddpm first")
    return models


def stage_purify(ctx: RunContext):
    pcfg = _purify_config(ctx.cfg)
    source = ctx.load_train(prefer=("train_poisoned", "train_clean"))
    need_energy = pcfg.ebm_steps > 0 or 0.0 < pcfg.filter_fraction < 1.0
    models = _load_models(ctx, need_energy, pcfg.ddpm_steps > 0)
    purified = pipeline.purify_dataset(source, pcfg, models,
                                       workers=ctx.cfg.workers)
    data.save_dataset(purified, ctx.path(ARTIFACTS["train_purified"]))
    ctx.register(ctx.path(ARTIFACTS["train_purified"]))


def stage_train_cls(ctx: RunContext):
    cfg = ctx.cfg
    source = cfg.get_str("cls.train_on", "auto")
    if source == "auto":
        train = ctx.load_train()
    elif source in ("purified", "poisoned", "clean"):
        train = data.load_dataset(ctx.path(ARTIFACTS[f"train_{source}"]))
    else:
        raise ConfigError(
            f"cls.train_on must be auto|purified|poisoned|clean, got {source!r}")
    tc = threat.ClassifierTrainConfig(
        epochs=cfg.get_int("cls.epochs", 20),
        lr=cfg.get_float("cls.lr", 0.05),
        momentum=cfg.get_float("cls.momentum", 0.9),
        batch=cfg.get_int("cls.batch", 64),
        width=cfg.get_int("cls.width", 16),
        seed=cfg.stage_seed("train-cls"))
    classifier, _ = threat.train_classifier(train, tc)
    threat.save_classifier(classifier, ctx.path(ARTIFACTS["cls"]))
    ctx.register_model(ctx.path(ARTIFACTS["cls"]))


def stage_eval(ctx: RunContext):
    import csv

    classifier = threat.load_classifier(ctx.path(ARTIFACTS["cls"]))
    test = data.load_dataset(ctx.path(ARTIFACTS["test_clean"]))
    rows = [("natural_accuracy", threat.natural_accuracy(classifier, test))]
    spec_path = ctx.path(ARTIFACTS["poison_spec"])
    if spec_path.exists():
        from .nets import load_manifest
        spec = threat.PoisonSpec.from_mapping(load_manifest(spec_path))
        if spec.kind == "triggered":
            rows.append(("psr_triggered",
                         threat.psr_triggered(classifier, test, spec)))
        elif spec.target_indices:
            targets = test.images[list(spec.target_indices)]
            rows.append(("psr_triggerless",
                         threat.psr_triggerless(classifier, targets,
                                                spec.target_class)))
    with open(ctx.path(ARTIFACTS["metrics"]), "w", encoding="utf-8",
              newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name, value in rows:
            w.writerow([name, repr(float(value))])
    ctx.register(ctx.path(ARTIFACTS["metrics"]))


def stage_diagnose(ctx: RunContext):
    cfg = ctx.cfg
    pcfg = _purify_config(cfg)
    if pcfg.ebm_steps == 0 and pcfg.ddpm_steps == 0:
        raise ConfigError("diagnose needs a non-identity purify configuration")
    models = _load_models(ctx, need_energy=True, need_predictor=pcfg.ddpm_steps > 0)
    clean = data.load_dataset(ctx.path(ARTIFACTS["train_clean"]))
    poisoned_path = ctx.path(ARTIFACTS["train_poisoned"])
    if not poisoned_path.exists():
        raise ConfigError("diagnose needs a poisoned dataset; run poison first")
    poisoned = data.load_dataset(poisoned_path)

    from .nets import load_manifest
    spec = threat.PoisonSpec.from_mapping(
        load_manifest(ctx.path(ARTIFACTS["poison_spec"])))
    idx = spec.poisoned_indices[0] if spec.poisoned_indices else 0
    log_clean, log_poisoned = diagnostics.l2_trajectory(
        models, pcfg, clean.images[idx], poisoned.images[idx])
    diagnostics.write_trajectory_csv(log_clean, ctx.path("trajectory_clean.csv"))
    diagnostics.write_trajectory_csv(log_poisoned,
                                     ctx.path("trajectory_poisoned.csv"))
    ctx.register(ctx.path("trajectory_clean.csv"))
    ctx.register(ctx.path("trajectory_poisoned.csv"))

    pidx = list(spec.poisoned_indices) or [0]
    purified = pipeline.purify_dataset(poisoned.subset(pidx), pcfg, models,
                                       workers=cfg.workers)
    hist = diagnostics.energy_histogram(
        models.energy, clean.images, poisoned.images[pidx], purified.images,
        bins=cfg.get_int("diagnose.bins", 32))
    diagnostics.write_histogram_csv(hist, ctx.path("energy_histogram.csv"))
    ctx.register(ctx.path("energy_histogram.csv"))

    etas = cfg.get_floats("diagnose.etas", [0.1, 0.5, 1.0, 2.0, 4.0])
    report = diagnostics.lyapunov_sweep(
        models.energy, clean.images[idx], etas,
        steps=cfg.get_int("diagnose.lyapunov_steps", 1500),
        seed=cfg.stage_seed("diagnose"),
        step_size=pcfg.step_size)
    diagnostics.write_lyapunov_csv(report, ctx.path("lyapunov.csv"))
    ctx.register(ctx.path("lyapunov.csv"))

    if cfg.get_bool("diagnose.dump_images", True):
        data.save_ppm(clean.images[idx], ctx.path("sample_clean.ppm"))
        data.save_ppm(poisoned.images[idx], ctx.path("sample_poisoned.ppm"))
        data.save_ppm(purified.images[0], ctx.path("sample_purified.ppm"))
        for name in ("sample_clean.ppm", "sample_poisoned.ppm",
                     "sample_purified.ppm"):
            ctx.register(ctx.path(name))


_STAGE_FN = {
    "make-data": stage_make_data,
    "poison": stage_poison,
    "train-ebm": stage_train_ebm,
    "train-ddpm": stage_train_ddpm,
    "purify": stage_purify,
    "train-cls": stage_train_cls,
    "eval": stage_eval,
    "diagnose": stage_diagnose,
}


def run(cfg: RunConfig, out_dir=None):
    """Execute the configured stages in canonical order; returns the manifest."""
    _ = cfg.seed  # seed is mandatory; fail before any work
    out_dir = Path(out_dir or cfg.get_str("out", required=True))
    ctx = RunContext(cfg, out_dir)
    status = "ok"
    failed_stage = None
    try:
        for stage in cfg.stages:
            try:
                _STAGE_FN[stage](ctx)
            except PurekitError as exc:
                failed_stage = stage
                raise type(exc)(f"stage {stage}: {exc}") from exc
    except PurekitError:
        status = "failed"
        raise
    finally:
        manifest = {
            "status": status,
            "failed_stage": failed_stage,
            "created": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
            "config": {k: cfg.values[k] for k in sorted(cfg.values)},
            "artifacts": ctx.artifacts,
        }
        with open(ctx.out / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return manifest


def verify_manifest(out_dir):
    """Recompute artifact hashes; returns a list of mismatched paths."""
    out = Path(out_dir)
    with open(out / "manifest.json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    bad = []
    for item in manifest["artifacts"]:
        p = out / item["path"]
        if not p.exists() or _sha256(p) != item["sha256"]:
            bad.append(item["path"])
    return bad


def artifact_hashes(manifest):
    return {item["path"]: item["sha256"] for item in manifest["artifacts"]}
