"""Network architectures: energy scorer, noise-prediction U-net, classifier.

All three are small ConvNets sized for 8x8..32x32 images so they train in
minutes on a CPU.  Checkpoints pair a binary PGCK parameter file with a
plain-text sidecar manifest recording the architecture name, input shape,
and any extra settings needed to rebuild the graph.
"""

from __future__ import annotations

import numpy as np

from .autodiff import GraphBuilder, load_params, save_params
from .errors import ConfigError, DataError


def energy_net(input_shape, width=32, seed=0):
    """Scalar potential: four convolutions (two stride-2) into a global sum.

    Smooth SiLU activations keep the energy twice differentiable, which the
    perturbation-growth diagnostics rely on.
    """
    b = GraphBuilder(input_shape, seed=seed)
    h = b.silu(b.conv2d(b.input, width, 3, 1, 1, name="c1"))
    h = b.silu(b.conv2d(h, width * 2, 3, 2, 1, name="c2"))
    h = b.silu(b.conv2d(h, width * 2, 3, 2, 1, name="c3"))
    h = b.conv2d(h, width * 2, 3, 1, 1, name="c4")
    b.global_sum(h)
    return b.build(arch=f"energy_conv/w{width}")


def unet(input_shape, width=32, seed=0):
    """Noise predictor: 2-down/2-up ConvNet with skip additions.

    Timestep conditioning enters as per-channel biases computed from a
    sinusoidal embedding of t (aux inputs "temb_in" and "temb_mid").
    """
    c = input_shape[0]
    b = GraphBuilder(input_shape, seed=seed)
    h0 = b.conv2d(b.input, width, 3, 1, 1, name="in")
    h0 = b.silu(b.channel_bias(h0, "temb_in"))
    h1 = b.conv2d(h0, width * 2, 3, 2, 1, name="down1")
    h1 = b.silu(b.group_norm(h1, groups=4, name="gn1"))
    h2 = b.conv2d(h1, width * 4, 3, 2, 1, name="down2")
    h2 = b.silu(b.channel_bias(b.group_norm(h2, groups=4, name="gn2"), "temb_mid"))
    u1 = b.conv2d_transpose(h2, width * 2, 4, 2, 1, name="up1")
    u1 = b.silu(b.add(u1, h1))
    u2 = b.conv2d(b.upsample2x(u1), width, 3, 1, 1, name="up2")
    u2 = b.silu(b.add(u2, h0))
    b.conv2d(u2, c, 3, 1, 1, name="out", zero_init=True)
    return b.build(arch=f"unet/w{width}")


def classifier_net(input_shape, classes, width=16, seed=0):
    """Class scorer: three leaky-ReLU convolutions and a linear head."""
    b = GraphBuilder(input_shape, seed=seed)
    h = b.leaky_relu(b.conv2d(b.input, width, 3, 1, 1, name="c1"))
    h = b.leaky_relu(b.conv2d(h, width * 2, 3, 2, 1, name="c2"))
    h = b.leaky_relu(b.conv2d(h, width * 2, 3, 2, 1, name="c3"))
    b.linear(h, classes, name="head")
    return b.build(arch=f"classifier_conv/w{width}")


_BUILDERS = {
    "energy_conv": energy_net,
    "unet": unet,
    "classifier_conv": classifier_net,
}


def build_by_name(arch, input_shape, seed=0, classes=None):
    """Rebuild a graph from its architecture string, e.g. "unet/w32"."""
    try:
        family, tag = arch.split("/")
        width = int(tag.lstrip("w"))
    except ValueError as exc:
        raise DataError(f"unrecognized architecture string {arch!r}") from exc
    if family not in _BUILDERS:
        raise DataError(f"unknown architecture family {family!r}")
    if family == "classifier_conv":
        if classes is None:
            raise ConfigError("classifier architecture needs a class count")
        return classifier_net(input_shape, classes, width=width, seed=seed)
    return _BUILDERS[family](input_shape, width=width, seed=seed)


def timestep_embedding(t, dim):
    """Sinusoidal features of diffusion step t; t may be a scalar or (N,) array."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = max(dim // 2, 1)
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if emb.shape[1] < dim:
        emb = np.pad(emb, ((0, 0), (0, dim - emb.shape[1])))
    return emb[:, :dim].astype(np.float32)


def save_graph(graph, path_prefix, extra=None):
    """Write <prefix>.pgck (parameters) and <prefix>.txt (manifest)."""
    save_params(graph.params, f"{path_prefix}.pgck")
    lines = [
        f"arch = {graph.arch}",
        "input_shape = " + ",".join(str(d) for d in graph.input_shape),
    ]
    for key, value in sorted((extra or {}).items()):
        lines.append(f"{key} = {value}")
    with open(f"{path_prefix}.txt", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_manifest(path):
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"{path}: malformed manifest line {line!r}")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def load_graph(path_prefix, classes=None):
    """Rebuild a graph from a checkpoint pair; returns (graph, manifest dict)."""
    manifest = load_manifest(f"{path_prefix}.txt")
    try:
        input_shape = tuple(int(v) for v in manifest["input_shape"].split(","))
        arch = manifest["arch"]
    except KeyError as exc:
        raise DataError(f"{path_prefix}.txt: missing manifest key {exc}") from exc
    if classes is None and "classes" in manifest:
        classes = int(manifest["classes"])
    graph = build_by_name(arch, input_shape, classes=classes)
    params = load_params(f"{path_prefix}.pgck")
    if set(params) != set(graph.params):
        raise DataError(f"{path_prefix}.pgck: parameter names do not match {arch}")
    for name, value in params.items():
        if value.shape != graph.params[name].shape:
            raise DataError(f"{path_prefix}.pgck: shape mismatch for {name}")
        graph.params[name] = value
    return graph, manifest
