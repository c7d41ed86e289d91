"""Graph engine: forward oracles, gradient checks, determinism, checkpoints."""

import numpy as np
import pytest

from purekit.autodiff import (DTYPE, Graph, GraphBuilder, finite_diff_check,
                              load_params, save_params)
from purekit.errors import ConfigError, ContractError, DataError
from purekit.nets import classifier_net, energy_net, timestep_embedding, unet

RNG = np.random.default_rng(1234)


def interior(shape, rng=RNG):
    """Random input bounded away from activation kinks."""
    return (0.1 + 0.8 * rng.random(shape)).astype(DTYPE)


def scalar_graph(build, input_shape, seed=0):
    b = GraphBuilder(input_shape, seed=seed)
    out = build(b)
    b.global_sum(out)
    return b.build()


# ----------------------------------------------------------- forward oracles


def test_identity_style_forward_sum():
    b = GraphBuilder((2, 2, 2))
    b.global_sum(b.input)
    g = b.build()
    assert g.forward(np.ones((2, 2, 2), dtype=DTYPE)) == pytest.approx(8.0)


def test_forward_shape_mismatch_is_config_error():
    b = GraphBuilder((2, 2, 2))
    b.global_sum(b.input)
    g = b.build()
    with pytest.raises(ConfigError):
        g.forward(np.ones((3, 2, 2), dtype=DTYPE))


def test_conv_all_ones_kernel_center_is_nine():
    # 3x3 all-ones kernel, zero padding via explicit pad=1, ones input:
    # interior output pixels see the full 3x3 neighborhood.
    b = GraphBuilder((1, 4, 4))
    cid = b.conv2d(b.input, 1, kernel=3, stride=1, padding=1, name="c")
    g = b.build()
    g.params["c.w"][:] = 1.0
    g.params["c.b"][:] = 0.0
    y, _ = g.run(np.ones((1, 1, 4, 4), dtype=DTYPE))
    expected = np.array([[4, 6, 6, 4],
                         [6, 9, 9, 6],
                         [6, 9, 9, 6],
                         [4, 6, 6, 4]], dtype=DTYPE)
    np.testing.assert_allclose(y[0, 0], expected, rtol=1e-6)
    assert y[0, 0, 1, 1] == pytest.approx(9.0)


def test_forward_deterministic_bitwise():
    g = energy_net((3, 8, 8), width=8, seed=3)
    x = interior((5, 3, 8, 8))
    y1, _ = g.run(x)
    y2, _ = g.run(x)
    assert np.array_equal(y1, y2)


def test_conv_forward_matches_direct_loop():
    rng = np.random.default_rng(7)
    for (h, k, s, p) in [(8, 3, 1, 1), (8, 3, 2, 1), (7, 3, 2, 1), (6, 4, 2, 1)]:
        b = GraphBuilder((2, h, h), seed=11)
        b.conv2d(b.input, 3, kernel=k, stride=s, padding=p, name="c")
        g = b.build()
        x = rng.random((2, 2, h, h)).astype(DTYPE)
        y, _ = g.run(x)
        w, bias = g.params["c.w"], g.params["c.b"]
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))).astype(np.float64)
        ho = (h + 2 * p - k) // s + 1
        ref = np.zeros((2, 3, ho, ho))
        for n in range(2):
            for o in range(3):
                for oy in range(ho):
                    for ox in range(ho):
                        patch = xp[n, :, s * oy:s * oy + k, s * ox:s * ox + k]
                        ref[n, o, oy, ox] = (patch * w[o]).sum() + bias[o]
        np.testing.assert_allclose(y, ref, atol=1e-4)


# ----------------------------------------------------------- gradient oracles


def test_grad_input_of_sum_is_ones():
    b = GraphBuilder((2, 3, 3))
    b.global_sum(b.input)
    g = b.build()
    gx = g.grad_input(interior((2, 3, 3)))
    np.testing.assert_array_equal(gx, np.ones((2, 3, 3), dtype=DTYPE))


def test_grad_input_of_half_square_sum_is_x():
    # 0.5 * sum(x^2) via mul; gradient is x itself.
    b = GraphBuilder((1, 4, 4))
    sq = b.mul(b.input, b.input)
    b.global_sum(sq)
    g = b.build()
    x = interior((1, 4, 4))
    gx = g.grad_input(x)
    np.testing.assert_allclose(gx, 2.0 * x, rtol=1e-6)


def test_grad_requires_scalar_output():
    b = GraphBuilder((1, 4, 4))
    b.conv2d(b.input, 2, name="c")
    g = b.build()
    with pytest.raises(ContractError):
        g.grad_input(interior((1, 4, 4)))


def test_grad_params_linear_layer_product_rule():
    b = GraphBuilder((1, 1, 1))
    b.linear(b.input, 1, name="fc")
    graph = b.build()
    graph.params["fc.w"][:] = 3.0
    graph.params["fc.b"][:] = 0.0
    # y = w*x with x=2 -> dy/dw = 2
    x = np.full((1, 1, 1), 2.0, dtype=DTYPE)
    y, cache = graph.run(x)
    assert y[0, 0] == pytest.approx(6.0)
    _, dparams = graph.backward(cache, np.ones_like(y))
    assert dparams["fc.w"][0, 0] == pytest.approx(2.0)
    assert dparams["fc.b"][0] == pytest.approx(1.0)


@pytest.mark.parametrize("op", ["conv1", "conv2", "convt", "linear", "lrelu",
                                "silu", "add", "mul", "upsample", "gnorm",
                                "gmean"])
def test_finite_diff_per_op(op):
    rng = np.random.default_rng(hash(op) % (2 ** 31))

    def build(b):
        if op == "conv1":
            return b.conv2d(b.input, 3, kernel=3, stride=1, padding=1)
        if op == "conv2":
            return b.conv2d(b.input, 3, kernel=3, stride=2, padding=1)
        if op == "convt":
            return b.conv2d_transpose(b.input, 3, kernel=4, stride=2, padding=1)
        if op == "linear":
            return b.linear(b.input, 5)
        if op == "lrelu":
            return b.leaky_relu(b.conv2d(b.input, 3), slope=0.2)
        if op == "silu":
            return b.silu(b.conv2d(b.input, 3))
        if op == "add":
            return b.add(b.conv2d(b.input, 2), b.conv2d(b.input, 2))
        if op == "mul":
            return b.mul(b.conv2d(b.input, 2), b.conv2d(b.input, 2))
        if op == "upsample":
            return b.conv2d(b.upsample2x(b.input), 2)
        if op == "gnorm":
            # follow with a conv: group sums of the normalized output alone
            # are constant by construction, leaving nothing to probe
            gn = b.group_norm(b.conv2d(b.input, 4), groups=2)
            return b.conv2d(b.silu(gn), 3)
        if op == "gmean":
            b.global_mean(b.conv2d(b.input, 3))
            return None
        raise AssertionError(op)

    b = GraphBuilder((2, 6, 6), seed=17)
    out = build(b)
    if out is not None:
        b.global_sum(out)
    g = b.build()
    x = (0.1 + 0.8 * rng.random((2, 6, 6))).astype(DTYPE)
    report = finite_diff_check(g, x, h=1e-3, probes=25, seed=5)
    assert report.max_rel_error < 1e-3, str(report)


def test_finite_diff_quadratic_is_tiny():
    b = GraphBuilder((1, 3, 3))
    b.global_sum(b.mul(b.input, b.input))
    g = b.build()
    report = finite_diff_check(g, interior((1, 3, 3)), h=1e-3, probes=9)
    assert report.max_rel_error < 1e-6


def test_finite_diff_sum_graph_error_is_rounding_level():
    b = GraphBuilder((1, 3, 3))
    b.global_sum(b.input)
    g = b.build()
    report = finite_diff_check(g, interior((1, 3, 3)), h=1e-3, probes=9)
    assert report.max_rel_error < 1e-9


def test_finite_diff_rejects_bad_h():
    b = GraphBuilder((1, 2, 2))
    b.global_sum(b.input)
    g = b.build()
    with pytest.raises(ContractError):
        finite_diff_check(g, interior((1, 2, 2)), h=0.0)


def test_composed_energy_net_gradcheck():
    g = energy_net((3, 8, 8), width=8, seed=23)
    report = finite_diff_check(g, interior((3, 8, 8)), h=1e-3, probes=40, seed=2)
    assert report.max_rel_error < 1e-3, str(report)


def test_chain_rule_composition_matches_manual_product():
    # f(g(x)): gradient through the composition equals (df/dg)*(dg/dx)
    # computed from two separate single-layer graphs.
    b = GraphBuilder((1, 2, 2), seed=9)
    mid = b.silu(b.linear(b.input, 4, name="inner"))
    b.global_sum(b.mul(mid, mid))
    g = b.build()
    x = interior((1, 2, 2))
    gx = g.grad_input(x)

    # manual: y = sum(h(u)^2), u = W x + c, h = silu
    w = g.params["inner.w"].astype(np.float64)
    c = g.params["inner.b"].astype(np.float64)
    u = w @ x.astype(np.float64).ravel() + c
    sig = 1.0 / (1.0 + np.exp(-u))
    h = u * sig
    dh = sig * (1.0 + u * (1.0 - sig))
    manual = (2.0 * h * dh) @ w
    np.testing.assert_allclose(gx.ravel(), manual, rtol=1e-4)


def test_backward_of_unet_runs_and_shapes_match():
    g = unet((3, 8, 8), width=8, seed=4)
    x = interior((4, 3, 8, 8))
    aux = {name: timestep_embedding(np.array([1.0, 5.0, 9.0, 13.0]), dim)
           for name, dim in g.aux_specs.items()}
    y, cache = g.run(x, aux=aux)
    assert y.shape == x.shape
    dx, dparams = g.backward(cache, np.ones_like(y))
    assert dx.shape == x.shape
    assert set(dparams) == set(g.params)
    for name, grad in dparams.items():
        assert grad.shape == g.params[name].shape


def test_unet_gradcheck_through_scalar_head():
    # wrap the unet in a quadratic head to get a scalar for FD probing
    gu = unet((2, 4, 4), width=4, seed=6)
    x = interior((2, 4, 4))
    aux = {name: timestep_embedding(3.0, dim) for name, dim in gu.aux_specs.items()}

    y, cache = gu.run(x, aux=aux)
    gx, _ = gu.backward(cache, 2.0 * y, wrt_params=False)

    def scalar(v):
        out, _ = gu.run(v.reshape(1, 2, 4, 4), aux=aux,
                        params={k: p.astype(np.float64)
                                for k, p in gu.params.items()})
        return float((out.astype(np.float64) ** 2).sum())

    h = 1e-3
    flat = x.astype(np.float64).ravel()
    rng = np.random.default_rng(0)
    for i in rng.choice(flat.size, size=8, replace=False):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += h
        xm[i] -= h
        numeric = (scalar(xp) - scalar(xm)) / (2 * h)
        analytic = float(gx.ravel()[i])
        assert abs(analytic - numeric) / max(abs(numeric), 1e-6) < 1e-3


def test_classifier_net_output_width():
    g = classifier_net((3, 8, 8), classes=4, width=8, seed=5)
    y, _ = g.run(interior((6, 3, 8, 8)))
    assert y.shape == (6, 4)


# ------------------------------------------------------------- checkpoint io


def test_checkpoint_roundtrip_bitwise(tmp_path):
    g = energy_net((3, 8, 8), width=8, seed=31)
    path = tmp_path / "model.pgck"
    save_params(g.params, path)
    loaded = load_params(path)
    assert set(loaded) == set(g.params)
    for name in g.params:
        assert np.array_equal(loaded[name], g.params[name])


def test_checkpoint_magic_and_layout(tmp_path):
    path = tmp_path / "one.pgck"
    save_params({"w": np.arange(6, dtype=DTYPE).reshape(2, 3)}, path)
    blob = path.read_bytes()
    assert blob[:4] == b"PGCK"
    # version, count
    assert int.from_bytes(blob[4:8], "little") == 1
    assert int.from_bytes(blob[8:12], "little") == 1
    # name record: u16 len + "w"
    assert int.from_bytes(blob[12:14], "little") == 1
    assert blob[14:15] == b"w"
    # rank + dims
    assert int.from_bytes(blob[15:19], "little") == 2
    assert int.from_bytes(blob[19:23], "little") == 2
    assert int.from_bytes(blob[23:27], "little") == 3
    assert len(blob) == 27 + 4 * 6


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.pgck"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(DataError):
        load_params(path)


def test_checkpoint_truncated(tmp_path):
    g = energy_net((3, 8, 8), width=8, seed=31)
    path = tmp_path / "model.pgck"
    save_params(g.params, path)
    clipped = tmp_path / "clipped.pgck"
    clipped.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(DataError):
        load_params(clipped)


# ------------------------------------------------------------- builder guards


def test_builder_rejects_shape_mismatch_add():
    b = GraphBuilder((2, 4, 4))
    a = b.conv2d(b.input, 2)
    c = b.conv2d(b.input, 3)
    with pytest.raises(ConfigError):
        b.add(a, c)


def test_builder_rejects_bad_groups():
    b = GraphBuilder((3, 4, 4))
    with pytest.raises(ConfigError):
        b.group_norm(b.input, groups=2)


def test_aux_input_required():
    b = GraphBuilder((2, 4, 4))
    b.global_sum(b.channel_bias(b.input, "temb"))
    g = b.build()
    with pytest.raises(ConfigError):
        g.run(interior((1, 2, 4, 4)))
