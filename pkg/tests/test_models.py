import numpy as np
import pytest

from gode import autodiff as ad
from gode.layers import softmax_logits
from gode.models import (
    CKPT_MAGIC,
    CheckpointFormatError,
    ModelConfigError,
    ModelSpec,
    build,
    count_params,
    export_weight_trajectory,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    set_parameters,
    state_dict,
)
from gode.odeint import SolverConfig


def small(family, **kw):
    kw.setdefault("width", 8)
    return ModelSpec(family=family, **kw)


def inputs(seed, n=3, size=12, channels=1):
    return np.random.default_rng(seed).uniform(size=(n, channels, size, size))


def copy_gode_into_resnet(gode, resnet):
    """Give residual block j the spline's j-th control kernels (degree 0)."""
    src = state_dict(gode)
    dst = {}
    for name in state_dict(resnet):
        if name.startswith("core."):
            _, block, stage, rest = name.split(".", 3)
            if rest == "conv.kernel":
                dst[name] = src[f"core.{stage}.conv.control_kernel.{block}"]
            else:
                dst[name] = src[f"core.{stage}.{rest}"]
        else:
            dst[name] = src[name]
    set_parameters(resnet, dst)


class TestSpec:
    def test_round_trip(self):
        spec = small("gode", n=5, k=2, solver=SolverConfig("dopri5", 0, 2, rtol=1e-4))
        assert ModelSpec.from_dict(spec.to_dict()) == spec

    def test_unknown_key(self):
        with pytest.raises(ModelConfigError):
            ModelSpec.from_dict({"family": "gode", "colour": 3})

    @pytest.mark.parametrize(
        "kw",
        [
            dict(family="mlp"),
            dict(family="gode", n=1, k=1),
            dict(family="gode", dynamics_layers=0),
            dict(family="gode", bias_mode="cubic"),
            dict(family="gode", solver=SolverConfig("euler", 0, 1, 0.03)),
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ModelSpec(**kw).validate()


class TestBuild:
    @pytest.mark.parametrize("family", ["resnet", "node", "gode"])
    def test_same_seed_same_parameters(self, family):
        a, b = state_dict(build(small(family), 4)), state_dict(build(small(family), 4))
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_resnet_block_count(self):
        assert len(build(small("resnet", num_blocks=6), 0).core) == 6

    @pytest.mark.parametrize("family", ["resnet", "node", "gode"])
    def test_logit_shape_and_softmax(self, family):
        with ad.no_grad():
            logits = build(small(family), 0)(inputs(0, n=4)).data
        assert logits.shape == (4, 10)
        np.testing.assert_allclose(softmax_logits(logits).sum(1), 1, atol=1e-6)

    def test_input_channels_checked(self):
        with pytest.raises(ad.ShapeError):
            build(small("gode", in_channels=3), 0)(inputs(0))

    def test_gode_reduces_to_node_parameters(self):
        g = build(small("gode", k=0, n=1), 7)
        n = build(small("node", time_channel=False), 7)
        for (gn, gp), (nn, np_) in zip(g.named_parameters(), n.named_parameters()):
            assert gn.replace("control_kernel.0", "kernel") == nn
            assert gp.data.tobytes() == np_.data.tobytes()


class TestForward:
    def test_reduction_equivalence(self):
        g = build(small("gode", k=0, n=1), 3)
        n = build(small("node", time_channel=False), 3)
        with ad.no_grad():
            for seed in range(5):
                x = inputs(seed)
                assert np.abs(g(x).data - n(x).data).max() <= 1e-12

    @pytest.mark.parametrize("seed", range(3))
    def test_resnet_euler_equivalence(self, seed):
        g = build(small("gode", k=0, n=20, solver=SolverConfig("euler", 0, 1, 0.05)), seed)
        rng = np.random.default_rng(seed)
        for p in g.core.parameters():  # distinct kernels per step
            p.data = rng.normal(scale=0.3, size=p.shape)
        r = build(small("resnet", num_blocks=20, h_scale=0.05), seed + 100)
        copy_gode_into_resnet(g, r)
        with ad.no_grad():
            x = inputs(seed)
            a, b = g(x).data, r(x).data
        assert np.linalg.norm(a - b) / np.linalg.norm(a) < 1e-10

    def test_zero_dynamics_is_identity(self):
        m = build(small("gode", n=4), 0)
        for stage in m.core.stages:
            for ck in stage.conv.control_kernels:
                ck.data = np.zeros_like(ck.data)
            stage.conv.bias.data = np.zeros_like(stage.conv.bias.data)
        with ad.no_grad():
            x = ad.Tensor(inputs(1))
            full = m(x).data
            skip = m.head(m.features(x)).data
        np.testing.assert_array_equal(full, skip)

    @pytest.mark.parametrize("family", ["resnet", "node", "gode"])
    def test_batch_permutation_equivariance(self, family):
        m = build(small(family), 0)
        x = inputs(2, n=5)
        perm = np.random.default_rng(0).permutation(5)
        with ad.no_grad():
            np.testing.assert_array_equal(m(x).data[perm], m(x[perm]).data)

    def test_node_time_channel_widens_input(self):
        a = build(small("node", time_channel=True), 0)
        assert a.core.stages[0].conv.kernel.shape[1] == 9

    def test_solver_override(self):
        m = build(small("gode"), 0)
        with ad.no_grad():
            x = inputs(0)
            e = m(x).data
            d = m(x, solver=SolverConfig("dopri5", 0, 1, rtol=1e-6, atol=1e-8)).data
        assert np.linalg.norm(e - d) / np.linalg.norm(d) < 1e-2


class TestCounts:
    cifar = dict(family="gode", width=64, in_channels=3, k=1, dynamics_layers=2)

    @pytest.mark.parametrize("n", [2, 4, 6])
    def test_marginal(self, n):
        d = count_params(ModelSpec(**self.cifar, n=n + 2)) - count_params(ModelSpec(**self.cifar, n=n))
        assert d == 147_456

    def test_independent_of_degree(self):
        counts = {count_params(ModelSpec(**{**self.cifar, "k": k}, n=8)) for k in range(1, 6)}
        assert len(counts) == 1

    def test_affine_in_n(self):
        c = [count_params(ModelSpec(**self.cifar, n=n)) for n in range(2, 10)]
        assert set(np.diff(c)) == {2 * 64 * 64 * 9}

    @pytest.mark.parametrize("family", ["resnet", "node", "gode"])
    @pytest.mark.parametrize("bias_mode", ["constant", "spline"])
    def test_matches_built_model(self, family, bias_mode):
        spec = small(family, bias_mode=bias_mode, n=3, num_blocks=2, dynamics_layers=3)
        assert count_params(spec) == build(spec, 0).num_parameters()

    def test_absolute_targets(self):
        assert abs(count_params(ModelSpec(**self.cifar, n=8)) / 724_106 - 1) < 0.02
        node = ModelSpec(family="node", width=64, in_channels=3)
        assert abs(count_params(node) / 210_000 - 1) < 0.02


class TestTrajectory:
    def test_node_constant(self):
        m = build(small("node"), 0)
        tab = export_weight_trajectory(m, 0, np.linspace(0, 1, 11))
        assert tab.shape == (11, 8 * 8 * 9)
        assert np.abs(tab - tab[0]).max() == 0.0

    def test_gode_linear_midpoints(self):
        m = build(small("gode", n=4, k=1), 0)
        rng = np.random.default_rng(0)
        for p in m.core.stages[1].conv.control_kernels:
            p.data = rng.normal(size=p.shape)
        knots = sorted(set(m.spec.basis().knots))
        for a, b in zip(knots, knots[1:]):
            tab = export_weight_trajectory(m, 1, [a, (a + b) / 2, b])
            np.testing.assert_allclose(tab[1], (tab[0] + tab[2]) / 2, atol=1e-12)

    def test_gode_constant_basis(self):
        m = build(small("gode", n=1, k=0), 0)
        m.core.stages[0].conv.control_kernels[0].data += 1.0
        tab = export_weight_trajectory(m, 0, np.linspace(0, 1, 5))
        assert np.abs(tab - tab[0]).max() == 0.0

    def test_resnet_indexes_blocks(self):
        m = build(small("resnet", num_blocks=3), 0)
        tab = export_weight_trajectory(m, 0, [0, 1, 2])
        np.testing.assert_array_equal(tab[2], m.core[2].stages[0].conv.kernel.data.ravel())

    @pytest.mark.parametrize("family,layer", [("gode", 2), ("node", -1), ("resnet", 5)])
    def test_layer_out_of_range(self, family, layer):
        with pytest.raises(IndexError):
            export_weight_trajectory(build(small(family), 0), layer, [0.0])


class TestCheckpoint:
    @pytest.mark.parametrize("family", ["resnet", "node", "gode"])
    def test_round_trip(self, tmp_path, family):
        m = build(small(family, n=3), 5)
        path = tmp_path / "m.gode"
        save_checkpoint(m, path, extra={"epoch": 2})
        assert path.read_bytes().startswith(CKPT_MAGIC)
        back = load_checkpoint(path)
        assert back.spec == m.spec
        a, b = state_dict(m), state_dict(back)
        assert all(a[k].tobytes() == b[k].tobytes() and a[k].dtype == b[k].dtype for k in a)
        assert read_checkpoint(path)[2] == {"epoch": 2}
        with ad.no_grad():
            np.testing.assert_array_equal(m(inputs(0)).data, back(inputs(0)).data)

    def test_f32_tensors_keep_dtype(self, tmp_path):
        with ad.precision("f32"):
            m = build(small("gode"), 0)
        save_checkpoint(m, tmp_path / "m.gode")
        _, values, _ = read_checkpoint(tmp_path / "m.gode")
        assert all(v.dtype == np.float32 for v in values.values())

    def test_bad_header(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE")
        with pytest.raises(CheckpointFormatError, match="GODE-CKPT-v1"):
            read_checkpoint(tmp_path / "x")

    def test_truncated(self, tmp_path):
        save_checkpoint(build(small("gode"), 0), tmp_path / "m.gode")
        raw = (tmp_path / "m.gode").read_bytes()
        (tmp_path / "t.gode").write_bytes(raw[:-10])
        with pytest.raises(CheckpointFormatError, match="truncated"):
            read_checkpoint(tmp_path / "t.gode")

    def test_set_parameters_rejects_mismatch(self):
        m = build(small("gode"), 0)
        with pytest.raises(KeyError):
            set_parameters(m, {})
        values = state_dict(m)
        values["head.fc.bias"] = np.zeros(3)
        with pytest.raises(ValueError):
            set_parameters(m, values)
