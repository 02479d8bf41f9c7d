import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcaresunet import nn
from gcaresunet import tensor as T
from gcaresunet.attention import (
    CBAM,
    GcaConfig,
    GroupedCoordAttention,
    SqueezeExcitation,
    baseline_attention_forward,
    coord_attention,
    gca_forward,
    gca_param_count,
    make_attention,
)
from gcaresunet.tensor import Tensor, grad_check, grad_check_params

SEEDS = range(5)


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def randomize_bn(bn, seed):
    rng = np.random.default_rng(seed)
    c = bn.weight.shape[1]
    bn.weight.data = (1.0 + 0.3 * rng.standard_normal((1, c, 1, 1))).astype(np.float32)
    bn.bias.data = (0.3 * rng.standard_normal((1, c, 1, 1))).astype(np.float32)


def gca(channels, seed=0, eval_mode=True, **kw):
    m = GroupedCoordAttention(channels, GcaConfig(**kw), np.random.default_rng(seed))
    randomize_bn(m.bn, seed + 100)
    if eval_mode:
        m.eval()
    return m


class TestGcaConfig:
    def test_defaults(self):
        cfg = GcaConfig()
        assert (cfg.groups, cfg.reduction, cfg.pooling) == (2, 2, "both")

    def test_mid_floor(self):
        assert GcaConfig(groups=2, reduction=8).mid(16) == 4
        assert GcaConfig(groups=2, reduction=2).mid(64) == 16

    def test_indivisible_rejected(self):
        with pytest.raises(ValueError, match="C=10.*G=4"):
            GroupedCoordAttention(10, GcaConfig(groups=4))

    def test_bad_pooling(self):
        with pytest.raises(ValueError):
            GcaConfig(pooling="median").validate()


class TestParamCount:
    def test_worked_example(self):
        assert gca_param_count(64, GcaConfig(groups=2, reduction=2, min_mid=4)) == 2176

    def test_small_example(self):
        assert gca_param_count(8, GcaConfig(groups=1, reduction=1, min_mid=1)) == 160

    def test_quadratic_in_channels(self):
        cfg = GcaConfig(groups=2, reduction=2)
        a, b = gca_param_count(256, cfg), gca_param_count(512, cfg)
        mid = cfg.mid(256)
        # the 4*mid BN term is linear, the conv terms quadruple
        assert b - 2 * 4 * 2 * mid == 4 * (a - 4 * 2 * mid)

    @settings(max_examples=40, deadline=None)
    @given(g=st.sampled_from([1, 2, 4]), r=st.sampled_from([1, 2, 4, 8]), mult=st.integers(1, 8),
           pooling=st.sampled_from(["avg", "max", "both"]), share=st.booleans())
    def test_matches_enumeration(self, g, r, mult, pooling, share):
        cfg = GcaConfig(groups=g, reduction=r, pooling=pooling, share_across_groups=share)
        c = 4 * g * mult
        assert GroupedCoordAttention(c, cfg).num_elements() == gca_param_count(c, cfg)


class TestGcaForward:
    def test_shape(self):
        x = Tensor(rand((2, 64, 56, 56)))
        assert gca(64)(x).shape == (2, 64, 56, 56)

    @pytest.mark.parametrize("pooling", ["avg", "max", "both"])
    @pytest.mark.parametrize("groups", [1, 2, 4])
    def test_gates_in_unit_interval(self, pooling, groups):
        x = rand((2, 8, 5, 7), 3)
        y = gca(8, groups=groups, pooling=pooling)(Tensor(x)).data
        assert np.all(np.abs(y) <= np.abs(x.astype(np.float32)))
        nz = np.abs(x) > 1e-3
        ratio = y[nz] / x.astype(np.float32)[nz]
        assert np.all(ratio > 0) and np.all(ratio < 1)

    @pytest.mark.parametrize("eval_mode", [True, False])
    def test_zero_weights_quarter(self, eval_mode):
        m = GroupedCoordAttention(16, GcaConfig())
        m.train(not eval_mode)
        m.conv1.weight.data[:] = 0
        m.conv2.weight.data[:] = 0
        x = rand((2, 16, 6, 5))
        y = m(Tensor(x))
        np.testing.assert_allclose(y.data, 0.25 * x, atol=1e-6)

    def test_g1_equals_coordatt_bitwise(self):
        x = Tensor(rand((2, 12, 6, 7)))
        ref = coord_attention(12, rng=np.random.default_rng(5))
        ref.eval()
        g1 = GroupedCoordAttention(12, GcaConfig(groups=1, pooling="avg"), np.random.default_rng(5))
        g1.eval()
        assert np.array_equal(gca_forward(x, g1.cfg, g1).data,
                              baseline_attention_forward("CoordAtt", x, ref).data)

    @pytest.mark.parametrize("pooling", ["avg", "max", "both"])
    def test_group_locality(self, pooling):
        m = gca(8, seed=1, groups=2, pooling=pooling)
        x = rand((1, 8, 5, 5), 2)
        base = m(Tensor(x)).data
        for c in range(8):
            xp = x.copy()
            xp[0, c] += rand((5, 5), 10 + c)
            out = m(Tensor(xp)).data
            group = c // 4
            other = slice(4, 8) if group == 0 else slice(0, 4)
            assert np.array_equal(out[:, other], base[:, other])
            assert not np.array_equal(out[:, c], base[:, c])

    def test_group_permutation_equivariance(self):
        g, cg = 4, 3
        m = gca(g * cg, seed=2, groups=g, reduction=1, min_mid=2)
        mid = m.cfg.mid(g * cg)
        perm = [2, 0, 3, 1]
        ch = np.concatenate([np.arange(p * cg, (p + 1) * cg) for p in perm])
        hid = np.concatenate([np.arange(p * mid, (p + 1) * mid) for p in perm])
        q = gca(g * cg, seed=2, groups=g, reduction=1, min_mid=2)
        q.conv1.weight.data = m.conv1.weight.data[hid]
        q.conv2.weight.data = m.conv2.weight.data[ch]
        for name in ("weight", "bias", "running_mean", "running_var"):
            getattr(q.bn, name).data = getattr(m.bn, name).data[:, hid]
        x = rand((2, g * cg, 5, 6), 3)
        y = m(Tensor(x)).data
        yq = q(Tensor(x[:, ch])).data
        np.testing.assert_allclose(yq, y[:, ch], atol=1e-6, rtol=0)

    def test_constant_input_both_doubles_avg(self):
        x = np.broadcast_to(rand((2, 8, 1, 1), 4), (2, 8, 5, 6)).copy()
        both = gca(8, seed=3, pooling="both")
        avg = gca(8, seed=3, pooling="avg")
        y_both = both(Tensor(x)).data
        y_avg = avg(Tensor(2.0 * x)).data / 2.0
        np.testing.assert_allclose(y_both, y_avg, atol=1e-6)

    def test_shared_weights_are_tied(self):
        m = gca(8, groups=2, share_across_groups=True)
        w1, _ = m._weights()
        assert w1.shape == (2 * m.cfg.mid(8), 4, 1, 1)
        half = w1.shape[0] // 2
        assert np.array_equal(w1.data[:half], w1.data[half:])

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("pooling", ["avg", "max", "both"])
    def test_gradcheck(self, seed, pooling):
        m = gca(8, seed=seed, eval_mode=False, groups=2, reduction=2, pooling=pooling)
        x = rand((2, 8, 6, 6), seed)
        proj = rand((2, 8, 6, 6), seed + 50)
        assert grad_check(lambda t: T.sum(m(t) * proj), x, n_coords=60,
                          rng=np.random.default_rng(seed)) < 1e-3
        xt = Tensor(x)
        errs = grad_check_params(lambda: T.sum(m(xt) * proj), dict(m.named_parameters()))
        assert max(errs.values()) < 1e-3


class TestBaselines:
    def test_se_zero_second_fc(self):
        se = SqueezeExcitation(32, rng=np.random.default_rng(0))
        se.fc2.weight.data[:] = 0
        x = rand((2, 32, 4, 4))
        np.testing.assert_allclose(se(Tensor(x)).data, 0.5 * x, rtol=1e-6)

    def test_cbam_constant_input(self):
        cb = CBAM(16, rng=np.random.default_rng(1))
        k = rand((1, 16, 1, 1), 2)
        x = np.broadcast_to(k, (1, 16, 10, 10)).copy()
        y = cb(Tensor(x)).data
        ratio = y[0, :, 3:7, 3:7] / x[0, :, 3:7, 3:7]
        # interior pixels see no zero padding, so the spatial gate is constant there
        np.testing.assert_allclose(ratio, ratio[:, :1, :1] * np.ones_like(ratio), rtol=1e-5)
        # closed form: channel gate from 2*mlp(k), then a constant spatial gate
        k32 = k.astype(np.float32)
        mlp = lambda d: cb.fc2.weight.data[:, :, 0, 0] @ np.maximum(cb.fc1.weight.data[:, :, 0, 0] @ d, 0)  # noqa: E731
        cg = 1 / (1 + np.exp(-2 * mlp(k32.ravel())))
        z = cg * k32.ravel()
        w = cb.spatial.weight.data[0]
        sg = 1 / (1 + np.exp(-(w[0].sum() * z.mean() + w[1].sum() * z.max())))
        np.testing.assert_allclose(y[0, :, 5, 5], z * sg, rtol=1e-5)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            make_attention("transformer", 8)
        with pytest.raises(ValueError):
            baseline_attention_forward("GCA", Tensor(np.zeros((1, 8, 2, 2))), gca(8))

    def test_none_kind(self):
        assert make_attention("none", 8) is None

    @pytest.mark.parametrize("kind", ["SE", "CBAM", "CoordAtt", "GCA"])
    def test_shape_preserved(self, kind):
        m = make_attention(kind, 32, rng=np.random.default_rng(0))
        assert m(Tensor(rand((2, 32, 7, 5)))).shape == (2, 32, 7, 5)

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("kind", ["SE", "CBAM", "CoordAtt"])
    def test_gradcheck(self, kind, seed):
        m = make_attention(kind, 16, rng=np.random.default_rng(seed))
        for sub in m.modules():
            if isinstance(sub, nn.BatchNorm2d):
                randomize_bn(sub, seed)
            if isinstance(sub, nn.Conv2d) and sub.bias is not None:
                sub.bias.data = (0.1 * rand(sub.bias.shape, seed + 7)).astype(np.float32)
        x = rand((2, 16, 6, 6), seed)
        proj = rand((2, 16, 6, 6), seed + 1)
        rng = np.random.default_rng(seed)
        assert grad_check(lambda t: T.sum(m(t) * proj), x, n_coords=60, rng=rng) < 1e-3
        xt = Tensor(x)
        errs = grad_check_params(lambda: T.sum(m(xt) * proj), dict(m.named_parameters()),
                                 n_coords=30, rng=rng)
        assert max(errs.values()) < 1e-3
