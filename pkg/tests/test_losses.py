import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from stagedistill import losses as L
from stagedistill.errors import InputError, ParameterError


@pytest.fixture(autouse=True)
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


W = L.LossWeights()


def t(x):
    return torch.tensor(x, dtype=torch.float64)


FT = [[[1., 2.], [0., 1.]], [[3., 0.], [1., 1.]], [[0.5, 0.5], [0.5, 0.5]], [[2., -1.], [0., 2.]]]
FS = [[[1., 1.], [1., 0.]], [[2., 1.], [0., 1.]], [[0., 1.], [1., 0.]], [[1., -1.], [1., 1.]]]
FT2 = [[[0., 1.], [2., 1.]], [[1., 1.], [0., 3.]], [[2., 0.], [1., 0.]], [[1., 2.], [1., 1.]]]
FS2 = [[[1., 0.], [2., 1.]], [[0., 1.], [1., 3.]], [[2., 1.], [1., 1.]], [[0., 2.], [1., 0.]]]


class TestSoften:
    def test_uniform(self):
        assert torch.allclose(L.soften(t([0., 0., 0.]), 4.0), t([1 / 3] * 3))

    def test_closed_form(self):
        assert torch.allclose(L.soften(t([math.log(2), 0.]), 1.0), t([2 / 3, 1 / 3]))
        assert torch.allclose(L.soften(t([4 * math.log(3), 0.]), 4.0), t([0.75, 0.25]))

    def test_large_temperature_is_uniform(self):
        p = L.soften(torch.randn(7) * 10, 1e6)
        assert (p - 1 / 7).abs().max() <= 1e-4

    @pytest.mark.parametrize("T", [0.0, -1.0])
    def test_bad_temperature(self, T):
        with pytest.raises(ParameterError):
            L.soften(t([1., 2.]), T)

    def test_non_finite(self):
        with pytest.raises(InputError):
            L.soften(t([1., float("nan")]))


class TestCrossEntropy:
    def test_uniform(self):
        assert L.cross_entropy(t([0., 0.]), 0).item() == pytest.approx(math.log(2))

    def test_confident_limit(self):
        assert L.cross_entropy(t([40., 0.]), 0).item() < 1e-15

    def test_hand_computed(self):
        assert L.cross_entropy(t([1., 2., 3.]), 2).item() == pytest.approx(0.40760596444438046, rel=1e-12)

    def test_soft_label(self):
        v = L.cross_entropy(t([1., 2., 3.]), t([0.2, 0.3, 0.5])).item()
        assert v == pytest.approx(oracles.cross_entropy([1., 2., 3.], [0.2, 0.3, 0.5]), rel=1e-12)

    def test_out_of_range(self):
        with pytest.raises(InputError):
            L.cross_entropy(t([0., 0.]), 2)


class TestKL:
    def test_identity(self):
        assert L.kl_divergence(t([0.5, 0.5]), t([0.5, 0.5])).item() == 0.0

    def test_one_hot(self):
        assert L.kl_divergence(t([1., 0.]), t([0.5, 0.5])).item() == pytest.approx(math.log(2))

    def test_random_five_class(self):
        rng = np.random.default_rng(0)
        p, q = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
        assert L.kl_divergence(t(p), t(q)).item() == pytest.approx(oracles.kl(p, q), rel=1e-12)

    def test_zero_student_probability_is_clamped(self):
        v = L.kl_divergence(t([0.5, 0.5]), t([1.0, 0.0])).item()
        assert v == pytest.approx(0.5 * math.log(0.5) - 0.5 * math.log(1e-12) + 0.5 * math.log(0.5) - 0.5 * 0.0)

    def test_mismatch(self):
        with pytest.raises(InputError):
            L.kl_divergence(t([0.5, 0.5]), t([0.2, 0.3, 0.5]))


class TestResponse:
    def test_equal_logits_is_ce(self):
        z = t([0.3, -1.0, 2.0])
        assert L.response_loss(z, z, 1, W).item() == pytest.approx(L.cross_entropy(z, 1).item(), abs=1e-12)

    def test_lambda_zero(self):
        s, te = t([0.3, -1.0, 2.0]), t([2.0, 0.0, 0.0])
        assert L.response_loss(s, te, 1, W.replace(lambda_=0.0)).item() == L.cross_entropy(s, 1).item()

    def test_fixed_instance(self):
        v = L.response_loss(t([1.0, -0.5, 2.0]), t([3.0, 0.0, -1.0]), 0, W.replace(lambda_=0.9, temperature=4.0))
        assert v.item() == pytest.approx(3.2862073690651745, rel=1e-10)

    def test_without_t2_scaling(self):
        s, te = [1.0, -0.5, 2.0], [3.0, 0.0, -1.0]
        v = L.response_loss(t(s), t(te), 0, W, t2_scaling=False)
        assert v.item() == pytest.approx(oracles.response_loss(s, te, 0, 0.9, 4.0, t2=False), rel=1e-10)


class TestAttention:
    def test_single_channel_squares(self):
        f = torch.randn(1, 3, 4)
        assert torch.allclose(L.attention_map(f), f[0] ** 2)

    def test_ones(self):
        assert torch.equal(L.attention_map(torch.ones(2, 2, 2)), torch.full((2, 2), 2.0))

    def test_random_against_loops(self):
        f = torch.randn(3, 2, 2)
        assert np.allclose(L.attention_map(f).numpy(), oracles.attention_map(f.tolist()))

    def test_identity_and_scale(self):
        f = torch.randn(4, 3, 3)
        assert L.at_distance(f, f).item() == 0.0
        for c in (1e-3, 1.0, 1e3):
            assert L.at_distance(f, c * f).item() < 1e-9

    def test_orthogonal_maps(self):
        f_t = torch.zeros(1, 2, 2)
        f_s = torch.zeros(1, 2, 2)
        f_t[0, 0, 0] = 1.0
        f_s[0, 1, 1] = 3.0
        assert L.at_distance(f_t, f_s).item() == pytest.approx(math.sqrt(2))

    def test_spatial_mismatch(self):
        with pytest.raises(InputError):
            L.at_distance(torch.randn(2, 4, 4), torch.randn(2, 2, 2))
        assert L.at_distance(torch.randn(2, 4, 4), torch.randn(2, 2, 2), resize=True).item() >= 0


class TestTopK:
    def test_all_channels(self):
        f = torch.randn(5, 2, 2)
        assert sorted(L.df_topk_select(f, 5).tolist()) == list(range(5))

    def test_single_hot_channel(self):
        f = torch.zeros(6, 2, 2)
        f[4] = 10.0
        assert L.df_topk_select(f, 1).tolist() == [4]

    def test_random_eight_channels(self):
        f = torch.randn(8, 3, 3)
        assert L.df_topk_select(f, 4).tolist() == oracles.topk_select(f.tolist(), 4)

    def test_ties_prefer_low_index(self):
        f = torch.ones(6, 2, 2)
        f[3] = 2.0
        assert L.df_topk_select(f, 4).tolist() == [3, 0, 1, 2]

    def test_k_too_large(self):
        with pytest.raises(ParameterError):
            L.df_topk_select(torch.randn(3, 2, 2), 4)


class TestDF:
    def test_identity(self):
        f = torch.randn(6, 3, 3)
        for k in (1, 3, 6):
            assert L.df_distance(f, f, k).item() == 0.0

    def test_all_channels_equals_per_channel_sum(self):
        f_t, f_s = torch.randn(5, 3, 3), torch.randn(5, 3, 3)
        expected = 0.0
        for j in range(5):
            a_t = f_t[j].flatten() ** 2
            a_s = f_s[j].flatten() ** 2
            expected += (a_t / a_t.norm() - a_s / a_s.norm()).norm().item()
        assert L.df_distance(f_t, f_s, 5).item() == pytest.approx(expected, rel=1e-12)

    def test_fixed_instance(self):
        assert L.df_distance(t(FT), t(FS), 2).item() == pytest.approx(0.950652015414228, rel=1e-12)

    def test_channel_mismatch_needs_adapter(self):
        f_t, f_s = torch.randn(4, 2, 2), torch.randn(3, 2, 2)
        with pytest.raises(ParameterError):
            L.df_distance(f_t, f_s, 2)
        adapter = torch.nn.Conv2d(3, 4, 1)
        assert L.df_distance(f_t, f_s, 2, adapter=adapter).item() >= 0
        with pytest.raises(ParameterError):
            L.df_distance(f_t, f_s, 4, adapter=adapter)


class TestFeatureLoss:
    def test_equal_taps_is_ce(self):
        pairs = [(torch.randn(2, 4, 3, 3),) * 2, (torch.randn(2, 8, 2, 2),) * 2]
        z = torch.randn(2, 5)
        y = torch.tensor([0, 3])
        assert L.feature_loss(pairs, z, y, W.replace(k_channels=4)).item() == pytest.approx(
            L.cross_entropy(z, y).item(), abs=1e-12
        )

    def test_zero_weights(self):
        pairs = [(torch.randn(4, 3, 3), torch.randn(4, 3, 3))]
        z = torch.randn(3)
        v = L.feature_loss(pairs, z, 1, W.replace(alpha=0.0, beta=0.0))
        assert v.item() == L.cross_entropy(z, 1).item()

    def test_two_pairs_default_weights(self):
        v = L.feature_loss(
            [(t(FT), t(FS)), (t(FT2), t(FS2))], t([0.2, 0.1, -0.3]), 1,
            W.replace(alpha=200.0, beta=300.0, k_channels=2),
        )
        assert v.item() == pytest.approx(527.8388093978975, rel=1e-12)


class TestFSP:
    def test_ones(self):
        assert torch.equal(L.fsp_matrix(torch.ones(2, 2, 2), torch.ones(2, 2, 2)), torch.ones(2, 2))

    def test_disjoint_support(self):
        f_in = torch.zeros(2, 2, 2)
        f_out = torch.zeros(3, 2, 2)
        f_in[:, 0, :] = torch.randn(2, 2)
        f_out[:, 1, :] = torch.randn(3, 2)
        assert torch.equal(L.fsp_matrix(f_in, f_out), torch.zeros(2, 3))

    def test_random_against_loops(self):
        a, b = torch.randn(3, 2, 2), torch.randn(2, 2, 2)
        g = L.fsp_matrix(a, b)
        assert g.shape == (3, 2)
        assert np.allclose(g.numpy(), oracles.fsp_matrix(a.tolist(), b.tolist()), rtol=1e-12)

    def test_mismatch(self):
        with pytest.raises(InputError):
            L.fsp_matrix(torch.randn(2, 4, 4), torch.randn(2, 2, 2))


class TestRelationLoss:
    def test_equal_is_ce(self):
        g = [torch.randn(3, 4), torch.randn(4, 4)]
        z = torch.randn(4)
        assert L.relation_loss(g, g, z, 2, W).item() == L.cross_entropy(z, 2).item()

    def test_gamma_zero(self):
        z = torch.randn(4)
        v = L.relation_loss([torch.randn(2, 2)], [torch.randn(2, 2)], z, 0, W.replace(gamma=0.0))
        assert v.item() == L.cross_entropy(z, 0).item()

    def test_fixed_pair(self):
        v = L.relation_loss([t([[0.5, 1.0], [0.25, 0.0]])], [t([[0.0, 1.5], [0.25, 1.0]])], t([0.2, 0.1, -0.3]), 1, W)
        assert v.item() == pytest.approx(1.3583276555532593, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            L.relation_term([torch.randn(2, 2)], [torch.randn(2, 3)], W)


class TestCombined:
    def test_zero_weights(self):
        w = W.replace(eta=0.0, xi=0.0, tau_w=0.0)
        assert L.rskd_total_loss({"ce": 1.25, "response": 3.0, "feature": 1.0, "relation": 2.0}, w) == 1.25

    def test_zero_terms(self):
        assert L.rskd_total_loss({"ce": 0.7, "response": 0.0, "feature": 0.0, "relation": 0.0}, W) == 0.7

    def test_linear_combination(self):
        w = W.replace(eta=1.0, xi=1.0, tau_w=1.0)
        v = L.rskd_total_loss({"ce": 1.0, "response": 0.2, "feature": 0.4, "relation": 0.6}, w)
        assert v == pytest.approx(2.2)


class TestLossWeights:
    def test_defaults(self):
        assert (W.lambda_, W.alpha, W.beta, W.gamma, W.temperature) == (0.9, 200.0, 300.0, 0.9, 4.0)

    @pytest.mark.parametrize("field,value", [("alpha", -1.0), ("temperature", 0.0), ("k_channels", 0)])
    def test_invalid(self, field, value):
        with pytest.raises(ParameterError):
            W.replace(**{field: value})


# -- properties ---------------------------------------------------------------

logit_lists = st.lists(st.floats(-20, 20), min_size=2, max_size=8)


@settings(max_examples=60, deadline=None)
@given(logit_lists, st.floats(0.05, 50))
def test_soften_is_distribution(z, T):
    p = L.soften(t(z), T)
    assert abs(p.sum().item() - 1) <= 1e-6
    assert (p >= 0).all() and (p <= 1).all()


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000))
def test_kl_nonnegative_and_zero_iff_equal(c, seed):
    rng = np.random.default_rng(seed)
    p, q = rng.dirichlet(np.ones(c)), rng.dirichlet(np.ones(c))
    assert L.kl_divergence(t(p), t(q)).item() >= 0
    assert L.kl_divergence(t(p), t(p)).item() < 1e-12
    if np.abs(p - q).max() > 1e-3:
        assert L.kl_divergence(t(p), t(q)).item() > 0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 3), st.integers(0, 10_000))
def test_topk_deterministic_with_ties(c, k_frac, seed):
    rng = np.random.default_rng(seed)
    # integer-valued channels produce frequent exact ties
    f = t(rng.integers(0, 3, size=(c, 2, 2)).astype(float))
    k = max(1, min(c, k_frac * c // 3 or 1))
    first = L.df_topk_select(f, k).tolist()
    assert first == L.df_topk_select(f, k).tolist()
    assert first == oracles.topk_select(f.tolist(), k)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_distances_nonnegative(seed):
    g = torch.Generator().manual_seed(seed)
    f_t, f_s = torch.randn(2, 5, 3, 3, generator=g), torch.randn(2, 5, 3, 3, generator=g)
    assert L.at_distance(f_t, f_s).item() >= 0
    assert L.df_distance(f_t, f_s, 3).item() >= 0
    g_t, g_s = L.fsp_matrix(f_t, f_s), L.fsp_matrix(f_s, f_t)
    assert L.relation_term([g_t], [g_s], W).item() >= 0
