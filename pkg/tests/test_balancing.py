import math

import numpy as np
import pytest

from cftraj.balancing import (
    KernelConfig, SmmdConfig, bce_logits, cdc_loss, grl_losses,
    group_indices, median_bandwidth, mmd2_u, mmd2_u_with_grad, rbf_kernel,
    smmd_loss,
)
from cftraj.numkit import RngStream, finite_diff_check
from cftraj.seqmodel import Discriminator

GRAD_TOL = 1e-4


class TestRbfKernel:
    def test_self_similarity_one(self):
        x = np.array([1.0, -2.0, 3.0])
        assert rbf_kernel(x, x, sigma=0.7) == 1.0

    def test_distance_sqrt2_sigma_one(self):
        # ||x - y||^2 = 2 sigma^2  ->  k = e^{-1}
        assert rbf_kernel(np.array([0.0]), np.array([math.sqrt(2.0)]), 1.0) \
            == pytest.approx(math.exp(-1.0), abs=1e-15)

    def test_symmetry(self):
        x = np.array([0.3, 1.1])
        y = np.array([-0.5, 2.0])
        assert rbf_kernel(x, y, 1.3) == rbf_kernel(y, x, 1.3)

    def test_nonpositive_sigma_rejected(self):
        with pytest.raises(ValueError):
            rbf_kernel(np.zeros(2), np.ones(2), 0.0)


class TestMedianBandwidth:
    def test_two_points_distance_two(self):
        # median unsquared distance 2 -> sigma = sqrt(2)
        sigma = median_bandwidth(np.array([[0.0], [2.0]]))
        assert sigma == pytest.approx(math.sqrt(2.0), abs=1e-12)

    def test_three_points_median_distance(self):
        # pairwise distances {1, 2, 3}, median 2 -> sigma = sqrt(2)
        sigma = median_bandwidth(np.array([[0.0], [1.0], [3.0]]))
        assert sigma == pytest.approx(math.sqrt(2.0), abs=1e-12)

    def test_squared_variant(self):
        # squared distances {1, 4, 9}, median 4 -> sigma = sqrt(4/2)
        sigma = median_bandwidth(np.array([[0.0], [1.0], [3.0]]), squared=True)
        assert sigma == pytest.approx(math.sqrt(2.0), abs=1e-12)

    def test_identical_points_floored(self):
        assert median_bandwidth(np.zeros((5, 2))) == 1e-6

    def test_fewer_than_two_points_rejected(self):
        with pytest.raises(ValueError):
            median_bandwidth(np.zeros((1, 3)))


class TestMmd2U:
    def test_identical_constant_sets_zero_exactly(self):
        S = np.zeros((4, 2)) + 1.7
        assert mmd2_u(S, S.copy(), sigma=1.0) == 0.0

    def test_closed_form_two_point_case(self):
        # each set holds one point twice, cross distance^2 = 2 sigma^2:
        # within terms contribute 1 + 1, cross 2 e^{-1}
        S_i = np.array([[0.0], [0.0]])
        S_j = np.array([[math.sqrt(2.0)], [math.sqrt(2.0)]])
        val = mmd2_u(S_i, S_j, sigma=1.0)
        assert val == pytest.approx(2.0 - 2.0 * math.exp(-1.0), abs=1e-12)

    def test_symmetry_in_arguments(self):
        rng = np.random.default_rng(0)
        S_i = rng.normal(size=(6, 3))
        S_j = rng.normal(size=(6, 3)) + 0.5
        assert mmd2_u(S_i, S_j, 1.2) == pytest.approx(mmd2_u(S_j, S_i, 1.2), abs=1e-15)

    def test_size_mismatch_rejected(self):
        with pytest.raises(ValueError, match="differ"):
            mmd2_u(np.zeros((3, 2)), np.zeros((4, 2)), 1.0)

    def test_monte_carlo_unbiasedness_under_null(self):
        # both subsets drawn from the same pool: E[MMD^2_u] = 0, so the
        # resampled mean must sit within 3 standard errors of zero
        rng = np.random.default_rng(7)
        pool = rng.normal(size=(200, 2))
        vals = np.empty(10_000)
        for r in range(vals.size):
            idx = rng.permutation(200)
            vals[r] = mmd2_u(pool[idx[:10]], pool[idx[10:20]], sigma=1.0)
        se = vals.std(ddof=1) / math.sqrt(vals.size)
        assert abs(vals.mean()) < 3.0 * se

    def test_gradient_certified(self):
        rng = np.random.default_rng(1)
        S_i0 = rng.normal(size=(5, 3))
        S_j0 = rng.normal(size=(5, 3)) + 1.0

        def lag(p):
            val, dSi, dSj = mmd2_u_with_grad(p["si"], p["sj"], sigma=1.1)
            return val, {"si": dSi, "sj": dSj}

        assert finite_diff_check(lag, {"si": S_i0, "sj": S_j0}) < GRAD_TOL


class TestGroupIndices:
    def test_joint_tuples(self):
        A = np.array([[0, 0], [1, 0], [0, 0], [1, 1]])
        groups = group_indices(A, "joint")
        assert set(groups) == {(0, 0), (1, 0), (1, 1)}
        np.testing.assert_array_equal(groups[(0, 0)], [0, 2])

    def test_channel_groups(self):
        A = np.array([[0, 1], [1, 1], [0, 0]])
        groups = group_indices(A, "channel")
        np.testing.assert_array_equal(groups[(0, 0)], [0, 2])
        np.testing.assert_array_equal(groups[(1, 1)], [0, 1])


class TestSmmdLoss:
    CFG = SmmdConfig(n_subset=4)
    KER = KernelConfig()

    def test_single_group_returns_zero(self):
        B = np.random.default_rng(0).normal(size=(10, 3))
        A = np.ones((10, 2))
        loss, dB = smmd_loss(B, A, self.CFG, self.KER, RngStream(0, 0))
        assert loss == 0.0
        np.testing.assert_array_equal(dB, np.zeros_like(B))

    def test_insufficient_members_skipped(self):
        # one group has n_subset - 1 members: the pair contributes nothing
        B = np.random.default_rng(1).normal(size=(7, 3))
        A = np.vstack([np.zeros((4, 1)), np.ones((3, 1))])
        loss, dB = smmd_loss(B, A, self.CFG, self.KER, RngStream(0, 0))
        assert loss == 0.0
        np.testing.assert_array_equal(dB, np.zeros_like(B))

    def test_large_shift_detected(self):
        rng = np.random.default_rng(2)
        cfg = SmmdConfig(n_subset=50)
        B = np.vstack([rng.normal(size=(50, 3)),
                       rng.normal(size=(50, 3)) + 5.0])
        A = np.vstack([np.zeros((50, 1)), np.ones((50, 1))])
        loss, _ = smmd_loss(B, A, cfg, self.KER, RngStream(0, 0))
        assert loss > 0.5

    def test_monotone_in_group_separation(self):
        rng = np.random.default_rng(3)
        cfg = SmmdConfig(n_subset=40)
        base = rng.normal(size=(40, 2))
        other = rng.normal(size=(40, 2))
        A = np.vstack([np.zeros((40, 1)), np.ones((40, 1))])
        kernel = KernelConfig(mode="fixed", sigma=2.0)
        losses = []
        for shift in (0.0, 1.0, 2.0, 4.0, 8.0):
            B = np.vstack([base, other + shift])
            loss, _ = smmd_loss(B, A, cfg, kernel, RngStream(0, 0))
            losses.append(loss)
        assert all(b >= a - 1e-12 for a, b in zip(losses, losses[1:]))

    def test_joint_grouping_normalizer(self):
        # two equal point masses in each of two joint groups at the
        # closed-form distance: pair value 2 - 2/e, one pair out of
        # C(2,2... the occupied-group count) -> normalizer 1
        B = np.array([[0.0], [0.0], [math.sqrt(2.0)], [math.sqrt(2.0)]])
        A = np.array([[0, 0], [0, 0], [1, 1], [1, 1]])
        cfg = SmmdConfig(n_subset=2)
        kernel = KernelConfig(mode="fixed", sigma=1.0)
        loss, _ = smmd_loss(B, A, cfg, kernel, RngStream(0, 0))
        assert loss == pytest.approx(2.0 - 2.0 * math.exp(-1.0), abs=1e-12)

    def test_gradient_certified(self):
        # group sizes equal the subset size, so sampling always selects
        # every member and the loss is a deterministic function of B
        rng = np.random.default_rng(4)
        cfg = SmmdConfig(n_subset=5)
        kernel = KernelConfig(mode="fixed", sigma=1.5)
        B0 = np.vstack([rng.normal(size=(5, 3)), rng.normal(size=(5, 3)) + 0.8])
        A = np.vstack([np.zeros((5, 1)), np.ones((5, 1))])

        def lag(p):
            loss, dB = smmd_loss(p["B"], A, cfg, kernel, RngStream(0, 0))
            return loss, {"B": dB}

        assert finite_diff_check(lag, {"B": B0}) < GRAD_TOL


class TestBceLogits:
    def test_zero_logits_give_channelwise_ln2(self):
        logits = np.zeros((6, 2))
        labels = (np.random.default_rng(0).uniform(size=(6, 2)) > 0.5).astype(float)
        loss, dlogits = bce_logits(logits, labels)
        assert loss == pytest.approx(2.0 * math.log(2.0), abs=1e-12)
        np.testing.assert_allclose(dlogits, (0.5 - labels) / 6.0, atol=1e-15)

    def test_confident_correct_logits_near_zero_loss(self):
        labels = np.array([[1.0, 0.0], [0.0, 1.0]])
        logits = 20.0 * (2.0 * labels - 1.0)
        loss, _ = bce_logits(logits, labels)
        assert loss < 1e-8


class TestGrl:
    def _setup(self, n=8, d=3, d_a=2, seed=0):
        rng = np.random.default_rng(seed)
        disc = Discriminator(d, d_a)
        params = disc.init_params(RngStream(seed, 0))
        B = rng.normal(size=(n, d))
        A = (rng.uniform(size=(n, d_a)) > 0.5).astype(float)
        return disc, params, B, A

    def test_zero_discriminator_chance_level_loss(self):
        disc, _, B, A = self._setup()
        params = {"disc.W": np.zeros((3, 2)), "disc.b": np.zeros(2)}
        loss, _, dB = grl_losses(B, A, disc, params)
        assert loss == pytest.approx(2.0 * math.log(2.0), abs=1e-12)

    def test_encoder_gradient_is_negated(self):
        disc, params, B, A = self._setup(seed=1)
        _, _, dB_rev = grl_losses(B, A, disc, params)

        logits, cache = disc.forward(params, B)
        _, dlogits = bce_logits(logits, A)
        _, dB_plain = disc.backward(params, cache, dlogits)
        np.testing.assert_array_equal(dB_rev, -dB_plain)

    def test_separable_labels_below_chance_loss(self):
        # labels determined by the sign of the first coordinate: a matched
        # discriminator drives BCE well under the chance level d_a * ln 2
        rng = np.random.default_rng(2)
        B = rng.normal(size=(50, 3))
        A = (B[:, :1] > 0).astype(float) @ np.ones((1, 2))
        disc = Discriminator(3, 2)
        params = {"disc.W": np.zeros((3, 2)), "disc.b": np.zeros(2)}
        params["disc.W"][0, :] = 10.0
        loss, _, _ = grl_losses(B, A, disc, params)
        assert loss < 2.0 * math.log(2.0) * 0.25

    def test_discriminator_gradient_certified(self):
        disc, params, B, A = self._setup(seed=3)

        def lag(p):
            loss, grads, _ = grl_losses(B, A, disc, p)
            return loss, grads

        assert finite_diff_check(lag, params) < GRAD_TOL

    def test_representation_gradient_certified(self):
        disc, params, B0, A = self._setup(seed=4)

        def lag(p):
            logits, cache = disc.forward(params, p["B"])
            loss, dlogits = bce_logits(logits, A)
            _, dB = disc.backward(params, cache, dlogits)
            return loss, {"B": dB}

        assert finite_diff_check(lag, {"B": B0}) < GRAD_TOL


class TestCdc:
    def test_uniform_logits_attain_minimum(self):
        disc = Discriminator(3, 2)
        params = {"disc.W": np.zeros((3, 2)), "disc.b": np.zeros(2)}
        B = np.random.default_rng(0).normal(size=(5, 3))
        loss, dB = cdc_loss(B, disc, params)
        assert loss == pytest.approx(math.log(2.0), abs=1e-12)
        np.testing.assert_allclose(dB, np.zeros_like(B), atol=1e-15)

    def test_monotone_in_logit_confidence(self):
        disc = Discriminator(3, 2)
        base = disc.init_params(RngStream(0, 0))
        B = np.random.default_rng(1).normal(size=(10, 3))
        losses = []
        for scale in (0.0, 0.5, 1.0, 2.0, 4.0):
            params = {k: scale * v for k, v in base.items()}
            loss, _ = cdc_loss(B, disc, params)
            losses.append(loss)
        assert all(b >= a - 1e-12 for a, b in zip(losses, losses[1:]))
        assert losses[0] == pytest.approx(math.log(2.0), abs=1e-12)

    def test_representation_gradient_certified(self):
        disc = Discriminator(3, 2)
        params = disc.init_params(RngStream(1, 0))
        B0 = np.random.default_rng(2).normal(size=(6, 3))

        def lag(p):
            loss, dB = cdc_loss(p["B"], disc, params)
            return loss, {"B": dB}

        assert finite_diff_check(lag, {"B": B0}) < GRAD_TOL
