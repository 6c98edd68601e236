"""Mirror-descent targets, matching losses, and temperature adaptation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffpolicy.diffusion import SamplerConfig, elbo, sample_action
from diffpolicy.pmd import (
    ClipConfig,
    PMDBatch,
    TemperatureState,
    elbo_ratio,
    fkl_loss,
    fkl_weights,
    pmd_exact,
    rkl_loss_batch,
    rkl_loss_elbo_ratio,
    rkl_loss_single_step,
    temperature_dual,
    tune_lambda,
)
from diffpolicy.schedule import linear_schedule

from test_diffusion import make_model
from helpers import grad_check, perturb_store, total_variation

STATE = np.zeros(1)


def make_batch(actions, q_values, lam=1.0, state=None):
    q = np.asarray(q_values, dtype=np.float64)
    return PMDBatch(
        state=STATE if state is None else state,
        actions=np.asarray(actions, dtype=np.int64),
        q_values=q,
        advantages=q - q.mean(),
        weights=fkl_weights(q, lam),
    )


# ---------------------------------------------------------------------------
# closed-form update
# ---------------------------------------------------------------------------


class TestPMDExact:
    def test_two_point_sigmoid_value(self):
        """pi_old uniform, advantages (1, 0), lam 1: new mass is sigmoid(1)."""
        out = pmd_exact(np.array([0.5, 0.5]), np.array([1.0, 0.0]), 1.0)
        sig = 1.0 / (1.0 + np.exp(-1.0))
        np.testing.assert_allclose(out, [sig, 1.0 - sig], atol=1e-12)
        assert out[0] == pytest.approx(0.7310585786300049)

    def test_low_temperature_approaches_argmax(self):
        out = pmd_exact(np.array([0.25, 0.75]), np.array([1.0, 0.0]), 1e-6)
        assert out[0] >= 1.0 - 1e-6

    def test_high_temperature_keeps_old_policy(self):
        pi_old = np.array([0.1, 0.6, 0.3])
        out = pmd_exact(pi_old, np.array([3.0, -1.0, 0.5]), 1e9)
        np.testing.assert_allclose(out, pi_old, atol=1e-8)

    def test_support_preservation(self):
        out = pmd_exact(np.array([0.0, 0.4, 0.6]), np.array([100.0, 0.0, 0.0]), 0.5)
        assert out[0] == 0.0
        assert out.sum() == pytest.approx(1.0)

    @given(
        seed=st.integers(min_value=0, max_value=2**31),
        shift=st.floats(min_value=-50.0, max_value=50.0),
        lam=st.floats(min_value=0.01, max_value=100.0),
    )
    @settings(max_examples=60, deadline=None)
    def test_shift_invariance(self, seed, shift, lam):
        rng = np.random.default_rng(seed)
        pi_old = rng.dirichlet(np.ones(5))
        adv = rng.normal(size=5)
        a = pmd_exact(pi_old, adv, lam)
        b = pmd_exact(pi_old, adv + shift, lam)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            pmd_exact(np.array([0.5, 0.5]), np.array([1.0, 0.0]), 0.0)
        with pytest.raises(ValueError):
            pmd_exact(np.array([0.5, 0.5]), np.array([1.0]), 1.0)

    def test_matches_unnormalized_definition(self):
        rng = np.random.default_rng(77)
        pi_old = rng.dirichlet(np.ones(6))
        adv = rng.normal(size=6)
        lam = 0.7
        raw = pi_old * np.exp(adv / lam)
        np.testing.assert_allclose(pmd_exact(pi_old, adv, lam), raw / raw.sum(), atol=1e-12)


class TestFKLWeights:
    def test_softmax_of_scaled_scores(self):
        w = fkl_weights(np.array([1.0, 0.0]), 1.0)
        assert w.sum() == pytest.approx(1.0)
        assert w[0] == pytest.approx(1.0 / (1.0 + np.exp(-1.0)))

    def test_shift_invariant_and_temperature_sharpens(self):
        q = np.array([2.0, 1.0, 0.0])
        np.testing.assert_allclose(fkl_weights(q, 0.5), fkl_weights(q + 10.0, 0.5), atol=1e-12)
        sharp = fkl_weights(q, 0.1)
        flat = fkl_weights(q, 10.0)
        assert sharp[0] > flat[0]
        assert sharp.argmax() == 0


class TestPMDBatch:
    def test_validates_sizes_and_sums(self):
        with pytest.raises(ValueError, match="at least 2"):
            make_batch(np.array([[0, 1]]), [1.0])
        q = np.array([1.0, 0.0])
        with pytest.raises(ValueError, match="sum to zero"):
            PMDBatch(
                state=STATE,
                actions=np.array([[0, 1], [1, 0]]),
                q_values=q,
                advantages=q,  # not centered
                weights=fkl_weights(q, 1.0),
            )
        with pytest.raises(ValueError, match="sum to one"):
            PMDBatch(
                state=STATE,
                actions=np.array([[0, 1], [1, 0]]),
                q_values=q,
                advantages=q - q.mean(),
                weights=np.array([0.9, 0.2]),
            )


# ---------------------------------------------------------------------------
# forward-matching loss
# ---------------------------------------------------------------------------


class TestFKLLoss:
    def test_value_is_weighted_negative_bound(self):
        store, cfg = make_model(seq_len=2, n_actions=3, seed=1)
        sched = linear_schedule(2)
        batch = make_batch(np.array([[0, 1], [2, 2], [1, 0]]), [1.0, 0.5, -0.2], lam=0.5)
        loss, n_terms = fkl_loss(store, cfg, [batch], sched, elbo_mode="exact_n")
        assert n_terms == 3
        manual = -sum(
            w * elbo(store, cfg, a, STATE, sched)
            for w, a in zip(batch.weights, batch.actions)
        )
        assert loss == pytest.approx(manual, abs=1e-10)
        assert loss > 0.0  # bound is nonpositive, weights positive

    def test_averages_over_states_and_accumulates_grads(self):
        store, cfg = make_model(seq_len=2, n_actions=3, seed=2)
        sched = linear_schedule(2)
        b1 = make_batch(np.array([[0, 1], [1, 1]]), [1.0, 0.0])
        b2 = make_batch(np.array([[2, 0], [0, 0]]), [0.3, -0.3])
        l1, _ = fkl_loss(store, cfg, [b1], sched, elbo_mode="exact_n")
        g1 = store.grad("mlp.w2").copy()
        store.zero_grads()
        l2, _ = fkl_loss(store, cfg, [b2], sched, elbo_mode="exact_n")
        g2 = store.grad("mlp.w2").copy()
        store.zero_grads()
        both, _ = fkl_loss(store, cfg, [b1, b2], sched, elbo_mode="exact_n")
        gboth = store.grad("mlp.w2").copy()
        assert both == pytest.approx(0.5 * (l1 + l2), abs=1e-10)
        np.testing.assert_allclose(gboth, 0.5 * (g1 + g2), atol=1e-10)

    def test_gradient_matches_finite_differences(self):
        store, cfg = make_model(seq_len=2, n_actions=3, seed=3)
        sched = linear_schedule(2)
        batch = make_batch(np.array([[0, 1], [2, 0]]), [0.4, -0.4], lam=0.7)

        def fn(s):
            loss, _ = fkl_loss(s, cfg, [batch], sched, elbo_mode="exact_n")
            return loss

        worst = grad_check(fn, store, np.random.default_rng(0), n_coords=3)
        assert worst < 1e-4

    def test_descending_the_loss_tilts_toward_high_advantage_actions(self):
        """A few gradient steps raise the bound of the preferred action."""
        from diffpolicy.optim import AdamState, adam_step

        store, cfg = make_model(seq_len=2, n_actions=2, seed=4)
        sched = linear_schedule(2)
        good = np.array([1, 0], dtype=np.int64)
        bad = np.array([0, 1], dtype=np.int64)
        batch = make_batch(np.stack([good, bad]), [1.0, -1.0], lam=0.5)
        before = elbo(store, cfg, good, STATE, sched)
        opt = AdamState.for_store(store)
        for _ in range(50):
            fkl_loss(store, cfg, [batch], sched, elbo_mode="exact_n")
            adam_step(store, opt, lr=0.02)
        after = elbo(store, cfg, good, STATE, sched)
        assert after > before + 0.1

    def test_bound_gap_inequality(self):
        """Weighted negative bound dominates the weighted negative likelihood."""
        from diffpolicy.diffusion import exact_log_likelihood

        store, cfg = make_model(seq_len=2, n_actions=3, seed=5)
        sched = linear_schedule(3)
        batch = make_batch(np.array([[0, 1], [2, 2]]), [0.8, -0.8])
        loss, _ = fkl_loss(store, cfg, [batch], sched, elbo_mode="exact_n")
        ces = -sum(
            w * exact_log_likelihood(store, cfg, a, STATE, sched)
            for w, a in zip(batch.weights, batch.actions)
        )
        assert loss >= ces - 1e-10


# ---------------------------------------------------------------------------
# ratio losses
# ---------------------------------------------------------------------------


class TestRatioLosses:
    def test_fresh_trajectory_has_unit_ratio_loss(self):
        """Scoring a chain under its own generator gives ratio exactly 1."""
        store, cfg = make_model(seq_len=2, n_actions=3, seed=6)
        sched = linear_schedule(3)
        rng = np.random.default_rng(5)
        _, traj = sample_action(store, cfg, STATE, sched, SamplerConfig(), rng)
        adv = 0.7
        loss = rkl_loss_single_step(
            store, store, cfg, traj, adv, STATE, sched, ClipConfig()
        )
        assert loss == pytest.approx(-adv, abs=1e-10)
        store.zero_grads()

    def test_batch_matches_mean_of_singles(self):
        store, cfg = make_model(seq_len=2, n_actions=3, seed=7)
        old = store.copy()
        perturb_store(store, 0.05, np.random.default_rng(9))
        sched = linear_schedule(2)
        rng = np.random.default_rng(11)
        from diffpolicy.diffusion import sample_actions_batch

        feats = np.zeros((3, 1))
        _, trajs = sample_actions_batch(old, cfg, feats, sched, rng, record=True)
        advs = np.array([0.5, -0.2, 1.0])
        clip = ClipConfig(ratio_clip=0.2, kl_coeff=0.3)
        batch_loss = rkl_loss_batch(store, old, cfg, trajs, advs, feats, sched, clip)
        gbatch = store.grad("mlp.w2").copy()
        store.zero_grads()
        singles = []
        for i in range(3):
            singles.append(
                rkl_loss_single_step(
                    store, old, cfg, trajs.single(i), advs[i], feats[i], sched, clip
                )
            )
        gsingles = store.grad("mlp.w2").copy() / 3.0
        store.zero_grads()
        assert batch_loss == pytest.approx(np.mean(singles), abs=1e-10)
        np.testing.assert_allclose(gbatch, gsingles, atol=1e-10)

    def test_clip_freezes_gradient_outside_trust_region(self):
        """Once the ratio leaves the clip window (for positive advantage, above
        1 + c), the surrogate takes the clipped branch and the gradient dies."""
        store, cfg = make_model(seq_len=1, n_actions=2, seed=8)
        old = store.copy()
        # push the new policy far from the generator
        perturb_store(store, 3.0, np.random.default_rng(13))
        sched = linear_schedule(1)
        rng = np.random.default_rng(15)
        clip = ClipConfig(ratio_clip=0.1)
        saw_frozen = False
        for _ in range(40):
            _, traj = sample_action(old, cfg, STATE, sched, SamplerConfig(), rng)
            logp_new_minus_old = None
            loss = rkl_loss_single_step(store, old, cfg, traj, 1.0, STATE, sched, clip)
            if loss == pytest.approx(-1.1, abs=1e-9):  # clipped branch active
                assert store.grad_norm() == pytest.approx(0.0, abs=1e-12)
                saw_frozen = True
            store.zero_grads()
        assert saw_frozen

    def test_single_step_gradient_matches_finite_differences(self):
        store, cfg = make_model(seq_len=2, n_actions=3, seed=9)
        old = store.copy()
        perturb_store(store, 0.02, np.random.default_rng(17))
        sched = linear_schedule(2)
        rng = np.random.default_rng(19)
        _, traj = sample_action(old, cfg, STATE, sched, SamplerConfig(), rng)

        def fn(s):
            return rkl_loss_single_step(
                s, old, cfg, traj, 0.4, STATE, sched, ClipConfig(kl_coeff=0.5)
            )

        worst = grad_check(fn, store, np.random.default_rng(1), n_coords=3)
        assert worst < 1e-4

    def test_elbo_ratio_is_exact_for_single_step(self):
        """N = 1 closes the bound gap, so the estimator equals the true ratio."""
        from diffpolicy.diffusion import exact_log_likelihood

        store, cfg = make_model(seq_len=2, n_actions=3, seed=10)
        old = store.copy()
        perturb_store(old, 0.3, np.random.default_rng(21))
        sched = linear_schedule(1)
        action = np.array([1, 2], dtype=np.int64)
        est = elbo_ratio(store, old, cfg, action, STATE, sched)
        truth = np.exp(
            exact_log_likelihood(store, cfg, action, STATE, sched)
            - exact_log_likelihood(old, cfg, action, STATE, sched)
        )
        assert est == pytest.approx(truth, abs=1e-12)

    def test_elbo_ratio_loss_runs_and_matches_manual_value(self):
        store, cfg = make_model(seq_len=2, n_actions=3, seed=11)
        old = store.copy()
        perturb_store(old, 0.1, np.random.default_rng(23))
        sched = linear_schedule(2)
        batch = make_batch(np.array([[0, 1], [2, 0]]), [0.6, -0.6])
        clip = ClipConfig(ratio_clip=0.2)
        loss = rkl_loss_elbo_ratio(store, old, cfg, batch, sched, clip)
        store.zero_grads()
        vals = []
        for a, adv in zip(batch.actions, batch.advantages):
            r = np.exp(
                elbo(store, cfg, a, STATE, sched) - elbo(old, cfg, a, STATE, sched)
            )
            vals.append(min(r * adv, np.clip(r, 0.8, 1.2) * adv))
        assert loss == pytest.approx(-np.mean(vals), abs=1e-10)


# ---------------------------------------------------------------------------
# temperature
# ---------------------------------------------------------------------------


class TestTemperature:
    def test_state_validation(self):
        with pytest.raises(ValueError):
            TemperatureState(lam=0.0)
        with pytest.raises(ValueError):
            TemperatureState(epsilon=-1.0)
        with pytest.raises(ValueError):
            TemperatureState(lam=1e5)

    def test_dual_value_reference(self):
        # g(lam) = lam*eps + lam*(logsumexp(A/lam) - log M)
        a = np.array([1.0, -1.0])
        lam, eps = 2.0, 0.1
        lse = np.log(np.exp(0.5) + np.exp(-0.5))
        expected = lam * eps + lam * lse - lam * np.log(2)
        assert temperature_dual(a, lam, eps) == pytest.approx(expected, abs=1e-12)

    def test_dual_homogeneity(self):
        """Doubling advantages and temperature doubles the dual value."""
        rng = np.random.default_rng(3)
        a = rng.normal(size=8)
        for lam in (0.3, 1.0, 4.0):
            g1 = temperature_dual(a, lam, 0.2)
            g2 = temperature_dual(2.0 * a, 2.0 * lam, 0.2)
            assert g2 == pytest.approx(2.0 * g1, abs=1e-10)

    def test_update_descends_the_dual(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=16) * 2.0
        ts = TemperatureState(lam=1.0, epsilon=0.05, lr=1e-2)
        g0 = temperature_dual(a, ts.lam, ts.epsilon)
        ts1 = tune_lambda(a, ts)
        g1 = temperature_dual(a, ts1.lam, ts1.epsilon)
        assert ts1.lam != ts.lam
        assert g1 <= g0 + 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=10)
        eps, lam, h = 0.3, 0.8, 1e-6
        fd = (temperature_dual(a, lam + h, eps) - temperature_dual(a, lam - h, eps)) / (
            2 * h
        )
        ts = TemperatureState(lam=lam, epsilon=eps, lr=1e-3)
        ts1 = tune_lambda(a, ts)
        implied = (np.log(lam) - np.log(ts1.lam)) / (ts.lr * lam)  # recovered dg/dlam
        assert implied == pytest.approx(fd, rel=1e-6)

    def test_equal_advantages_drive_lambda_down(self):
        """Flat advantages make tightening free: lam decays monotonically.

        The log-space step shrinks proportionally to lam itself, so the decay
        is ~1/t rather than a fast collapse; assert the direction and scale.
        """
        a = np.zeros(4)
        ts = TemperatureState(lam=1.0, epsilon=0.5, lr=0.5)
        history = [ts.lam]
        for _ in range(200):
            ts = tune_lambda(a, ts)
            history.append(ts.lam)
        assert all(b < a for a, b in zip(history, history[1:]))
        assert ts.lam < 0.05  # ~ 4/t after 200 steps

    def test_extreme_spread_drives_lambda_up(self):
        a = np.array([1000.0, -1000.0])
        ts = TemperatureState(lam=1.0, epsilon=1e-3, lr=0.5)
        for _ in range(300):
            ts = tune_lambda(a, ts)
        assert ts.lam > 100.0

    def test_fixed_point_matches_constraint(self):
        """At the dual optimum the induced update has divergence close to eps.

        Uniform old policy over the sampled set makes the expected divergence
        computable in closed form from the softmax weights.
        """
        rng = np.random.default_rng(11)
        a = rng.normal(size=64)
        a -= a.mean()
        eps = 0.1
        ts = TemperatureState(lam=1.0, epsilon=eps, lr=0.05)
        for _ in range(2000):
            ts = tune_lambda(a, ts)
        w = fkl_weights(a, ts.lam)
        kl = float(np.sum(w * np.log(np.maximum(w, 1e-300) * a.size)))
        assert kl == pytest.approx(eps, rel=0.05)

    def test_rejects_single_advantage(self):
        with pytest.raises(ValueError):
            tune_lambda(np.array([1.0]), TemperatureState())
