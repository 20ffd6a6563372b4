"""Flat token-stream transformer baseline and the Gaussian MLP ensemble."""

import math

import numpy as np
import pytest

from trajworld import baselines, encoding
from trajworld import tensor_core as tc
from trajworld.baselines import (MlpEnsembleConfig, TdmConfig, TdmPredictor,
                                 gaussian_nll, mlp_ensemble_predict,
                                 mlp_ensemble_train, mlp_ensemble_variance,
                                 pad_transitions, tdm_forward, tdm_init_params,
                                 tdm_loss)
from trajworld.tensor_core import Tensor

from conftest import grad_check_param, unit_stats

M_STATE, N_ACT = 2, 1
NUM_VARIATES = M_STATE + 1 + N_ACT


def small_tdm_cfg(**overrides):
    base = dict(num_blocks=1, num_heads=2, hidden=8, ffn_hidden=(16, 8),
                context=5, num_bins=5, max_variates=NUM_VARIATES)
    base.update(overrides)
    return TdmConfig(**base)


def random_tokens(rng, S, B):
    q = rng.dirichlet(np.ones(B), size=S)
    return q


class TestTdmForward:
    def test_output_shape_and_normalized(self, rng):
        cfg = small_tdm_cfg()
        params = tdm_init_params(cfg, rng)
        Q = random_tokens(rng, 3 * NUM_VARIATES, cfg.num_bins)
        P = tdm_forward(params, cfg, Q, M_STATE, NUM_VARIATES)
        assert P.shape == Q.shape
        assert np.allclose(P.data.sum(axis=-1), 1.0)
        assert np.all(P.data >= 0)

    def test_causal_over_flat_positions(self, rng):
        cfg = small_tdm_cfg()
        params = tdm_init_params(cfg, rng)
        S = 3 * NUM_VARIATES
        Q = random_tokens(rng, S, cfg.num_bins)
        base = tdm_forward(params, cfg, Q, M_STATE, NUM_VARIATES).data
        for pos in range(1, S, 3):
            Q2 = Q.copy()
            Q2[pos] = rng.dirichlet(np.ones(cfg.num_bins))
            out = tdm_forward(params, cfg, Q2, M_STATE, NUM_VARIATES).data
            assert np.array_equal(out[:pos], base[:pos])
            assert not np.allclose(out[pos:], base[pos:])

    def test_flat_length_bound(self, rng):
        cfg = small_tdm_cfg()
        params = tdm_init_params(cfg, rng)
        Q = random_tokens(rng, cfg.max_flat + 1, cfg.num_bins)
        with pytest.raises(ValueError):
            tdm_forward(params, cfg, Q, M_STATE, NUM_VARIATES)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TdmConfig(hidden=10, num_heads=4)


class TestTdmLoss:
    def test_action_and_first_row_targets_ignored(self, rng):
        cfg = small_tdm_cfg()
        S = 2 * NUM_VARIATES
        P = Tensor(random_tokens(rng, S, cfg.num_bins))
        tgt = random_tokens(rng, S, cfg.num_bins)
        base = tdm_loss(P, Tensor(tgt), M_STATE, NUM_VARIATES).item()
        # perturbing an action-column target of the second row is a no-op
        tgt2 = tgt.copy()
        tgt2[NUM_VARIATES + M_STATE + 1] = rng.dirichlet(np.ones(cfg.num_bins))
        assert tdm_loss(P, Tensor(tgt2), M_STATE,
                        NUM_VARIATES).item() == base
        # so is perturbing any first-row target
        tgt3 = tgt.copy()
        tgt3[1] = rng.dirichlet(np.ones(cfg.num_bins))
        assert tdm_loss(P, Tensor(tgt3), M_STATE,
                        NUM_VARIATES).item() == base
        # perturbing a second-row state target is not
        tgt4 = tgt.copy()
        tgt4[NUM_VARIATES] = rng.dirichlet(np.ones(cfg.num_bins))
        assert tdm_loss(P, Tensor(tgt4), M_STATE,
                        NUM_VARIATES).item() != base

    def test_uniform_prediction_analytic(self):
        cfg = small_tdm_cfg()
        T = 3
        S = T * NUM_VARIATES
        B = cfg.num_bins
        P = Tensor(np.full((S, B), 1.0 / B))
        tgt = np.zeros((S, B))
        tgt[:, 0] = 1.0
        loss = tdm_loss(P, Tensor(tgt), M_STATE, NUM_VARIATES).item()
        # (T-1) rows of m+1 scored scalars, each -ln(1/B + eps)
        expected = (T - 1) * (M_STATE + 1) * -math.log(1.0 / B + 1e-12)
        assert abs(loss - expected) < 1e-9

    def test_gradcheck(self, rng):
        cfg = small_tdm_cfg()
        params = tdm_init_params(cfg, rng)
        Q = random_tokens(rng, 2 * NUM_VARIATES, cfg.num_bins)
        tgt = np.zeros_like(Q)
        tgt[np.arange(Q.shape[0]), rng.integers(cfg.num_bins,
                                                size=Q.shape[0])] = 1.0

        for name in ("w_in", "w_out", "te", "b0.attn.wq", "b0.ffn.w2"):
            def loss_fn():
                P = tdm_forward(params, cfg, Q, M_STATE, NUM_VARIATES)
                return tdm_loss(P, Tensor(tgt), M_STATE, NUM_VARIATES)

            assert grad_check_param(loss_fn, params[name]) < 1e-3


class TestTdmPredictor:
    def test_forward_pass_count_is_m_plus_one(self, rng):
        cfg = small_tdm_cfg()
        params = tdm_init_params(cfg, rng)
        stats = unit_stats(NUM_VARIATES, num_bins=cfg.num_bins)
        pred = TdmPredictor(params, cfg, stats, M_STATE)
        window = rng.uniform(-0.9, 0.9, size=(3, NUM_VARIATES))
        s, r = pred.predict_next(window)
        assert pred.forward_passes == M_STATE + 1
        assert s.shape == (M_STATE,)
        pred.predict_next(window)
        assert pred.forward_passes == 2 * (M_STATE + 1)

    def test_single_state_dim_costs_two_passes(self, rng):
        cfg = small_tdm_cfg(max_variates=3)
        params = tdm_init_params(cfg, rng)
        stats = unit_stats(3, num_bins=cfg.num_bins)
        pred = TdmPredictor(params, cfg, stats, 1)
        pred.predict_next(rng.uniform(-0.9, 0.9, size=(2, 3)))
        assert pred.forward_passes == 2

    def test_outputs_within_bin_range(self, rng):
        cfg = small_tdm_cfg()
        params = tdm_init_params(cfg, rng)
        stats = unit_stats(NUM_VARIATES, num_bins=cfg.num_bins)
        pred = TdmPredictor(params, cfg, stats, M_STATE)
        s, r = pred.predict_next(rng.uniform(-0.9, 0.9, size=(4, NUM_VARIATES)))
        assert np.all(np.abs(s) <= 1.0) and abs(r) <= 1.0

    def test_window_truncated_to_context(self, rng):
        cfg = small_tdm_cfg(context=3)
        params = tdm_init_params(cfg, rng)
        stats = unit_stats(NUM_VARIATES, num_bins=cfg.num_bins)
        pred = TdmPredictor(params, cfg, stats, M_STATE)
        long_window = rng.uniform(-0.9, 0.9, size=(10, NUM_VARIATES))
        short = long_window[-2:]
        a = pred.predict_next(long_window)
        b = pred.predict_next(short)
        assert np.allclose(a[0], b[0]) and a[1] == pytest.approx(b[1])


def tiny_ens_cfg(**overrides):
    base = dict(hidden=(32, 32), ensemble_size=3, num_elites=2,
                state_pad=4, action_pad=2, train_steps=200, batch_size=32,
                seed=0)
    base.update(overrides)
    return MlpEnsembleConfig(**base)


def linear_system_data(rng, N=400, m=2, n=1):
    A = np.array([[0.9, 0.1], [-0.1, 0.8]])
    B = np.array([[0.2], [0.5]])
    s = rng.uniform(-1, 1, size=(N, m))
    a = rng.uniform(-1, 1, size=(N, n))
    s2 = s @ A.T + a @ B.T
    r = -np.linalg.norm(s, axis=1)
    return s, a, s2, r


class TestGaussianNll:
    def test_perfect_mean_unit_variance(self):
        D, N = 3, 5
        mean = Tensor(np.zeros((N, D)))
        logvar = Tensor(np.zeros((N, D)))
        nll = gaussian_nll(mean, logvar, np.zeros((N, D))).item()
        assert nll == pytest.approx(0.5 * D * math.log(2 * math.pi))

    def test_hand_value_with_error(self):
        # one sample, one dim: 0.5 * (ln 2pi + logvar + err^2 / var)
        nll = gaussian_nll(Tensor(np.array([[1.0]])),
                           Tensor(np.array([[math.log(4.0)]])),
                           np.array([[3.0]])).item()
        expected = 0.5 * (math.log(2 * math.pi) + math.log(4.0) + 4.0 / 4.0)
        assert nll == pytest.approx(expected)

    def test_gradcheck(self, rng):
        mean = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        logvar = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        target = rng.normal(size=(4, 3))
        assert grad_check_param(
            lambda: gaussian_nll(mean, logvar, target), mean) < 1e-6
        assert grad_check_param(
            lambda: gaussian_nll(mean, logvar, target), logvar) < 1e-6


class TestPadding:
    def test_layout(self):
        cfg = tiny_ens_cfg()
        X, Y = pad_transitions([[1.0, 2.0]], [[3.0]], [[4.0, 5.0]], [6.0],
                               cfg)
        assert np.allclose(X[0], [1, 2, 0, 0, 3, 0])
        assert np.allclose(Y[0], [4, 5, 0, 0, 6])

    def test_oversize_rejected(self):
        cfg = tiny_ens_cfg(state_pad=1)
        with pytest.raises(ValueError):
            pad_transitions([[1.0, 2.0]], [[0.0]], [[1.0, 2.0]], [0.0], cfg)


@pytest.fixture(scope="module")
def trained():
    rng = np.random.default_rng(0)
    s, a, s2, r = linear_system_data(rng)
    return mlp_ensemble_train(s, a, s2, r, tiny_ens_cfg()), (s, a, s2, r)


class TestEnsemble:
    def test_learns_linear_dynamics(self, trained):
        ens, (s, a, s2, r) = trained
        rng = np.random.default_rng(1)
        errs = []
        for i in range(20):
            pred_s, pred_r = mlp_ensemble_predict(ens, s[i], a[i], rng)
            errs.append(np.max(np.abs(pred_s - s2[i])))
        assert np.median(errs) < 0.1

    def test_elites_have_lowest_val_nll(self, trained):
        ens, _ = trained
        ranked = np.argsort(ens.val_nll, kind="stable")
        assert np.array_equal(ens.elites, ranked[:ens.cfg.num_elites])

    def test_variance_floor(self, trained):
        ens, (s, a, _, _) = trained
        var = mlp_ensemble_variance(ens, s[0], a[0])
        assert var.shape == (3, 5)
        assert np.all(var >= baselines.VARIANCE_FLOOR)

    def test_single_elite_prediction_deterministic(self):
        rng = np.random.default_rng(2)
        s, a, s2, r = linear_system_data(rng, N=50)
        cfg = tiny_ens_cfg(ensemble_size=2, num_elites=1, train_steps=20)
        ens = mlp_ensemble_train(s, a, s2, r, cfg)
        p1 = mlp_ensemble_predict(ens, s[0], a[0], np.random.default_rng(0))
        p2 = mlp_ensemble_predict(ens, s[0], a[0], np.random.default_rng(9))
        assert np.array_equal(p1[0], p2[0]) and p1[1] == p2[1]

    def test_elite_selection_frequencies(self, trained):
        ens, (s, a, _, _) = trained
        # count which elite produced each prediction by matching outputs
        rng = np.random.default_rng(3)
        outputs = {}
        for k in ens.elites:
            mean, _ = baselines._mlp_forward(
                ens.members[k], ens.cfg,
                pad_transitions(s[:1], a[:1], np.zeros((1, 2)), [0.0],
                                ens.cfg)[0])
            outputs[k] = float(mean.data[0, 0])
        draws = []
        for _ in range(2000):
            pred_s, _ = mlp_ensemble_predict(ens, s[0], a[0], rng)
            draws.append(min(outputs, key=lambda k:
                             abs(outputs[k] - pred_s[0])))
        for k in ens.elites:
            frac = draws.count(k) / len(draws)
            assert abs(frac - 1.0 / len(ens.elites)) < 0.05

    def test_sampling_adds_noise(self, trained):
        ens, (s, a, _, _) = trained
        rng = np.random.default_rng(4)
        det, _ = mlp_ensemble_predict(ens, s[0], a[0],
                                      np.random.default_rng(0))
        samples = [mlp_ensemble_predict(ens, s[0], a[0], rng,
                                        deterministic=False)[0]
                   for _ in range(5)]
        assert len({tuple(x) for x in samples}) > 1

    def test_train_determinism(self):
        rng = np.random.default_rng(5)
        s, a, s2, r = linear_system_data(rng, N=60)
        cfg = tiny_ens_cfg(train_steps=15)
        e1 = mlp_ensemble_train(s, a, s2, r, cfg)
        e2 = mlp_ensemble_train(s, a, s2, r, cfg)
        assert np.array_equal(e1.val_nll, e2.val_nll)
        for p1, p2 in zip(e1.members, e2.members):
            for k in p1:
                assert np.array_equal(p1[k].data, p2[k].data)

    def test_too_few_transitions(self):
        with pytest.raises(ValueError):
            mlp_ensemble_train([[0.0, 0.0]], [[0.0]], [[0.0, 0.0]], [0.0],
                               tiny_ens_cfg())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            MlpEnsembleConfig(ensemble_size=2, num_elites=3)
