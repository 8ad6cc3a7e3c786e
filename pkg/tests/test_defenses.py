"""Trainers: equivalences, fixed points, robustness gaps, early stopping."""
import math

import numpy as np
import pytest

from atent.attacks import AttackConfig, robust_accuracy
from atent.data import synth_two_gaussians
from atent.defenses import (
    ATENT_L2,
    ATENT_LINF,
    DivergenceError,
    EarlyStopConfig,
    EpochRecord,
    TrainerConfig,
    TrainerState,
    atent_outer_gradient,
    early_stop_update,
    train,
    train_atent,
    train_entropy_sgd,
    train_pgd_at,
    train_sgd,
    weight_langevin_chain,
)
from atent.models import Batch, ModelParams, accuracy, build_mlp, loss_and_grads
from atent.oracle import finite_difference_grad, relative_error
from atent.sampler import GibbsSamplerConfig, init_perturbation, run_chain
from atent.seeding import derive_rng


def _blobs(seed=0, n=200, sep=5.0):
    ds = synth_two_gaussians(n, sep, seed=seed)
    return ds, ds.take(np.arange(0))


def _params_equal(a: ModelParams, b: ModelParams) -> bool:
    return all(np.array_equal(a.weights[n].data, b.weights[n].data) for n in a.names)


class TestConfigValidation:
    def test_sampler_presence_rules(self):
        with pytest.raises(ValueError):
            TrainerConfig(defense="atent_l2", lr=0.1, epochs=1, batch_size=8)
        with pytest.raises(ValueError):
            TrainerConfig(defense="sgd", lr=0.1, epochs=1, batch_size=8,
                          sampler=GibbsSamplerConfig(gamma=1, step=0.1, steps=1))
        with pytest.raises(ValueError):
            TrainerConfig(defense="pgd_at", lr=0.1, epochs=1, batch_size=8)

    def test_norm_must_match_defense(self):
        with pytest.raises(ValueError):
            TrainerConfig(defense="atent_linf", lr=0.1, epochs=1, batch_size=8,
                          sampler=GibbsSamplerConfig(gamma=1, step=0.1, steps=1, norm="l2"))

    def test_default_schedule_decays_at_three_quarters(self):
        cfg = TrainerConfig(defense="sgd", lr=0.1, epochs=40, batch_size=8)
        assert cfg.schedule() == [(30, 0.1)]
        cfg = TrainerConfig(defense="sgd", lr=0.1, epochs=40, batch_size=8, lr_schedule=[])
        assert cfg.schedule() == []

    def test_robust_early_stop_derives_training_radius(self):
        cfg = TrainerConfig(
            defense="pgd_at", lr=0.1, epochs=1, batch_size=8,
            pgd=AttackConfig(kind="pgd", norm="linf", radius=0.2, steps=3, step_size=0.1),
            early_stop=EarlyStopConfig(metric="robust"),
        )
        assert cfg.early_stop.eval_attack.radius == 0.2
        with pytest.raises(ValueError):
            TrainerConfig(defense="sgd", lr=0.1, epochs=1, batch_size=8,
                          early_stop=EarlyStopConfig(metric="robust"))


class TestTrainSgd:
    def test_zero_lr_leaves_params_unchanged(self):
        ds, val = _blobs()
        p0 = build_mlp([2, 8, 2], seed=0)
        state = train_sgd(p0, TrainerConfig(defense="sgd", lr=0.0, epochs=3,
                                            batch_size=32, seed=0), ds, val)
        assert _params_equal(state.params, p0)

    def test_same_seed_identical_params(self):
        ds, val = _blobs(seed=1)
        p0 = build_mlp([2, 8, 2], seed=1)
        cfg = TrainerConfig(defense="sgd", lr=0.3, epochs=5, batch_size=32, seed=4)
        a = train_sgd(p0, cfg, ds, val)
        b = train_sgd(p0, cfg, ds, val)
        assert _params_equal(a.params, b.params)

    def test_separable_blobs_reach_high_accuracy(self):
        # Monte Carlo over 5 seeds, <= 50 epochs
        for seed in range(5):
            ds, val = _blobs(seed=seed, n=200, sep=6.0)
            p0 = build_mlp([2, 16, 2], seed=seed)
            cfg = TrainerConfig(defense="sgd", lr=0.5, epochs=40, batch_size=32,
                                seed=seed, lr_schedule=[])
            state = train_sgd(p0, cfg, ds, val)
            assert accuracy(state.params, ds.inputs, ds.labels) >= 0.99

    def test_divergence_aborts(self):
        ds, val = _blobs()
        p0 = build_mlp([2, 8, 2], seed=0)
        for t in p0.weights.values():
            t.data = np.full_like(t.data, 1e200)  # forward pass overflows
        cfg = TrainerConfig(defense="sgd", lr=0.1, epochs=2, batch_size=32, seed=0,
                            lr_schedule=[])
        with np.errstate(over="ignore", invalid="ignore"), pytest.raises(DivergenceError):
            train_sgd(p0, cfg, ds, val)


class TestTrainPgdAt:
    def test_zero_radius_bitwise_equals_sgd(self):
        ds, val = _blobs(seed=2)
        p0 = build_mlp([2, 8, 2], seed=2)
        sgd = train_sgd(p0, TrainerConfig(defense="sgd", lr=0.3, epochs=4,
                                          batch_size=32, seed=7), ds, val)
        pgd = train_pgd_at(p0, TrainerConfig(
            defense="pgd_at", lr=0.3, epochs=4, batch_size=32, seed=7,
            pgd=AttackConfig(kind="pgd", norm="linf", radius=0.0, steps=3,
                             step_size=0.1, random_start=True, seed=7),
        ), ds, val)
        assert _params_equal(sgd.params, pgd.params)

    def test_robust_gap_over_sgd(self):
        # Monte Carlo over 5 seeds. In 2-D the >=20 point gap appears once the
        # attack radius exceeds the achievable-margin regime (the robust
        # boundary then trades natural accuracy, which this check ignores).
        from atent.data import split_train_val

        eps = 0.3
        atk = AttackConfig(kind="pgd", norm="linf", radius=eps, steps=10,
                           step_size=2.5 * eps / 10, random_start=True, seed=99)
        for seed in range(5):
            ds = synth_two_gaussians(400, 4.0, seed=seed)
            train_ds, val_ds = split_train_val(ds)
            p0 = build_mlp([2, 16, 2], seed=seed)
            sgd = train_sgd(p0, TrainerConfig(defense="sgd", lr=0.5, epochs=30,
                                              batch_size=32, seed=seed,
                                              lr_schedule=[]), train_ds, val_ds)
            pgd = train_pgd_at(p0, TrainerConfig(
                defense="pgd_at", lr=0.5, epochs=30, batch_size=32, seed=seed,
                lr_schedule=[],
                pgd=AttackConfig(kind="pgd", norm="linf", radius=eps, steps=7,
                                 step_size=2.5 * eps / 7, random_start=True,
                                 seed=seed),
            ), train_ds, val_ds)
            gap = robust_accuracy(pgd.params, ds, atk) - robust_accuracy(sgd.params, ds, atk)
            assert gap >= 0.20, f"seed {seed}: gap {gap:.3f}"


class TestTrainEntropySgd:
    def _cfg(self, **kw):
        base = dict(defense="entropy_sgd", lr=0.2, epochs=2, batch_size=32, seed=0,
                    sampler=GibbsSamplerConfig(gamma=1.0, step=0.1, steps=4,
                                               noise_scale=0.0, ema=0.75))
        base.update(kw)
        return TrainerConfig(**base)

    def test_zero_gradient_fixed_point(self):
        # zero weights + balanced labels: grad at w is 0, so with no noise the
        # weight chain never leaves w and the update vanishes
        x = np.random.default_rng(0).random((32, 2))
        y = np.eye(2)[np.arange(32) % 2]
        from atent.data import Dataset
        from atent.tensor import Tensor

        ds = Dataset(Tensor(x), Tensor(y), ["a", "b"])
        p0 = build_mlp([2, 4, 2], seed=0)
        for t in p0.weights.values():
            t.data = np.zeros_like(t.data)
        state = train_entropy_sgd(p0, self._cfg(epochs=1), ds, ds.take(np.arange(0)))
        delta = max(np.max(np.abs(state.params.weights[n].data - p0.weights[n].data))
                    for n in p0.names)
        assert delta <= 1e-8

    def test_quadratic_weight_chain_matches_gaussian_convolution_oracle(self):
        # one-parameter loss a*w^2: the smoothed objective is a Gaussian
        # convolution with closed-form regularized minimizer gamma*w/(gamma+2a)
        a, gamma, w0 = 1.0, 3.0, 2.0
        cfg = GibbsSamplerConfig(gamma=gamma, step=0.05, steps=400,
                                 noise_scale=0.0, ema=0.05)
        anchor = {"w": np.array([w0])}
        mu = weight_langevin_chain(
            lambda w: {"w": 2 * a * w["w"]}, anchor, anchor, cfg, derive_rng(0)
        )
        target = gamma * w0 / (gamma + 2 * a)
        assert abs(mu["w"][0] - target) <= 5e-2
        # outer update direction gamma*(w - mu) matches the analytic gradient
        # of the smoothed objective in sign and approximate value
        analytic = gamma * w0 * (2 * a) / (2 * a + gamma)
        assert math.copysign(1, gamma * (w0 - mu["w"][0])) == math.copysign(1, analytic)
        assert abs(gamma * (w0 - mu["w"][0]) - analytic) <= 0.15

    def test_same_seed_identical(self):
        ds, val = _blobs(seed=3)
        p0 = build_mlp([2, 8, 2], seed=3)
        cfg = self._cfg(sampler=GibbsSamplerConfig(gamma=1.0, step=0.1, steps=3,
                                                   noise_scale=1e-3, ema=0.75))
        a = train_entropy_sgd(p0, cfg, ds, val)
        b = train_entropy_sgd(p0, cfg, ds, val)
        assert _params_equal(a.params, b.params)


class TestTrainAtent:
    def test_noise_free_single_step_equals_regularized_ascent_at(self):
        # K=1, alpha=1, eps=0: bitwise match against a hand-built adversarial
        # trainer whose inner step is one regularized-ascent move
        ds, val = _blobs(seed=4, n=128)
        p0 = build_mlp([2, 8, 2], seed=4)
        gamma, eta_inner, lr, epochs, bs, seed = 2.0, 0.25, 0.3, 3, 32, 11
        scfg = GibbsSamplerConfig(gamma=gamma, step=eta_inner, steps=1,
                                  noise_scale=0.0, ema=1.0, init_radius=0.05)
        cfg = TrainerConfig(defense="atent_l2", lr=lr, epochs=epochs, batch_size=bs,
                            seed=seed, lr_schedule=[], sampler=scfg)
        ours = train_atent(p0, cfg, ds, val)

        from atent.data import batch_iter

        hand = p0.clone()
        for epoch in range(1, epochs + 1):
            for bidx, batch in enumerate(batch_iter(ds, bs, seed, epoch)):
                rng = derive_rng(seed, "chain", epoch, bidx)
                x = batch.inputs.data
                x0 = np.clip(init_perturbation(x, scfg, rng), 0.0, 1.0)
                _, _, g = loss_and_grads(hand, batch.with_inputs(x0), wrt="inputs")
                x1 = x0 + eta_inner * (g - gamma * (x0 - x))  # ascent on L - g/2 d^2
                x1 = np.clip(x1, 0.0, 1.0)  # pixel-range projection, as in PGD-AT
                _, wg, _ = loss_and_grads(hand, batch.with_inputs(x1), wrt="weights")
                for name, t in hand.weights.items():
                    t.data = t.data - lr * wg[name]
        assert _params_equal(ours.params, hand)

    def test_huge_gamma_tracks_sgd(self):
        ds, val = _blobs(seed=5, n=128)
        p0 = build_mlp([2, 8, 2], seed=5)
        lr, bs, seed = 0.3, 32, 13
        sgd = train_sgd(p0, TrainerConfig(defense="sgd", lr=lr, epochs=1,
                                          batch_size=bs, seed=seed,
                                          lr_schedule=[]), ds, val)
        gamma = 1e6
        scfg = GibbsSamplerConfig(gamma=gamma, step=0.1 / gamma, steps=3,
                                  noise_scale=0.0, ema=1.0)  # init_radius 1/gamma
        atent = train_atent(p0, TrainerConfig(defense="atent_l2", lr=lr, epochs=1,
                                              batch_size=bs, seed=seed,
                                              lr_schedule=[], sampler=scfg), ds, val)
        drift = math.sqrt(sum(
            float(np.sum((atent.params.weights[n].data - sgd.params.weights[n].data) ** 2))
            for n in p0.names
        ))
        assert drift <= 1e-3

    def test_same_seed_identical_metrics_stream(self):
        ds, val = _blobs(seed=6, n=128)
        p0 = build_mlp([2, 8, 2], seed=6)
        scfg = GibbsSamplerConfig(gamma=2.0, step=0.1, steps=3, noise_scale=0.01,
                                  ema=0.9, norm="linf")
        cfg = TrainerConfig(defense="atent_linf", lr=0.3, epochs=3, batch_size=32,
                            seed=17, sampler=scfg)
        a = train_atent(p0, cfg, ds, val)
        b = train_atent(p0, cfg, ds, val)
        assert a.history == b.history
        assert _params_equal(a.params, b.params)

    def test_outer_gradient_matches_finite_differences(self):
        # sum_k c_k grad_w L(w; X'_k) vs finite differences of
        # sum_k c_k L(w; X'_k) with the samples frozen
        rng = np.random.default_rng(7)
        p = build_mlp([2, 3, 2], seed=7)
        batch = Batch(rng.random((5, 2)), np.eye(2)[rng.integers(0, 2, 5)])
        scfg = GibbsSamplerConfig(gamma=1.5, step=0.1, steps=4, noise_scale=0.2,
                                  ema=0.6)
        run = run_chain(p, batch, scfg, derive_rng(3))
        grads = atent_outer_gradient(p, batch, run.samples, scfg.ema)
        k = len(run.samples)
        coeff = [scfg.ema * (1 - scfg.ema) ** (k - i - 1) for i in range(k)]

        from atent.models import batch_loss

        for name in p.names:
            t = p.weights[name]

            def f(arr, t=t):
                old = t.data
                t.data = arr
                try:
                    return sum(c * batch_loss(p, batch.with_inputs(x))
                               for c, x in zip(coeff, run.samples))
                finally:
                    t.data = old

            fd = finite_difference_grad(f, t.data.copy())
            assert relative_error(grads[name], fd) <= 1e-4, name

    def test_regularized_objective_monotone_along_noise_free_chain(self):
        # eps=0 chains are gradient ascent on L - gamma/2 ||. - x||^2: the
        # objective must not decrease for small steps (100 random batches)
        from atent.models import batch_loss

        gamma, eta = 2.0, 0.005
        scfg = GibbsSamplerConfig(gamma=gamma, step=eta, steps=6, noise_scale=0.0,
                                  ema=1.0, init_radius=0.05)
        rng = np.random.default_rng(8)
        p = build_mlp([2, 8, 2], seed=8)
        for trial in range(100):
            x = rng.random((4, 2))
            y = np.eye(2)[rng.integers(0, 2, 4)]
            batch = Batch(x, y)
            run = run_chain(p, batch, scfg, derive_rng(trial))

            def objective(xp):
                per_sample = 4 * batch_loss(p, batch.with_inputs(xp))
                return per_sample - 0.5 * gamma * float(np.sum((xp - x) ** 2))

            values = [objective(s) for s in run.samples]
            assert all(b >= a - 1e-9 for a, b in zip(values, values[1:]))


class TestEarlyStopping:
    def _record(self, epoch, nat, rob=None):
        return EpochRecord(epoch=epoch, train_loss=0.1, nat_acc=nat, rob_acc=rob,
                           lr=0.1, wall_ms=0)

    def test_monotone_stream_snapshots_last(self):
        p = build_mlp([2, 2], seed=0)
        state = TrainerState(params=p)
        es = EarlyStopConfig(metric="natural")
        for e, v in enumerate([0.2, 0.5, 0.9], start=1):
            early_stop_update(state, self._record(e, v), es)
        assert state.best_epoch == 3 and state.best_metric == 0.9

    def test_peak_then_decay_keeps_peak(self):
        p = build_mlp([2, 2], seed=0)
        state = TrainerState(params=p)
        es = EarlyStopConfig(metric="natural")
        for e, v in enumerate([0.2, 0.8, 0.5], start=1):
            early_stop_update(state, self._record(e, v), es)
        assert state.best_epoch == 2 and state.best_metric == 0.8

    def test_metric_stream_50_80_60(self):
        p = build_mlp([2, 2], seed=0)
        state = TrainerState(params=p)
        es = EarlyStopConfig(metric="robust",
                             eval_attack=AttackConfig(kind="fgsm", radius=0.1))
        for e, v in enumerate([0.50, 0.80, 0.60], start=1):
            early_stop_update(state, self._record(e, nat=1.0, rob=v), es)
        assert state.best_metric == 0.80 and state.best_epoch == 2
        assert state.best_robust_acc == 0.80

    def test_snapshot_used_and_patience_stops(self):
        ds, _ = _blobs(seed=9, n=128)
        val = synth_two_gaussians(64, 5.0, seed=100)
        p0 = build_mlp([2, 8, 2], seed=9)
        cfg = TrainerConfig(defense="sgd", lr=0.4, epochs=30, batch_size=32, seed=9,
                            lr_schedule=[],
                            early_stop=EarlyStopConfig(metric="natural", patience=3))
        state = train_sgd(p0, cfg, ds, val)
        assert state.best_params is not None
        assert state.best_epoch <= state.epoch
        best_nat = max(r.nat_acc for r in state.history)
        assert state.best_metric == best_nat
        assert accuracy(state.snapshot_params(), val.inputs, val.labels) == best_nat


class TestInterchangeability:
    def test_all_defenses_share_surfaces_and_schema(self):
        ds, _ = _blobs(seed=10, n=64)
        val = synth_two_gaussians(32, 5.0, seed=101)
        p0 = build_mlp([2, 4, 2], seed=10)
        configs = [
            TrainerConfig(defense="sgd", lr=0.2, epochs=2, batch_size=16, seed=1),
            TrainerConfig(defense="entropy_sgd", lr=0.2, epochs=2, batch_size=16, seed=1,
                          sampler=GibbsSamplerConfig(gamma=1.0, step=0.05, steps=2,
                                                     noise_scale=1e-3, ema=0.9)),
            TrainerConfig(defense="pgd_at", lr=0.2, epochs=2, batch_size=16, seed=1,
                          pgd=AttackConfig(kind="pgd", norm="linf", radius=0.1,
                                           steps=2, step_size=0.06)),
            TrainerConfig(defense="atent_l2", lr=0.2, epochs=2, batch_size=16, seed=1,
                          sampler=GibbsSamplerConfig(gamma=2.0, step=0.05, steps=2,
                                                     noise_scale=1e-3, ema=0.9)),
            TrainerConfig(defense="atent_linf", lr=0.2, epochs=2, batch_size=16, seed=1,
                          sampler=GibbsSamplerConfig(gamma=2.0, step=0.05, steps=2,
                                                     noise_scale=1e-3, ema=0.9,
                                                     norm="linf")),
        ]
        fields = None
        for cfg in configs:
            state = train(p0, cfg, ds, val)
            assert len(state.history) == 2
            rec_fields = list(vars(state.history[0]))
            if fields is None:
                fields = rec_fields
            assert rec_fields == fields
            assert all(math.isfinite(r.train_loss) for r in state.history)
