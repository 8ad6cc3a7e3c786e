"""Structured verification suites behind the CLI ``verify`` subcommand.

Each check compares an implementation path against an independent oracle
(finite differences, grid integration, analytic stationary laws) and
reports pass/fail with a measured detail. Negative controls assert that a
deliberately wrong input FAILS its check.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .defenses import atent_outer_gradient
from .models import Batch, batch_loss, build_mlp, build_small_cnn, loss_and_grads
from .oracle import (
    chain_moment_check,
    finite_difference_grad,
    grid_gibbs_density,
    lemma1_check,
    relative_error,
    sample_gibbs_chain,
)
from .sampler import GibbsSamplerConfig, run_chain
from .seeding import derive_rng
from .tensor import Tensor

GRAD_TOL = 1e-4
AFFINE_TOL = 1e-6
MOMENT_TOL = 0.10
KEPT_SAMPLES = 50_000


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{self.suite}] {self.name}: {status} ({self.detail})"


def _fd_vs_autodiff(name, build_scalar, leaf, tol) -> CheckResult:
    """build_scalar() evaluates the scalar; gradient wrt leaf vs central FD."""
    leaf.requires_grad = True
    with tc.Tape() as tape:
        out = build_scalar()
    grads = tc.backward(tape, out)
    analytic = grads[leaf].data

    def f(arr):
        old = leaf.data
        leaf.data = arr
        try:
            return build_scalar().item()
        finally:
            leaf.data = old

    fd = finite_difference_grad(f, leaf.data.copy())
    err = relative_error(analytic, fd)
    return CheckResult("gradients", name, err <= tol, f"rel err {err:.3e} <= {tol:g}")


def gradient_suite() -> list[CheckResult]:
    results = []
    rng = np.random.default_rng(0)

    a = Tensor(rng.random((3, 4)))
    b = Tensor(rng.random((4, 5)))
    results.append(_fd_vs_autodiff(
        "matmul (affine)", lambda: tc.sum_all(tc.matmul(a, b)), a, AFFINE_TOL))

    bias = Tensor(rng.random(5))
    results.append(_fd_vs_autodiff(
        "bias add (affine)", lambda: tc.sum_all(tc.add(tc.matmul(a, b), bias)),
        bias, AFFINE_TOL))

    x = Tensor(rng.random((2, 2, 6, 6)))
    k = Tensor(rng.random((3, 2, 3, 3)))
    results.append(_fd_vs_autodiff(
        "conv2d (affine)", lambda: tc.sum_all(tc.conv2d(x, k, 1, 1)), k, AFFINE_TOL))

    r = Tensor(rng.random(30) * 2 - 1.0)
    results.append(_fd_vs_autodiff(
        "relu", lambda: tc.sum_all(tc.relu(r)), r, GRAD_TOL))

    z = Tensor(rng.normal(size=(4, 6)))
    y = Tensor(np.eye(6)[rng.integers(0, 6, 4)])
    results.append(_fd_vs_autodiff(
        "softmax cross-entropy", lambda: tc.softmax_cross_entropy(z, y), z, GRAD_TOL))

    mp = Tensor(rng.random((1, 2, 6, 6)))
    results.append(_fd_vs_autodiff(
        "max pool", lambda: tc.sum_all(tc.max_pool2d(mp, 2)), mp, GRAD_TOL))

    for name, params, batch in _end_to_end_cases(rng):
        _, wg, xg = loss_and_grads(params, batch, wrt="both")
        worst = 0.0
        for wname, t in params.weights.items():
            def f(arr, t=t):
                old = t.data
                t.data = arr
                try:
                    return batch_loss(params, batch)
                finally:
                    t.data = old

            fd = finite_difference_grad(f, t.data.copy())
            worst = max(worst, relative_error(wg[wname], fd))

        def fx(arr):
            return batch.n * batch_loss(params, batch.with_inputs(arr))

        fd_x = finite_difference_grad(fx, batch.inputs.data.copy())
        worst = max(worst, relative_error(xg, fd_x))
        results.append(CheckResult(
            "gradients", f"end-to-end {name}", worst <= GRAD_TOL,
            f"worst rel err {worst:.3e} <= {GRAD_TOL:g}"))

    return results


def _end_to_end_cases(rng):
    p1 = build_mlp([2, 16, 2], seed=1)
    b1 = Batch(rng.random((6, 2)), np.eye(2)[rng.integers(0, 2, 6)])
    p2 = build_mlp([6, 16, 12, 3], seed=2)
    b2 = Batch(rng.random((5, 6)), np.eye(3)[rng.integers(0, 3, 5)])
    p3 = build_small_cnn([2], [8, 3], seed=3, in_shape=(1, 8, 8))
    b3 = Batch(rng.random((3, 1, 8, 8)), np.eye(3)[rng.integers(0, 3, 3)])
    return [("mlp", p1, b1), ("deep mlp", p2, b2), ("small cnn", p3, b3)]


# ---------------------------------------------------------------------------


def _scalar_chain(gamma, grad_fn, seed, anchor=0.3, step=0.01):
    cfg = GibbsSamplerConfig(gamma=gamma, step=step, steps=1, noise_scale=1.0)
    n_total = int(math.ceil(KEPT_SAMPLES / 0.8))
    return sample_gibbs_chain(grad_fn, [anchor], cfg, n_total, derive_rng(seed))


def sampler_suite() -> list[CheckResult]:
    results = []
    gamma, anchor = 4.0, 0.3

    const_grid = grid_gibbs_density(lambda pts: np.zeros(pts.shape[0]), anchor,
                                    gamma, [(anchor - 4.0, anchor + 4.0)], 2001)
    const_chain = _scalar_chain(gamma, lambda v: np.zeros_like(v), seed=10)
    rep = chain_moment_check(const_chain, const_grid, rel_tol=MOMENT_TOL)
    var = rep.empirical_variance[0]
    results.append(CheckResult(
        "sampler", "constant loss variance 1/gamma", rep.passed,
        f"var {var:.4f} vs {1 / gamma:.4f}, rel errs mean {rep.mean_rel_err:.3f} "
        f"var {rep.variance_rel_err:.3f} <= {MOMENT_TOL}"))

    a = 1.0
    mean_t = gamma * anchor / (gamma - 2 * a)
    quad_grid = grid_gibbs_density(lambda pts: a * pts[:, 0] ** 2, anchor, gamma,
                                   [(mean_t - 6.0, mean_t + 6.0)], 2001)
    quad_chain = _scalar_chain(gamma, lambda v: 2 * a * v, seed=11)
    rep = chain_moment_check(quad_chain, quad_grid, rel_tol=MOMENT_TOL)
    results.append(CheckResult(
        "sampler", "quadratic loss mean/variance vs grid", rep.passed,
        f"mean {rep.empirical_mean[0]:.4f} vs {rep.grid_mean[0]:.4f}, "
        f"var {rep.empirical_variance[0]:.4f} vs {rep.grid_variance[0]:.4f}"))

    wrong_chain = _scalar_chain(2 * gamma, lambda v: np.zeros_like(v), seed=12)
    rep = chain_moment_check(wrong_chain, const_grid, rel_tol=MOMENT_TOL)
    results.append(CheckResult(
        "sampler", "negative control: mismatched gamma fails", not rep.passed,
        f"variance rel err {rep.variance_rel_err:.3f} (must exceed {MOMENT_TOL})"))

    return results


def lemma1_suite() -> list[CheckResult]:
    results = []
    gamma = 3.0
    lip = 2.0 * math.sqrt(50.0)
    report = lemma1_check(lambda v: 2.0 * np.asarray(v), beta=2.0, lipschitz=lip,
                          gamma=gamma, anchor=[0.5, 0.5], bounds=[(-5, 5), (-5, 5)],
                          n_points=10_000, seed=0)
    results.append(CheckResult(
        "lemma1", "quadratic smoothness ratio <= beta+gamma", report.smooth_ok,
        f"ratio {report.smoothness_ratio:.4f} <= {report.smoothness_bound:.4f}"))
    results.append(CheckResult(
        "lemma1", "quadratic dissipativity margin >= 0", report.dissipative_ok,
        f"margin {report.dissipativity_margin:.4f} with m={report.m}, b={report.b:.3f}"))

    r2 = lemma1_check(lambda v: 2.0 * np.asarray(v), beta=2.0, lipschitz=lip,
                      gamma=2 * gamma, anchor=[0.5, 0.5], bounds=[(-5, 5), (-5, 5)],
                      n_points=100, seed=0)
    results.append(CheckResult(
        "lemma1", "gamma doubling doubles m", r2.m == 2 * report.m,
        f"m {report.m} -> {r2.m}"))

    neg = lemma1_check(lambda v: -2.0 * np.asarray(v), beta=0.5, lipschitz=lip,
                       gamma=gamma, anchor=[0.0, 0.0], bounds=[(-5, 5), (-5, 5)],
                       n_points=2000, seed=1)
    results.append(CheckResult(
        "lemma1", "negative control: understated beta fails", not neg.smooth_ok,
        f"ratio {neg.smoothness_ratio:.4f} vs bound {neg.smoothness_bound:.4f}"))

    neg2 = lemma1_check(lambda v: 2.0 * np.asarray(v), beta=2.0, lipschitz=1.0,
                        gamma=gamma, anchor=[3.0, 0.0], bounds=[(-5, 5), (-5, 5)],
                        n_points=5000, seed=2)
    results.append(CheckResult(
        "lemma1", "negative control: understated Lipschitz fails",
        not neg2.dissipative_ok, f"margin {neg2.dissipativity_margin:.4f}"))

    return results


SUITES = {
    "gradients": gradient_suite,
    "sampler": sampler_suite,
    "lemma1": lemma1_suite,
}


def run_suites(which: str = "all") -> list[CheckResult]:
    names = list(SUITES) if which == "all" else [which]
    results = []
    for name in names:
        if name not in SUITES:
            raise ValueError(f"unknown suite {name!r}; choose from {list(SUITES)} or 'all'")
        results.extend(SUITES[name]())
    return results
