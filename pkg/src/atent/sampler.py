"""Langevin sampling of high-loss neighborhoods of training inputs.

The chain targets the measure exp(L(x') - gamma/2 * dist(x', x)) around the
clean anchor x: squared-l2 distance for the isotropic chain, an l-inf
penalty (realized three ways, see ``linf_mode``) for the sup-norm chain.
Partition functions are never computed; the Langevin drift of log-density
cancels them.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .models import Batch, ModelParams, loss_and_grads
from .tensor import NonFiniteError

log = logging.getLogger(__name__)

L2 = "l2"
LINF = "linf"

FINAL_PROJECTION = "final_projection"
PER_STEP_PROJECTION = "per_step_projection"
COORDINATE_SIGN = "coordinate_sign"

_LINF_MODES = (FINAL_PROJECTION, PER_STEP_PROJECTION, COORDINATE_SIGN)


@dataclass
class GibbsSamplerConfig:
    """Inner-loop knobs of the neighborhood sampler.

    gamma: distance penalty; large gamma pins samples to the clean input.
    step: Langevin step size (eta').
    steps: chain length K.
    noise_scale: additive-noise factor (eps); 0 gives deterministic ascent.
    ema: loss moving-average factor (alpha) in (0, 1].
    init_radius: std of the normal init perturbation; defaults to 1/gamma.
    loss_cap: monitored upper bound on the batch loss (never enforced by
        rejection; exceeding it logs a warning once per chain).
    beta: inverse temperature, fixed at 1; noise_scale is the only knob.
    """

    gamma: float
    step: float
    steps: int
    noise_scale: float = 0.0
    ema: float = 1.0
    norm: str = L2
    init_radius: float | None = None
    beta: float = 1.0
    loss_cap: float = math.inf
    linf_mode: str = FINAL_PROJECTION

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.step <= 0:
            raise ValueError("step must be positive")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be nonnegative")
        if not 0.0 < self.ema <= 1.0:
            raise ValueError("ema must lie in (0, 1]")
        if self.norm not in (L2, LINF):
            raise ValueError(f"norm must be '{L2}' or '{LINF}'")
        if self.beta != 1.0:
            raise ValueError("beta is fixed at 1.0")
        if self.init_radius is not None and self.init_radius < 0:
            raise ValueError("init_radius must be nonnegative")
        if self.linf_mode not in _LINF_MODES:
            raise ValueError(f"linf_mode must be one of {_LINF_MODES}")

    @property
    def effective_init_radius(self) -> float:
        return 1.0 / self.gamma if self.init_radius is None else self.init_radius


@dataclass
class ChainState:
    """One chain's position, anchor, loss EMA and step counter."""

    x_prime: np.ndarray
    x_anchor: np.ndarray
    ema_loss: float
    step_index: int
    rng: np.random.Generator | None = None

    def __post_init__(self):
        if self.x_prime.shape != self.x_anchor.shape:
            raise ValueError("x_prime and x_anchor must share a shape")


@dataclass
class ChainRun:
    samples: list[np.ndarray]
    ema_loss: float
    x_final: np.ndarray


def _clip_range(x: np.ndarray, batch: Batch) -> np.ndarray:
    if batch.value_range is None:
        return x
    lo, hi = batch.value_range
    if x.min() >= lo and x.max() <= hi:
        return x
    return np.clip(x, lo, hi)


def init_perturbation(x: np.ndarray, cfg: GibbsSamplerConfig, rng: np.random.Generator) -> np.ndarray:
    """x plus i.i.d. normal noise with std = init_radius (expected
    per-coordinate magnitude init_radius * sqrt(2/pi))."""
    r = cfg.effective_init_radius
    x = np.asarray(x, dtype=np.float64)
    if r == 0.0:
        return x.copy()
    return x + r * rng.standard_normal(x.shape)


def _noise(shape, cfg: GibbsSamplerConfig, rng: np.random.Generator) -> np.ndarray | None:
    if cfg.noise_scale == 0.0:
        return None
    return math.sqrt(2.0 * cfg.step) * cfg.noise_scale * rng.standard_normal(shape)


def _advance(state: ChainState, new_x: np.ndarray) -> ChainState:
    if not np.all(np.isfinite(new_x)):
        raise NonFiniteError(f"Langevin chain diverged at step {state.step_index + 1}")
    return replace(state, x_prime=new_x, step_index=state.step_index + 1)


def langevin_step_l2(
    state: ChainState,
    grad_x: np.ndarray,
    cfg: GibbsSamplerConfig,
    rng: np.random.Generator,
) -> ChainState:
    """x' <- x' + eta' * (grad + gamma * (x - x')) + sqrt(2 eta') * eps * N(0, I)."""
    drift = grad_x + cfg.gamma * (state.x_anchor - state.x_prime)
    new_x = state.x_prime + cfg.step * drift
    eta = _noise(state.x_prime.shape, cfg, rng)
    if eta is not None:
        new_x = new_x + eta
    return _advance(state, new_x)


def project_linf_increment(z: np.ndarray, gamma: float) -> np.ndarray:
    """Sign-preserving elementwise clamp of an update increment to
    [-1/gamma, +1/gamma]."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    bound = 1.0 / gamma
    return np.clip(z, -bound, bound)


def _coordinate_sign_term(state: ChainState, gamma: float) -> np.ndarray:
    """gamma * sign(x_i - x'_i) on the per-sample coordinate of largest
    |x - x'| (ties to the lowest flat index), zero elsewhere."""
    diff = state.x_anchor - state.x_prime
    term = np.zeros_like(diff)
    if diff.ndim <= 1:
        flat = diff.reshape(-1)
        i = int(np.argmax(np.abs(flat)))
        term.reshape(-1)[i] = gamma * np.sign(flat[i])
        return term
    rows = diff.reshape(diff.shape[0], -1)
    idx = np.argmax(np.abs(rows), axis=1)
    out = term.reshape(diff.shape[0], -1)
    sel = rows[np.arange(rows.shape[0]), idx]
    out[np.arange(rows.shape[0]), idx] = gamma * np.sign(sel)
    return term


def langevin_step_linf(
    state: ChainState,
    grad_x: np.ndarray,
    cfg: GibbsSamplerConfig,
    rng: np.random.Generator,
) -> ChainState:
    """Sup-norm neighborhood step in one of three modes.

    final_projection: raw increments, clamped by P_gamma on the K-th step
    only. per_step_projection: clamp every increment. coordinate_sign:
    drift gains gamma*sign(x-x') on the single largest-gap coordinate.
    """
    if cfg.linf_mode == COORDINATE_SIGN:
        drift = grad_x + _coordinate_sign_term(state, cfg.gamma)
        new_x = state.x_prime + cfg.step * drift
        eta = _noise(state.x_prime.shape, cfg, rng)
        if eta is not None:
            new_x = new_x + eta
        return _advance(state, new_x)

    inc = cfg.step * grad_x
    eta = _noise(state.x_prime.shape, cfg, rng)
    if eta is not None:
        inc = inc + eta
    last = state.step_index + 1 == cfg.steps
    if cfg.linf_mode == PER_STEP_PROJECTION or (cfg.linf_mode == FINAL_PROJECTION and last):
        inc = project_linf_increment(inc, cfg.gamma)
    return _advance(state, state.x_prime + inc)


def langevin_step(
    state: ChainState,
    grad_x: np.ndarray,
    cfg: GibbsSamplerConfig,
    rng: np.random.Generator,
) -> ChainState:
    if cfg.norm == L2:
        return langevin_step_l2(state, grad_x, cfg, rng)
    return langevin_step_linf(state, grad_x, cfg, rng)


def run_chain(
    params: ModelParams,
    batch: Batch,
    cfg: GibbsSamplerConfig,
    rng: np.random.Generator,
) -> ChainRun:
    """Initialize with a normal perturbation, run K Langevin steps with
    per-sample own-loss input gradients, and accumulate the loss EMA
    mu <- (1-alpha) mu + alpha * L(w; x'^k), mu^0 = 0.

    When the batch declares a value range, every iterate is clipped back
    into it: the adversarial-input distribution has bounded support, and
    off-range samples would train against perturbations the evaluation
    attacks can never realize.
    """
    anchor = batch.inputs.data
    x0 = _clip_range(init_perturbation(anchor, cfg, rng), batch)
    state = ChainState(x_prime=x0, x_anchor=anchor, ema_loss=0.0, step_index=0, rng=rng)
    _, _, grad_x = loss_and_grads(params, batch.with_inputs(state.x_prime), wrt="inputs")
    samples: list[np.ndarray] = []
    warned = False
    for _ in range(cfg.steps):
        state = langevin_step(state, grad_x, cfg, rng)
        clipped = _clip_range(state.x_prime, batch)
        if clipped is not state.x_prime:
            state = replace(state, x_prime=clipped)
        loss, _, grad_x = loss_and_grads(params, batch.with_inputs(state.x_prime), wrt="inputs")
        if loss > cfg.loss_cap and not warned:
            log.warning("chain batch loss %.4g exceeded loss_cap %.4g", loss, cfg.loss_cap)
            warned = True
        state = replace(state, ema_loss=(1.0 - cfg.ema) * state.ema_loss + cfg.ema * loss)
        samples.append(state.x_prime.copy())
    return ChainRun(samples=samples, ema_loss=state.ema_loss, x_final=state.x_prime)
