"""Noise schedules and the forward/backward diffusion processes.

Steps are 1-indexed: step t of a schedule with T steps uses betas[t-1].
alpha_bar(0) is defined as 1, which also makes the posterior variance at
the final backward step exactly zero.

The forward process supports two noise conventions. The default scales the
injected noise by (1 - alpha) per step and (1 - alpha_bar) in the marginal.
With variance_preserving=True the scale is the square root of those
factors, which is the convention the backward mean formula inverts; the
sampling pipeline runs with the flag on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeMismatch, Tensor, as_tensor, mean, mul, sub

COSINE_OFFSET = 0.008
BETA_MAX = 0.999


class StepOutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step beta/alpha/alpha_bar arrays, optionally a respaced subsequence.

    base_indices maps each step of a respaced schedule back to the original
    timestep (used for denoiser conditioning); it is None for base schedules.
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    base_indices: np.ndarray | None = None

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        a = np.asarray(self.alphas, dtype=np.float64)
        ab = np.asarray(self.alpha_bars, dtype=np.float64)
        if not (b.shape == a.shape == ab.shape) or b.ndim != 1 or b.size == 0:
            raise ValueError("betas/alphas/alpha_bars must be equal-length 1d arrays")
        if np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.base_indices is None and np.any(b > BETA_MAX):
            raise ValueError(f"base schedule betas must not exceed {BETA_MAX}")
        if np.abs(a - (1.0 - b)).max() > 1e-15:
            raise ValueError("alphas must equal 1 - betas")
        if np.abs(ab - np.cumprod(a)).max() > 1e-12:
            raise ValueError("alpha_bars must be the cumulative product of alphas")
        object.__setattr__(self, "betas", _ro(b))
        object.__setattr__(self, "alphas", _ro(a))
        object.__setattr__(self, "alpha_bars", _ro(ab))
        if self.base_indices is not None:
            idx = np.asarray(self.base_indices, dtype=np.int64)
            if idx.shape != b.shape or np.any(np.diff(idx) <= 0) or idx[0] < 1:
                raise ValueError("base_indices must be strictly increasing and start >= 1")
            object.__setattr__(self, "base_indices", _ro(idx))

    @property
    def T(self):
        return int(self.betas.size)

    def _check_step(self, t):
        if not 1 <= t <= self.T:
            raise StepOutOfRange(f"step {t} outside [1, {self.T}]")
        return int(t)

    def alpha_bar(self, t):
        if t == 0:
            return 1.0
        return float(self.alpha_bars[self._check_step(t) - 1])

    def beta(self, t):
        return float(self.betas[self._check_step(t) - 1])

    def alpha(self, t):
        return float(self.alphas[self._check_step(t) - 1])

    def original_step(self, t):
        """Pre-respacing timestep index for denoiser conditioning."""
        t = self._check_step(t)
        if self.base_indices is None:
            return t
        return int(self.base_indices[t - 1])


def _ro(a):
    a = np.array(a)
    a.setflags(write=False)
    return a


def cosine_schedule(T, offset=COSINE_OFFSET):
    """Squared-cosine alpha_bar profile with betas clipped to BETA_MAX.

    alpha_bars are recomputed from the clipped betas so the cumulative
    product identity holds exactly.
    """
    if T < 1:
        raise StepOutOfRange(f"T must be >= 1, got {T}")
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((steps / T + offset) / (1.0 + offset)) * (np.pi / 2.0)) ** 2
    abar = f / f[0]
    betas = np.minimum(1.0 - abar[1:] / abar[:-1], BETA_MAX)
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


def respace(sched, inference_steps):
    """Evenly strided subsequence of a base schedule ending at its last step.

    The respaced betas are the exact alpha_bar ratios of the retained
    steps, so retained alpha_bars equal the originals; they are stored
    verbatim (a coarse stride can push an effective beta above BETA_MAX,
    which is why the cap applies to base schedules only).
    """
    if sched.base_indices is not None:
        raise ValueError("respace expects a base schedule")
    n = int(inference_steps)
    if not 1 <= n <= sched.T:
        raise StepOutOfRange(f"inference_steps {n} outside [1, {sched.T}]")
    keep = np.round(np.arange(1, n + 1) * (sched.T / n)).astype(np.int64)
    keep[-1] = sched.T
    if np.any(np.diff(keep) <= 0):  # guard tiny-T corner cases of rounding
        keep = np.unique(keep)
        n = keep.size
    abar = sched.alpha_bars[keep - 1]
    prev = np.concatenate([[1.0], abar[:-1]])
    betas = 1.0 - abar / prev
    return NoiseSchedule(betas=betas, alphas=1.0 - betas, alpha_bars=abar, base_indices=keep)


def _noise_coeff(one_minus, variance_preserving):
    return np.sqrt(one_minus) if variance_preserving else one_minus


def forward_step(x_prev, t, eps, sched, variance_preserving=False):
    """One forward noising step from x_{t-1} to x_t."""
    a = sched.alpha(t)
    return np.sqrt(a) * np.asarray(x_prev) + _noise_coeff(1.0 - a, variance_preserving) * np.asarray(eps)


def forward_marginal(x0, t, eps, sched, variance_preserving=False):
    """Sample x_t directly from x_0."""
    ab = sched.alpha_bar(t)
    return np.sqrt(ab) * np.asarray(x0) + _noise_coeff(1.0 - ab, variance_preserving) * np.asarray(eps)


def mu_from_eps(x_t, t, eps_pred, sched):
    """Posterior mean given a noise prediction."""
    a = sched.alpha(t)
    ab = sched.alpha_bar(t)
    return (np.asarray(x_t) - ((1.0 - a) / np.sqrt(1.0 - ab)) * np.asarray(eps_pred)) / np.sqrt(a)


def posterior_sigma(sched, t):
    """Fixed posterior standard deviation sqrt(beta_tilde_t); zero at t=1."""
    t = sched._check_step(t)
    ab_prev = sched.alpha_bar(t - 1)
    ab = sched.alpha_bar(t)
    return float(np.sqrt((1.0 - ab_prev) / (1.0 - ab) * sched.beta(t)))


def backward_step(x_t, t, eps_pred, noise, sched):
    """One backward step x_t -> x_{t-1}; no noise enters at the final step."""
    mu = mu_from_eps(x_t, t, eps_pred, sched)
    if t == 1:
        return mu
    return mu + posterior_sigma(sched, t) * np.asarray(noise)


def clamp_implied_x0(x_t, t, eps_pred, sched, lo=-1.0, hi=1.0):
    """Noise prediction adjusted so its implied clean image lies in [lo, hi].

    The first steps of a respaced cosine chain sit at alpha_bar ~ 0, where
    the clean image implied by an imperfect eps estimate is amplified by
    1/sqrt(alpha_bar); left unclamped, that error derails the posterior mean
    and the whole chain saturates. Learned-predictor chains therefore clamp
    the estimate to the data range before stepping; analytic predictors
    whose implied x0 is already in range pass through unchanged (up to
    roundoff).
    """
    x_t = np.asarray(x_t)
    ab = sched.alpha_bar(t)
    root_ab = np.sqrt(ab)
    root_rem = np.sqrt(1.0 - ab)
    x0 = (x_t - root_rem * np.asarray(eps_pred)) / root_ab
    return (x_t - root_ab * np.clip(x0, lo, hi)) / root_rem


def diffusion_loss(eps_true, eps_pred):
    """Mean squared error between true and predicted noise, as a taped scalar."""
    eps_pred = as_tensor(eps_pred)
    eps_true = as_tensor(eps_true)
    if eps_true.shape != eps_pred.shape:
        raise ShapeMismatch(f"eps shapes differ: {eps_true.shape} vs {eps_pred.shape}")
    d = sub(eps_pred, eps_true)
    return mean(mul(d, d))
