"""Variance schedule and closed-form diffusion arithmetic.

Conventions: diffusion step indices k run 1..K (k=0 is the clean sample);
coefficient tables are stored 0-indexed, so ``alpha[k-1]`` belongs to step k.
All functions are pure; randomness comes in through an explicit generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ALPHA_FLOOR = 0.001  # cosine schedule clips alpha_k to >= this


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step alpha_k, cumulative alpha_bar_k and reverse noise scale."""

    K: int
    alpha: np.ndarray      # (K,) alpha_k in (0, 1)
    alpha_bar: np.ndarray  # (K,) prod_{s<=k} alpha_s, strictly decreasing
    sigma: np.ndarray      # (K,) sqrt(1 - alpha_k)

    def alpha_bar_at(self, k: int) -> float:
        """alpha_bar for step k with the k=0 convention alpha_bar_0 = 1."""
        if k == 0:
            return 1.0
        return float(self.alpha_bar[k - 1])


@dataclass(frozen=True)
class SamplerParams:
    guidance_scale: float = 1.2
    temperature_scale: float = 0.5
    sampler_kind: str = "ancestral"  # "ancestral" | "ddim"
    ddim_steps: int = 15

    def validate(self, K: int | None = None) -> None:
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")
        if not 0.0 <= self.temperature_scale < 1.0:
            raise ValueError("temperature_scale must be in [0, 1)")
        if self.sampler_kind not in ("ancestral", "ddim"):
            raise ValueError(f"unknown sampler_kind {self.sampler_kind!r}")
        if self.ddim_steps < 1:
            raise ValueError("ddim_steps must be >= 1")
        if (K is not None and self.sampler_kind == "ddim"
                and self.ddim_steps > K):
            raise ValueError("ddim_steps must be <= K")


def build_schedule(K: int, kind: str = "cosine") -> DiffusionSchedule:
    """Construct the coefficient tables for a K-step chain."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if kind == "cosine":
        s = 0.008
        ts = np.arange(K + 1, dtype=np.float64) / K
        f = np.cos((ts + s) / (1 + s) * math.pi / 2.0) ** 2
        abar_raw = f / f[0]
        alpha = np.clip(abar_raw[1:] / abar_raw[:-1], ALPHA_FLOOR, 1.0 - 1e-12)
    elif kind == "linear":
        beta = np.linspace(1e-4, 2e-2, K, dtype=np.float64)
        alpha = 1.0 - beta
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha_bar = np.cumprod(alpha)
    sched = DiffusionSchedule(K=K, alpha=alpha, alpha_bar=alpha_bar,
                              sigma=np.sqrt(1.0 - alpha))
    _check_invariants(sched)
    return sched


def _check_invariants(s: DiffusionSchedule) -> None:
    if not (len(s.alpha) == len(s.alpha_bar) == len(s.sigma) == s.K):
        raise ValueError("schedule table lengths must equal K")
    if np.any(s.alpha <= 0) or np.any(s.alpha >= 1):
        raise ValueError("alpha_k must lie in (0, 1)")
    if np.any(np.diff(s.alpha_bar) >= 0):
        raise ValueError("alpha_bar must be strictly decreasing")
    prev = np.concatenate([[1.0], s.alpha_bar[:-1]])
    if np.max(np.abs(s.alpha_bar - prev * s.alpha) / s.alpha_bar) > 1e-12:
        raise ValueError("alpha_bar inconsistent with cumulative product")


def _check_step(k: int, K: int) -> None:
    if not 1 <= k <= K:
        raise ValueError(f"step k={k} out of range 1..{K}")


def _check_shapes(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def forward_noise(tau0: np.ndarray, k: int, eps: np.ndarray,
                  sched: DiffusionSchedule) -> np.ndarray:
    """Noise a clean sample straight to step k:
    sqrt(abar_k) tau0 + sqrt(1 - abar_k) eps."""
    _check_step(k, sched.K)
    _check_shapes(tau0, eps, "forward_noise")
    ab = float(sched.alpha_bar[k - 1])
    return math.sqrt(ab) * tau0 + math.sqrt(1.0 - ab) * eps


def posterior_mean(tau_k: np.ndarray, k: int, eps_hat: np.ndarray,
                   sched: DiffusionSchedule) -> np.ndarray:
    """Mean of the reverse kernel given a noise prediction:
    (tau_k - (1 - alpha_k)/sqrt(1 - abar_k) * eps_hat) / sqrt(alpha_k)."""
    _check_step(k, sched.K)
    _check_shapes(tau_k, eps_hat, "posterior_mean")
    a = float(sched.alpha[k - 1])
    ab = float(sched.alpha_bar[k - 1])
    return (tau_k - (1.0 - a) / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(a)


def guided_epsilon(eps_cond: np.ndarray, eps_uncond: np.ndarray,
                   omega: float) -> np.ndarray:
    """eps_uncond + omega * (eps_cond - eps_uncond).

    omega 0 and 1 return exact copies of the respective input so that guided
    chains are bit-identical to single-branch chains at those settings.
    """
    _check_shapes(eps_cond, eps_uncond, "guided_epsilon")
    if omega == 0.0:
        return eps_uncond.copy()
    if omega == 1.0:
        return eps_cond.copy()
    return eps_uncond + omega * (eps_cond - eps_uncond)


def sample_initial(shape, temperature_scale: float,
                   rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Initial chain state: iid zero-mean Gaussian with std temperature_scale."""
    if not 0.0 <= temperature_scale < 1.0:
        raise ValueError("temperature_scale must be in [0, 1)")
    if temperature_scale == 0.0:
        return np.zeros(shape, dtype=dtype)
    return (temperature_scale * rng.standard_normal(shape)).astype(dtype)


def denoise_step(tau_k: np.ndarray, k: int, eps_hat: np.ndarray,
                 sched: DiffusionSchedule, temperature_scale: float,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """One ancestral reverse step. Variance (1-alpha_k) I, std scaled by the
    temperature factor; the k=1 step adds no noise."""
    _check_step(k, sched.K)
    mu = posterior_mean(tau_k, k, eps_hat, sched)
    if k == 1 or temperature_scale == 0.0:
        return mu
    if rng is None:
        raise ValueError("rng required when injecting reverse-step noise")
    z = rng.standard_normal(tau_k.shape).astype(tau_k.dtype, copy=False)
    return mu + temperature_scale * float(sched.sigma[k - 1]) * z


def ddim_step(tau_k: np.ndarray, k: int, k_prev: int, eps_hat: np.ndarray,
              sched: DiffusionSchedule) -> np.ndarray:
    """Deterministic skip update k -> k_prev (k_prev may be 0)."""
    if k_prev >= k:
        raise ValueError(f"ddim_step needs k_prev < k, got {k_prev} >= {k}")
    _check_step(k, sched.K)
    _check_shapes(tau_k, eps_hat, "ddim_step")
    ab_k = sched.alpha_bar_at(k)
    ab_p = sched.alpha_bar_at(k_prev)
    x0 = (tau_k - math.sqrt(1.0 - ab_k) * eps_hat) / math.sqrt(ab_k)
    return math.sqrt(ab_p) * x0 + math.sqrt(1.0 - ab_p) * eps_hat


def ddim_timesteps(K: int, n_steps: int) -> np.ndarray:
    """Strictly decreasing step sequence K -> 0 with n_steps denoiser calls.

    Returns n_steps+1 integers; consecutive pairs are the (k, k_prev)
    arguments of ddim_step, the last entry is always 0.
    """
    if not 1 <= n_steps <= K:
        raise ValueError("need 1 <= n_steps <= K")
    ks = np.unique(np.round(np.linspace(0, K, n_steps + 1)).astype(np.int64))
    return ks[::-1].copy()
