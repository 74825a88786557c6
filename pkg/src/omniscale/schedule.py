"""DDPM noise schedule, forward noising and ancestral sampling steps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    beta_start: float
    beta_end: float
    sigma: str = "posterior"
    beta: np.ndarray = field(repr=False, compare=False, default=None)
    alpha: np.ndarray = field(repr=False, compare=False, default=None)
    alpha_bar: np.ndarray = field(repr=False, compare=False, default=None)

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end, "sigma": self.sigma}

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionSchedule":
        return make_schedule(int(d["T"]), float(d["beta_start"]), float(d["beta_end"]), d.get("sigma", "posterior"))


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2,
                  sigma: str = "posterior") -> DiffusionSchedule:
    """Linear beta ladder over ``T`` steps with cumulative products."""
    if T < 1 or not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"invalid schedule T={T}, beta in [{beta_start}, {beta_end}]")
    if sigma not in ("posterior", "beta"):
        raise ValueError(f"sigma must be 'posterior' or 'beta', got {sigma!r}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64) if T > 1 else np.array([beta_start])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if not np.all(np.diff(alpha_bar) < 0) or alpha_bar[-1] <= 0.0:
        raise ValueError(f"cumulative alpha underflows for T={T}, beta in [{beta_start}, {beta_end}]")
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return DiffusionSchedule(T, beta_start, beta_end, sigma, beta, alpha, alpha_bar)


def _check_t(t, sched: DiffusionSchedule) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 0) or np.any(t >= sched.T):
        raise ValueError(f"timestep {t} outside [0, {sched.T})")
    return t


def noise_coefficients(t, sched: DiffusionSchedule) -> tuple[np.ndarray, np.ndarray]:
    t = _check_t(t, sched)
    ab = sched.alpha_bar[t]
    return np.sqrt(ab), np.sqrt(1.0 - ab)


def add_noise(z0: np.ndarray, t, eps: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """``z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``.

    ``t`` may be a scalar or one timestep per leading (batch) entry.
    """
    z0 = np.asarray(z0)
    if np.shape(eps) != z0.shape:
        raise ValueError(f"eps shape {np.shape(eps)} != z0 shape {z0.shape}")
    a, b = noise_coefficients(t, sched)
    if a.ndim:
        a = a.reshape((-1,) + (1,) * (z0.ndim - 1))
        b = b.reshape((-1,) + (1,) * (z0.ndim - 1))
    return (a * z0 + b * eps).astype(z0.dtype)


def posterior_sigma(t: int, sched: DiffusionSchedule) -> float:
    if t == 0:
        return 0.0
    if sched.sigma == "beta":
        return float(np.sqrt(sched.beta[t]))
    ab, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t - 1]
    return float(np.sqrt(sched.beta[t] * (1.0 - ab_prev) / (1.0 - ab)))


def ddpm_step(z_t: np.ndarray, eps_pred: np.ndarray, t: int, noise: np.ndarray,
              sched: DiffusionSchedule) -> np.ndarray:
    """One ancestral step on the full ladder: posterior mean plus ``sigma_t * noise``."""
    t = int(_check_t(t, sched))
    if np.shape(eps_pred) != np.shape(z_t) or np.shape(noise) != np.shape(z_t):
        raise ValueError("z_t, eps_pred and noise must share a shape")
    if t == 0 and np.any(noise != 0):
        raise ValueError("noise must be zero at t == 0")
    beta, alpha, ab = sched.beta[t], sched.alpha[t], sched.alpha_bar[t]
    mean = (z_t - beta / np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(alpha)
    return (mean + posterior_sigma(t, sched) * noise).astype(np.asarray(z_t).dtype)


def ddpm_jump(z_t: np.ndarray, eps_pred: np.ndarray, t: int, t_prev: int, noise: np.ndarray,
              sched: DiffusionSchedule) -> np.ndarray:
    """Ancestral step from ``t`` to an earlier ``t_prev`` on a subsampled ladder.

    Uses the effective per-jump beta ``1 - abar_t / abar_prev``; reduces to
    :func:`ddpm_step` when ``t_prev == t - 1``. ``t_prev = -1`` means the final
    step to the clean latent.
    """
    t = int(_check_t(t, sched))
    if not -1 <= t_prev < t:
        raise ValueError(f"t_prev {t_prev} must lie in [-1, {t})")
    if t_prev == t - 1:
        return ddpm_step(z_t, eps_pred, t, noise, sched)
    ab = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t_prev] if t_prev >= 0 else 1.0
    alpha = ab / ab_prev
    beta = 1.0 - alpha
    if t_prev < 0 and np.any(noise != 0):
        raise ValueError("noise must be zero on the final step")
    mean = (z_t - beta / np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(alpha)
    if t_prev < 0:
        sig = 0.0
    elif sched.sigma == "beta":
        sig = float(np.sqrt(beta))
    else:
        sig = float(np.sqrt(beta * (1.0 - ab_prev) / (1.0 - ab)))
    return (mean + sig * noise).astype(np.asarray(z_t).dtype)


def subsample_steps(T_train: int, T_infer: int) -> list[int]:
    """Evenly spaced descending timesteps of length ``T_infer`` ending at 0."""
    if T_train < 1 or not 1 <= T_infer <= T_train:
        raise ValueError(f"need 1 <= T_infer ({T_infer}) <= T_train ({T_train})")
    if T_infer == 1:
        return [0]
    ladder = np.round(np.linspace(0, T_train - 1, T_infer)).astype(int)
    return [int(t) for t in ladder[::-1]]
