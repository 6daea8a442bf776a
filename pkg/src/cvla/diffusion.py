"""DDPM training objective and samplers over action chunks.

The schedule derives per-step coefficients from a squared-cosine cumulative
signal profile. Sampling is written in the signal/noise-split family
    x_{k-1} = sqrt(abar_{k-1}) x0_pred + sqrt(1 - abar_{k-1} - sigma_k^2) eps_pred + sigma_k z,
which at sigma_k equal to the posterior std is algebraically identical to the
classic a (x - b eps) + sigma z update (both coefficient forms are exposed and
cross-checked in tests), and at sigma = 0 over a step sub-sequence it is the
deterministic accelerated sampler.
"""

from __future__ import annotations

import numpy as np

from .errors import ArgumentError, NumericError
from .numerics import RngStream, Tensor, gaussian, mul, sub, tensor, tmean

COSINE_OFFSET = 0.008
BETA_MAX = 0.999


class NoiseSchedule:
    """Cumulative signal coefficients abar_k and everything derived from them.

    abar[0] = 1 is the clean sample; abar is strictly decreasing; sigma[1] = 0
    so the final denoising step adds no noise.
    """

    def __init__(self, steps: int = 100):
        self.K = int(steps)
        k = np.arange(self.K + 1, dtype=np.float64)
        f = np.cos(((k / self.K + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * np.pi / 2.0) ** 2
        raw = f / f[0]
        betas = np.clip(1.0 - raw[1:] / raw[:-1], 1e-8, BETA_MAX)
        self.betas = betas  # index k-1 holds beta_k
        self.alphas = 1.0 - betas
        self.alpha_bar = np.concatenate([[1.0], np.cumprod(self.alphas)])
        ab, ab_prev = self.alpha_bar[1:], self.alpha_bar[:-1]
        self.sigmas = np.sqrt(betas * (1.0 - ab_prev) / (1.0 - ab))  # posterior std, sigma_1 = 0
        # classic update coefficients x_{k-1} = a_k (x_k - b_k eps) + sigma_k z
        self.eq_a = 1.0 / np.sqrt(self.alphas)
        self.eq_b = betas / np.sqrt(1.0 - ab)

    def abar(self, k):
        """alpha_bar at step(s) k, k in [0, K]."""
        return self.alpha_bar[np.asarray(k)]


def _check_k(schedule: NoiseSchedule, k) -> np.ndarray:
    k = np.asarray(k)
    if k.min() < 1 or k.max() > schedule.K:
        raise ArgumentError(f"diffusion step {k} outside [1, {schedule.K}]")
    return k


def add_noise(schedule: NoiseSchedule, x0: Tensor, k, stream: RngStream):
    """Corrupt x0 to noise level k: sqrt(abar_k) x0 + sqrt(1-abar_k) eps.

    k may be an int or an int array over the leading axis of x0. Returns
    (noisy, eps), both tensors.
    """
    k = _check_k(schedule, k)
    ab = schedule.abar(k).astype(x0.data.dtype)
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - 1))
    eps = gaussian(stream, x0.shape, dtype=x0.dtype)
    noisy = Tensor(np.sqrt(ab) * x0.data + np.sqrt(1.0 - ab) * eps.data)
    return noisy, eps


def ddpm_loss(schedule: NoiseSchedule, denoiser, x0: Tensor, context, stream: RngStream) -> Tensor:
    """Mean squared error between drawn and predicted noise, per chunk element.

    Samples k uniformly in [1, K] per leading-axis element; differentiable
    into the denoiser and anything inside `context`.
    """
    batched = x0.ndim == 3
    k = stream.integers(x0.shape[0] if batched else 1, 1, schedule.K + 1)
    if not batched:
        k = int(k[0])
    noisy, eps = add_noise(schedule, x0, k, stream)
    pred = denoiser(noisy, k, context)
    diff = sub(pred, eps)
    return tmean(mul(diff, diff))


def _step_back(x: np.ndarray, eps: np.ndarray, ab_from: float, ab_to: float, sigma: float,
               z: np.ndarray | None, x0_clip: float | None) -> np.ndarray:
    """One reverse transition from noise level ab_from to ab_to.

    Coefficients enter as python floats so the array dtype is preserved.
    x0_clip bounds the implied clean sample; with predicted noise this tames
    the 1/sqrt(abar_K) amplification of early reverse steps on bounded data.
    """
    x0_pred = (x - float(np.sqrt(1.0 - ab_from)) * eps) * float(1.0 / np.sqrt(ab_from))
    if x0_clip is not None:
        x0_pred = np.clip(x0_pred, -x0_clip, x0_clip)
    coef_eps = float(np.sqrt(max(1.0 - ab_to - sigma * sigma, 0.0)))
    out = float(np.sqrt(ab_to)) * x0_pred + coef_eps * eps
    if z is not None:
        out = out + sigma * z.astype(out.dtype)
    return out


def ddpm_sample(schedule: NoiseSchedule, denoiser, context, stream: RngStream, shape,
                sigmas: np.ndarray | None = None, dtype: str = "f32",
                x0_clip: float | None = None) -> Tensor:
    """Full-chain ancestral sampling from pure Gaussian noise.

    `sigmas` overrides the per-step noise scale (e.g. zeros for the
    deterministic limit); default is the posterior std.
    """
    sig = schedule.sigmas if sigmas is None else np.asarray(sigmas, dtype=np.float64)
    x = gaussian(stream, shape, dtype=dtype).data
    for k in range(schedule.K, 0, -1):
        eps = denoiser(Tensor(x), k, context).data
        s = float(sig[k - 1])
        z = stream.normal(shape) if s > 0.0 else None
        x = _step_back(x, eps, schedule.alpha_bar[k], schedule.alpha_bar[k - 1], s, z, x0_clip)
        if not np.isfinite(x).all():
            raise NumericError(f"non-finite sample at denoising step {k}")
    return Tensor(x)


def ddim_sample(schedule: NoiseSchedule, denoiser, context, stream: RngStream, shape,
                steps: int = 16, dtype: str = "f32", x0_clip: float | None = None) -> Tensor:
    """Deterministic sampler over an evenly spaced step sub-sequence.

    Only the initial draw consumes randomness; context is computed by the
    caller once and reused across all denoising steps.
    """
    if steps > schedule.K:
        raise ArgumentError(f"ddim steps {steps} > schedule steps {schedule.K}")
    taus = np.unique(np.round(np.linspace(0, schedule.K, steps + 1)).astype(int))[::-1]
    x = gaussian(stream, shape, dtype=dtype).data
    for t, t_next in zip(taus[:-1], taus[1:]):
        eps = denoiser(Tensor(x), int(t), context).data
        x = _step_back(x, eps, schedule.alpha_bar[t], schedule.alpha_bar[t_next], 0.0, None, x0_clip)
        if not np.isfinite(x).all():
            raise NumericError(f"non-finite sample at denoising step {t}")
    return Tensor(x)
