"""EgoWorld core: DDPM noise schedule, losses and reverse sampling.

Noise steps are 0-based: tau in [0, n_steps). The model predicts epsilon plus one
coefficient v in [-1, 1] that interpolates the log variance between the posterior
variance (v = -1) and beta (v = +1). The variational term is reported in nats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm

from .errors import ConfigError, DataError, NumericalError

LINEAR_BETA_START = 1e-4
LINEAR_BETA_END = 2e-2
COSINE_OFFSET = 0.008
MAX_BETA = 0.999

ModelFn = Callable[[torch.Tensor, torch.Tensor], Tuple[torch.Tensor, torch.Tensor]]


def _betas_for_alpha_bar(n_steps: int, alpha_bar: Callable[[float], float]) -> np.ndarray:
    betas = []
    for i in range(n_steps):
        t1, t2 = i / n_steps, (i + 1) / n_steps
        betas.append(min(1.0 - alpha_bar(t2) / alpha_bar(t1), MAX_BETA))
    return np.asarray(betas, dtype=np.float64)


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # float64
    kind: str = "linear"
    timestep_map: Tuple[int, ...] = ()  # model-facing step index per schedule step
    alphas_cumprod: np.ndarray = field(init=False, repr=False)
    alphas_cumprod_prev: np.ndarray = field(init=False, repr=False)
    posterior_variance: np.ndarray = field(init=False, repr=False)
    posterior_log_variance_clipped: np.ndarray = field(init=False, repr=False)
    posterior_mean_coef1: np.ndarray = field(init=False, repr=False)
    posterior_mean_coef2: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 2:
            raise ConfigError("Noise schedule needs at least 2 steps.", field="diffusion.steps")
        if not (np.all(betas > 0) and np.all(betas < 1)):
            raise ConfigError("Noise schedule betas must lie in (0, 1).", field="diffusion.schedule")
        object.__setattr__(self, "betas", betas)
        if not self.timestep_map:
            object.__setattr__(self, "timestep_map", tuple(range(betas.size)))
        alphas_cumprod = np.cumprod(1.0 - betas)
        prev = np.append(1.0, alphas_cumprod[:-1])
        post_var = betas * (1.0 - prev) / (1.0 - alphas_cumprod)
        object.__setattr__(self, "alphas_cumprod", alphas_cumprod)
        object.__setattr__(self, "alphas_cumprod_prev", prev)
        object.__setattr__(self, "posterior_variance", post_var)
        # Posterior variance is 0 at step 0; its log borrows step 1.
        object.__setattr__(self, "posterior_log_variance_clipped", np.log(np.append(post_var[1], post_var[1:])))
        object.__setattr__(self, "posterior_mean_coef1", betas * np.sqrt(prev) / (1.0 - alphas_cumprod))
        object.__setattr__(self, "posterior_mean_coef2", (1.0 - prev) * np.sqrt(1.0 - betas) / (1.0 - alphas_cumprod))

    @property
    def n_steps(self) -> int:
        return int(self.betas.size)

    def respace(self, n_sampling: int) -> "NoiseSchedule":
        """Strided sub-schedule with the same alpha-bar at the kept steps; 0 keeps every step."""
        if n_sampling <= 0 or n_sampling >= self.n_steps:
            return self
        if n_sampling < 2:
            raise ConfigError("Sampling schedule needs at least 2 steps.", field="diffusion.sampling_steps")
        keep = sorted(set(int(i) for i in np.round(np.linspace(0, self.n_steps - 1, n_sampling))))
        last = 1.0
        betas = []
        for i in keep:
            betas.append(1.0 - self.alphas_cumprod[i] / last)
            last = self.alphas_cumprod[i]
        return NoiseSchedule(betas=np.asarray(betas), kind=self.kind,
                             timestep_map=tuple(self.timestep_map[i] for i in keep))

    def to_manifest(self) -> Dict[str, str]:
        return {
            "schedule.kind": self.kind,
            "schedule.n_steps": str(self.n_steps),
            "schedule.betas": ",".join(repr(float(b)) for b in self.betas),
        }

    @classmethod
    def from_manifest(cls, entries: Dict[str, str]) -> "NoiseSchedule":
        try:
            betas = np.array([float(b) for b in entries["schedule.betas"].split(",")], dtype=np.float64)
            n = int(entries["schedule.n_steps"])
        except (KeyError, ValueError) as e:
            raise DataError(f"Checkpoint manifest lacks a valid schedule: {e}") from e
        if betas.size != n:
            raise DataError(f"Schedule lists {betas.size} betas but declares {n} steps.")
        return cls(betas=betas, kind=entries.get("schedule.kind", "linear"))


def make_schedule(n_steps: int, kind: str = "linear") -> NoiseSchedule:
    if n_steps < 2:
        raise ConfigError(f"n_steps must be >= 2, got {n_steps}.", field="diffusion.steps")
    if kind == "linear":
        betas = np.linspace(LINEAR_BETA_START, LINEAR_BETA_END, n_steps, dtype=np.float64)
    elif kind == "cosine":
        betas = _betas_for_alpha_bar(
            n_steps, lambda t: math.cos((t + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2
        )
    else:
        raise ConfigError(f"Unknown schedule '{kind}'.", field="diffusion.schedule")
    return NoiseSchedule(betas=betas, kind=kind)


# ---------------- Helpers ----------------

def _extract(arr: np.ndarray, tau: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Gather per-step values for `tau` and right-pad dims so they broadcast against `like`."""
    res = torch.from_numpy(arr).to(device=like.device, dtype=like.dtype)[tau.long()]
    while res.ndim < like.ndim:
        res = res[..., None]
    return res


def _check_tau(tau: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    tau = torch.as_tensor(tau)
    if tau.numel() and (int(tau.min()) < 0 or int(tau.max()) >= schedule.n_steps):
        raise DataError(f"Noise step out of range [0, {schedule.n_steps}).")
    return tau


def check_finite(name: str, *tensors: torch.Tensor) -> None:
    for t in tensors:
        if not bool(torch.isfinite(t).all()):
            raise NumericalError(f"Non-finite values in {name}.")


def _same_shape(name: str, a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise DataError(f"{name}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}.")


def mean_flat(x: torch.Tensor, start_dim: int = 0) -> torch.Tensor:
    """Mean over every dimension from `start_dim` on (start_dim=0 gives a scalar)."""
    if start_dim == 0:
        return x.mean()
    return x.mean(dim=tuple(range(start_dim, x.ndim)))


def normal_kl(mean1: torch.Tensor, logvar1: torch.Tensor, mean2: torch.Tensor, logvar2: torch.Tensor) -> torch.Tensor:
    """KL(N(mean1, e^logvar1) || N(mean2, e^logvar2)), elementwise with broadcasting, nats."""
    ref = next(t for t in (mean1, logvar1, mean2, logvar2) if isinstance(t, torch.Tensor))
    logvar1, logvar2 = [x if isinstance(x, torch.Tensor) else torch.tensor(x, dtype=ref.dtype) for x in (logvar1, logvar2)]
    return 0.5 * (-1.0 + logvar2 - logvar1 + torch.exp(logvar1 - logvar2) + (mean1 - mean2) ** 2 * torch.exp(-logvar2))


def _approx_standard_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * (1.0 + torch.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * torch.pow(x, 3))))


def discretized_gaussian_log_likelihood(x: torch.Tensor, means: torch.Tensor, log_scales: torch.Tensor) -> torch.Tensor:
    """Log-likelihood (nats) of 8-bit data rescaled to [-1, 1] under a binned Gaussian.

    Bins are 2/255 wide and values beyond +-0.999 take the open tail, which matches the
    patch_linear codec. tiny_ae latents are continuous and unbounded, so for that codec the
    step-0 term is a binned proxy: in-range values get one bin of mass and everything
    outside [-1, 1] lands in a tail.
    """
    means, log_scales = torch.broadcast_tensors(means, log_scales)
    _same_shape("discretized_gaussian_log_likelihood", x, means)
    centered = x - means
    inv_stdv = torch.exp(-log_scales)
    cdf_plus = _approx_standard_normal_cdf(inv_stdv * (centered + 1.0 / 255.0))
    cdf_min = _approx_standard_normal_cdf(inv_stdv * (centered - 1.0 / 255.0))
    log_cdf_plus = torch.log(cdf_plus.clamp(min=1e-12))
    log_one_minus_cdf_min = torch.log((1.0 - cdf_min).clamp(min=1e-12))
    log_cdf_delta = torch.log((cdf_plus - cdf_min).clamp(min=1e-12))
    return torch.where(x < -0.999, log_cdf_plus, torch.where(x > 0.999, log_one_minus_cdf_min, log_cdf_delta))


# ---------------- Forward process ----------------

def q_sample(s: torch.Tensor, tau: torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """z_tau = sqrt(abar) * s + sqrt(1 - abar) * eps; tau broadcasts over leading dims of s."""
    _same_shape("q_sample", s, eps)
    tau = _check_tau(tau, schedule)
    abar = _extract(schedule.alphas_cumprod, tau, s)
    return torch.sqrt(abar) * s + torch.sqrt(1.0 - abar) * eps


def q_posterior_mean_variance(s: torch.Tensor, z: torch.Tensor, tau: torch.Tensor, schedule: NoiseSchedule
                              ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    _same_shape("q_posterior_mean_variance", s, z)
    mean = _extract(schedule.posterior_mean_coef1, tau, z) * s + _extract(schedule.posterior_mean_coef2, tau, z) * z
    var = _extract(schedule.posterior_variance, tau, z).expand_as(z)
    log_var = _extract(schedule.posterior_log_variance_clipped, tau, z).expand_as(z)
    return mean, var, log_var


def predict_start_from_eps(z: torch.Tensor, tau: torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    abar = _extract(schedule.alphas_cumprod, tau, z)
    return torch.sqrt(1.0 / abar) * z - torch.sqrt(1.0 / abar - 1.0) * eps


def p_mean_variance(eps_hat: torch.Tensor, var_coeff: torch.Tensor, z: torch.Tensor, tau: torch.Tensor,
                    schedule: NoiseSchedule, clip_denoised: Optional[float] = None
                    ) -> Dict[str, torch.Tensor]:
    """Model mean and log variance of p(z_{tau-1} | z_tau) from the epsilon/variance heads."""
    min_log = _extract(schedule.posterior_log_variance_clipped, tau, z)
    max_log = _extract(np.log(schedule.betas), tau, z)
    frac = (var_coeff.clamp(-1.0, 1.0) + 1.0) / 2.0
    log_var = (frac * max_log + (1.0 - frac) * min_log).expand_as(z)
    pred_start = predict_start_from_eps(z, tau, eps_hat, schedule)
    if clip_denoised is not None:
        pred_start = pred_start.clamp(-clip_denoised, clip_denoised)
    mean, _, _ = q_posterior_mean_variance(pred_start, z, tau, schedule)
    return {"mean": mean, "log_variance": log_var, "pred_start": pred_start}


# ---------------- Losses ----------------

def loss_simple(eps_hat: torch.Tensor, eps: torch.Tensor, start_dim: int = 0) -> torch.Tensor:
    _same_shape("loss_simple", eps_hat, eps)
    check_finite("loss_simple inputs", eps_hat, eps)
    return mean_flat((eps_hat - eps) ** 2, start_dim)


def loss_vlb(eps_hat: torch.Tensor, var_coeff: torch.Tensor, z: torch.Tensor, s: torch.Tensor,
             tau: torch.Tensor, schedule: NoiseSchedule, start_dim: int = 0) -> torch.Tensor:
    """Variational term: KL to the true posterior for tau > 0, decoder NLL at tau = 0.

    The predicted mean is detached, so this term only trains the variance head.
    """
    tau = _check_tau(tau, schedule)
    _same_shape("loss_vlb", z, s)
    check_finite("loss_vlb inputs", eps_hat, var_coeff, z, s)
    true_mean, _, true_log_var = q_posterior_mean_variance(s, z, tau, schedule)
    out = p_mean_variance(eps_hat.detach(), var_coeff, z, tau, schedule)
    kl = normal_kl(true_mean, true_log_var, out["mean"], out["log_variance"])
    nll = -discretized_gaussian_log_likelihood(s, out["mean"], 0.5 * out["log_variance"])
    first = tau == 0
    while first.ndim < kl.ndim:
        first = first[..., None]
    return mean_flat(torch.where(first, nll, kl), start_dim)


def total_transition_loss(eps_hat: torch.Tensor, eps: torch.Tensor, var_coeff: torch.Tensor, z: torch.Tensor,
                          s: torch.Tensor, tau: torch.Tensor, schedule: NoiseSchedule, lambda_vlb: float,
                          start_dim: int = 0) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(L_simple + lambda * L_vlb, L_simple, L_vlb) for one transition or a batch of them."""
    if lambda_vlb < 0:
        raise ConfigError("lambda_vlb must be >= 0.", field="diffusion.lambda_vlb")
    simple = loss_simple(eps_hat, eps, start_dim)
    if lambda_vlb == 0:
        vlb = torch.zeros_like(simple)
    else:
        vlb = loss_vlb(eps_hat, var_coeff, z, s, tau, schedule, start_dim)
    return simple + lambda_vlb * vlb, simple, vlb


# ---------------- Reverse process ----------------

def p_sample_step(eps_hat: torch.Tensor, var_coeff: torch.Tensor, z: torch.Tensor, tau: torch.Tensor,
                  schedule: NoiseSchedule, generator: Optional[torch.Generator] = None,
                  clip_denoised: Optional[float] = None) -> torch.Tensor:
    """One reverse step z_tau -> z_{tau-1}; step 0 returns the mean without noise."""
    tau = _check_tau(tau, schedule)
    check_finite("p_sample_step inputs", eps_hat, var_coeff, z)
    out = p_mean_variance(eps_hat, var_coeff, z, tau, schedule, clip_denoised)
    noise = torch.randn(z.shape, generator=generator, dtype=z.dtype, device=z.device)
    nonzero = (tau != 0).to(z.dtype)
    while nonzero.ndim < z.ndim:
        nonzero = nonzero[..., None]
    return out["mean"] + nonzero * torch.exp(0.5 * out["log_variance"]) * noise


def sample_loop(model_fn: ModelFn, shape: Sequence[int], schedule: NoiseSchedule,
                generator: Optional[torch.Generator] = None, dtype: torch.dtype = torch.float32,
                device: Optional[torch.device] = None, clip_denoised: Optional[float] = None,
                progress: bool = False, noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Denoise from pure noise through every step of `schedule`.

    `model_fn(z, tau_model)` receives the model-facing step index (the original training step
    for a respaced schedule) broadcast to shape[:1]; it returns (eps_hat, var_coeff).
    """
    z = noise if noise is not None else torch.randn(tuple(shape), generator=generator, dtype=dtype, device=device)
    for i in tqdm(range(schedule.n_steps - 1, -1, -1), desc="sample", disable=not progress, leave=False):
        tau = torch.full((z.shape[0],), i, dtype=torch.long, device=z.device)
        tau_model = torch.full_like(tau, schedule.timestep_map[i])
        with torch.no_grad():
            eps_hat, var_coeff = model_fn(z, tau_model)
        z = p_sample_step(eps_hat, var_coeff, z, tau, schedule, generator, clip_denoised)
    return z
