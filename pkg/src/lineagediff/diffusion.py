"""Gaussian diffusion over continuous sequence matrices.

All tensors are float64. Timesteps are 1-based (``1 <= t <= T``); array
storage is 0-based, so ``beta[t - 1]`` is the variance added at step ``t``.
Functions accept either a single ``L x D`` matrix with an integer ``t`` or a
batch ``B x L x D`` with a length-``B`` integer tensor of timesteps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import torch

from .errors import (
    InvalidLabel,
    InvalidScheduleParams,
    NonPositiveVariance,
    ShapeMismatch,
    TimestepOutOfRange,
    UntrainedModel,
)

DTYPE = torch.float64
SCHEDULE_KINDS = ("linear", "cosine")
COSINE_OFFSET = 0.008
MAX_BETA = 0.999


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    kind: str
    beta_start: float
    beta_end: float
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)
    alpha_bar_prev: np.ndarray = field(init=False)
    posterior_variance: np.ndarray = field(init=False)
    # log(beta~_t) with t=1 borrowed from t=2 (beta~_1 = 0); endpoint of the
    # learned-variance interpolation.
    posterior_log_variance_clipped: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        alphas = 1.0 - betas
        alpha_bar = np.cumprod(alphas)
        alpha_bar_prev = np.append(1.0, alpha_bar[:-1])
        post_var = betas * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
        if len(betas) > 1:
            clipped = np.log(np.append(post_var[1], post_var[1:]))
        else:
            clipped = np.log(betas.copy())
        for name, value in [("betas", betas), ("alphas", alphas), ("alpha_bar", alpha_bar),
                            ("alpha_bar_prev", alpha_bar_prev),
                            ("posterior_variance", post_var),
                            ("posterior_log_variance_clipped", clipped)]:
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "_torch", {})

    @property
    def T(self) -> int:
        return len(self.betas)

    def to_dict(self) -> dict:
        d = {"T": self.T, "kind": self.kind, "beta_start": self.beta_start,
             "beta_end": self.beta_end}
        return d

    def check_t(self, t):
        ts = torch.as_tensor(t)
        if ts.numel() and (int(ts.min()) < 1 or int(ts.max()) > self.T):
            raise TimestepOutOfRange(f"timestep(s) {ts.tolist()} outside [1, {self.T}]")

    def coef(self, name: str, t, like: torch.Tensor) -> torch.Tensor:
        """Look up ``name`` at timestep(s) ``t`` shaped to broadcast against ``like``."""
        self.check_t(t)
        arr = self._torch.get(name)
        if arr is None:
            arr = self._torch[name] = torch.tensor(getattr(self, name), dtype=DTYPE)
        if isinstance(t, int) or (torch.is_tensor(t) and t.ndim == 0):
            return arr[int(t) - 1]
        vals = arr[torch.as_tensor(t, dtype=torch.long) - 1]
        return vals.reshape(vals.shape + (1,) * (like.ndim - vals.ndim))


def default_betas(T: int) -> tuple[float, float]:
    """Linear endpoints scaled by 1000/T so that T=1000 gives 1e-4 -> 0.02."""
    scale = 1000.0 / T
    return min(1e-4 * scale, MAX_BETA), min(0.02 * scale, MAX_BETA)


def build_schedule(T: int = 1000, kind: str = "linear", beta_start: float | None = None,
                   beta_end: float | None = None) -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise InvalidScheduleParams(f"T must be a positive integer, got {T!r}")
    if kind not in SCHEDULE_KINDS:
        raise InvalidScheduleParams(f"unknown schedule kind {kind!r}")
    if kind == "linear":
        d_start, d_end = default_betas(T)
        beta_start = d_start if beta_start is None else float(beta_start)
        beta_end = d_end if beta_end is None else float(beta_end)
        if not 0.0 < beta_start <= beta_end < 1.0:
            raise InvalidScheduleParams(
                f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
        if T == 1:
            betas = np.array([beta_end])
        else:
            betas = beta_start + (beta_end - beta_start) * np.arange(T) / (T - 1)
    else:
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2
        betas = np.minimum(1.0 - f[1:] / f[:-1], MAX_BETA)
        beta_start, beta_end = float(betas[0]), float(betas[-1])
    sched = NoiseSchedule(kind, float(beta_start), float(beta_end), betas)
    if not (np.all(sched.betas > 0) and np.all(sched.betas < 1)):
        raise InvalidScheduleParams("betas must lie strictly inside (0, 1)")
    if sched.alpha_bar[-1] >= 0.01:
        raise InvalidScheduleParams(
            f"alpha_bar[T] = {sched.alpha_bar[-1]:.4g} >= 0.01; the chain does not reach "
            "noise (raise beta_end or T)")
    return sched


def schedule_from_dict(d: dict) -> NoiseSchedule:
    return build_schedule(int(d["T"]), d["kind"], d.get("beta_start"), d.get("beta_end"))


class ReverseParams(NamedTuple):
    mean: torch.Tensor
    variance: torch.Tensor

    @property
    def log_variance(self) -> torch.Tensor:
        return torch.log(self.variance)


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    if x0.shape != eps.shape:
        raise ShapeMismatch(f"x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    return (sched.coef("alpha_bar", t, x0).sqrt() * x0
            + (1.0 - sched.coef("alpha_bar", t, x0)).sqrt() * eps)


def posterior_mean_variance(x0: torch.Tensor, x_t: torch.Tensor, t,
                            sched: NoiseSchedule) -> ReverseParams:
    """Mean and variance of q(x_{t-1} | x_t, x0)."""
    if x0.shape != x_t.shape:
        raise ShapeMismatch(f"x0 {tuple(x0.shape)} vs x_t {tuple(x_t.shape)}")
    ab = sched.coef("alpha_bar", t, x0)
    ab_prev = sched.coef("alpha_bar_prev", t, x0)
    beta = sched.coef("betas", t, x0)
    alpha = sched.coef("alphas", t, x0)
    c0 = ab_prev.sqrt() * beta / (1.0 - ab)
    ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab)
    mean = c0 * x0 + ct * x_t
    var = sched.coef("posterior_variance", t, x0) * torch.ones_like(x0)
    return ReverseParams(mean, var)


def interpolation_weight(v_raw: torch.Tensor) -> torch.Tensor:
    """Map the raw variance channel to [0, 1]: v = clip((v_raw + 1) / 2)."""
    return ((v_raw + 1.0) / 2.0).clamp(0.0, 1.0)


def p_mean_variance(eps_pred: torch.Tensor, v_raw: torch.Tensor, x_t: torch.Tensor, t,
                    sched: NoiseSchedule) -> ReverseParams:
    """Reverse-step Gaussian from predicted noise and the variance channel."""
    if not (eps_pred.shape == v_raw.shape == x_t.shape):
        raise ShapeMismatch(
            f"eps {tuple(eps_pred.shape)}, v {tuple(v_raw.shape)}, x_t {tuple(x_t.shape)}")
    alpha = sched.coef("alphas", t, x_t)
    beta = sched.coef("betas", t, x_t)
    ab = sched.coef("alpha_bar", t, x_t)
    mean = (x_t - beta / (1.0 - ab).sqrt() * eps_pred) / alpha.sqrt()
    v = interpolation_weight(v_raw)
    log_var = v * torch.log(beta) + (1.0 - v) * sched.coef("posterior_log_variance_clipped", t, x_t)
    return ReverseParams(mean, torch.exp(log_var))


def guided_epsilon(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, s: float) -> torch.Tensor:
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeMismatch(f"{tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}")
    if s == 1:
        return eps_cond
    return eps_uncond + s * (eps_cond - eps_uncond)


def _kl_terms(mean1, var1, mean2, var2):
    return 0.5 * (torch.log(var2) - torch.log(var1) + (var1 + (mean1 - mean2) ** 2) / var2 - 1.0)


def _sum_entries(x: torch.Tensor, batched: bool) -> torch.Tensor:
    return x.flatten(1).sum(1) if batched else x.sum()


def kl_gaussian_diag(mean1, var1, mean2, var2, batched: bool = False) -> torch.Tensor:
    """KL(N(mean1, var1) || N(mean2, var2)) summed over entries, in nats."""
    mean1, var1, mean2, var2 = (torch.as_tensor(a, dtype=DTYPE) for a in (mean1, var1, mean2, var2))
    if (var1 <= 0).any() or (var2 <= 0).any():
        raise NonPositiveVariance("Gaussian variances must be strictly positive")
    return _sum_entries(_kl_terms(mean1, var1, mean2, var2), batched)


def gaussian_nll(x: torch.Tensor, mean: torch.Tensor, var: torch.Tensor,
                 batched: bool = False) -> torch.Tensor:
    nll = 0.5 * (math.log(2 * math.pi) + torch.log(var) + (x - mean) ** 2 / var)
    return _sum_entries(nll, batched)


def loss_mse(eps_pred: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    if eps_pred.shape != eps.shape:
        raise ShapeMismatch(f"{tuple(eps_pred.shape)} vs {tuple(eps.shape)}")
    return ((eps_pred - eps) ** 2).mean()


def loss_vlb(x0: torch.Tensor, x_t: torch.Tensor, t, reverse: ReverseParams,
             sched: NoiseSchedule) -> torch.Tensor:
    """Per-example variational bound term in nats.

    KL between the true posterior and the model's reverse step for ``t > 1``;
    Gaussian NLL of ``x0`` under the reverse step for ``t == 1``. Returns a
    scalar for unbatched input, otherwise one value per example.
    """
    sched.check_t(t)
    batched = not (isinstance(t, int) or (torch.is_tensor(t) and t.ndim == 0))
    true = posterior_mean_variance(x0, x_t, t, sched)
    first = torch.as_tensor(t) == 1
    # posterior variance is 0 at t=1; substitute 1 to keep the unused KL branch finite
    true_var = torch.where(first.reshape(first.shape + (1,) * (x0.ndim - first.ndim)),
                           torch.ones_like(true.variance), true.variance)
    kl = _sum_entries(_kl_terms(true.mean, true_var, reverse.mean, reverse.variance), batched)
    nll = gaussian_nll(x0, reverse.mean, reverse.variance, batched)
    return torch.where(first, nll, kl)


# --- sampling ----------------------------------------------------------------

@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 1.5
    null_label: int = 0
    force_two_pass: bool = False


Denoise = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], tuple[torch.Tensor, torch.Tensor]]


def _denoise_fn(model) -> Denoise:
    if callable(getattr(model, "denoise", None)):
        return model.denoise
    if callable(model):
        return model
    raise UntrainedModel(f"{type(model).__name__} has no parameters to sample with")


def sample_loop(model, sched: NoiseSchedule, guidance: GuidanceConfig, y, generator: torch.Generator,
                count: int, shape: tuple[int, int] | None = None,
                num_classes: int | None = None) -> torch.Tensor:
    """Ancestral sampling from pure noise down to x_0.

    ``model`` maps ``(x_t, t, y)`` batches to ``(eps_pred, v_raw)``; a
    :class:`~lineagediff.denoiser.Denoiser` works directly. ``y`` is a class id
    or ``guidance.null_label`` for unconditional sampling. The last step
    returns the mean without added noise.
    """
    fn = _denoise_fn(model)
    if shape is None:
        cfg = getattr(model, "config", None)
        if cfg is None:
            raise UntrainedModel("sample shape unknown; pass shape=(L, D)")
        shape = (cfg.L, cfg.D_in)
    if num_classes is None:
        num_classes = getattr(getattr(model, "config", None), "num_classes", None)
    if num_classes is not None and not 0 <= int(y) <= num_classes:
        raise InvalidLabel(f"label {y} outside [0, {num_classes}]")

    s = guidance.scale
    two_pass = s != 1 or guidance.force_two_pass
    labels = torch.full((count,), int(y), dtype=torch.long)
    nulls = torch.full((count,), guidance.null_label, dtype=torch.long)
    x = torch.randn((count,) + tuple(shape), generator=generator, dtype=DTYPE)
    with torch.no_grad():
        for t in range(sched.T, 0, -1):
            ts = torch.full((count,), t, dtype=torch.long)
            if two_pass:
                eps_both, v_both = fn(torch.cat([x, x]), torch.cat([ts, ts]),
                                      torch.cat([labels, nulls]))
                eps_c, eps_u = eps_both[:count], eps_both[count:]
                v_raw = v_both[:count]
                eps = eps_u + s * (eps_c - eps_u)
            else:
                eps, v_raw = fn(x, ts, labels)
            rev = p_mean_variance(eps, v_raw, x, ts, sched)
            if t > 1:
                z = torch.randn(x.shape, generator=generator, dtype=DTYPE)
                x = rev.mean + rev.variance.sqrt() * z
            else:
                x = rev.mean
    return x
