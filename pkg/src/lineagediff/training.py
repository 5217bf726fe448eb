"""Optimization loop: label dropout, hybrid loss, AdamW, and weight EMA."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .denoiser import Denoiser, DenoiserConfig
from .diffusion import (
    DTYPE,
    NoiseSchedule,
    loss_mse,
    loss_vlb,
    p_mean_variance,
    q_sample,
)
from .errors import EmptyBatch, NonFiniteLoss, ShapeMismatch


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 512
    ema_decay: float = 0.9999
    label_dropout_p: float = 0.1
    steps: int = 0
    seed: int = 0
    lambda_vlb: float = 1e-3
    grad_clip: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.label_dropout_p <= 1.0:
            raise ValueError(f"label_dropout_p must be in [0, 1], got {self.label_dropout_p}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must be in [0, 1), got {self.ema_decay}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainingState:
    model: Denoiser
    ema: dict[str, torch.Tensor]
    exp_avg: dict[str, torch.Tensor]
    exp_avg_sq: dict[str, torch.Tensor]
    generator: torch.Generator
    step: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def create(cls, model: Denoiser, seed: int = 0) -> "TrainingState":
        params = dict(model.named_parameters())
        return cls(
            model=model,
            ema={n: p.detach().clone() for n, p in params.items()},
            exp_avg={n: torch.zeros_like(p) for n, p in params.items()},
            exp_avg_sq={n: torch.zeros_like(p) for n, p in params.items()},
            generator=torch.Generator().manual_seed(seed),
        )

    def ema_model(self) -> Denoiser:
        """A copy of the model carrying the EMA weights (used for sampling)."""
        m = copy.deepcopy(self.model)
        with torch.no_grad():
            for n, p in m.named_parameters():
                p.copy_(self.ema[n])
        m.eval()
        return m


def dropout_labels(labels: torch.Tensor, p: float, null_label: int,
                   generator: torch.Generator) -> torch.Tensor:
    """Replace each label by ``null_label`` independently with probability ``p``.

    Always consumes one uniform draw per label so the generator advances the
    same way whatever ``p`` is.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability must be in [0, 1], got {p}")
    labels = torch.as_tensor(labels, dtype=torch.long)
    u = torch.rand(labels.shape, generator=generator, dtype=DTYPE)
    return torch.where(u < p, torch.full_like(labels, null_label), labels)


def training_losses(model, x0, t, eps, y, sched: NoiseSchedule, lambda_vlb: float,
                    detach_mean: bool = True) -> dict[str, torch.Tensor]:
    """MSE on predicted noise plus the weighted variational term.

    With ``detach_mean`` the variational term sees the noise prediction as a
    constant, so it only trains the variance channel.
    """
    x_t = q_sample(x0, t, eps, sched)
    eps_pred, v_raw = model(x_t, t, y)
    mse = loss_mse(eps_pred, eps)
    mean_source = eps_pred.detach() if detach_mean else eps_pred
    reverse = p_mean_variance(mean_source, v_raw, x_t, t, sched)
    vlb = loss_vlb(x0, x_t, t, reverse, sched).mean()
    return {"mse": mse, "vlb": vlb, "total": mse + lambda_vlb * vlb}


def ema_update(ema: dict[str, torch.Tensor], params: dict[str, torch.Tensor], decay: float
               ) -> dict[str, torch.Tensor]:
    """``ema' = decay * ema + (1 - decay) * params`` for every entry, in place."""
    if ema.keys() != params.keys():
        raise ShapeMismatch("EMA and parameter sets differ")
    with torch.no_grad():
        for n, e in ema.items():
            p = params[n].detach()
            if e.shape != p.shape:
                raise ShapeMismatch(f"{n}: EMA {tuple(e.shape)} vs param {tuple(p.shape)}")
            e.lerp_(p, 1.0 - decay)
    return ema


def adamw_update(state: TrainingState, grads: dict[str, torch.Tensor], cfg: TrainConfig):
    b1, b2 = cfg.betas
    step = state.step + 1
    bc1 = 1.0 - b1 ** step
    bc2 = 1.0 - b2 ** step
    lr = cfg.learning_rate
    with torch.no_grad():
        for n, p in state.model.named_parameters():
            g = grads[n]
            m = state.exp_avg[n].mul_(b1).add_(g, alpha=1.0 - b1)
            v = state.exp_avg_sq[n].mul_(b2).addcmul_(g, g, value=1.0 - b2)
            if cfg.weight_decay:
                p.mul_(1.0 - lr * cfg.weight_decay)
            denom = (v / bc2).sqrt_().add_(cfg.adam_eps)
            p.addcdiv_(m, denom, value=-lr / bc1)


def clip_gradients(grads: dict[str, torch.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        for g in grads.values():
            g.mul_(max_norm / (total + 1e-12))
    return total


def train_step(batch, state: TrainingState, sched: NoiseSchedule, cfg: TrainConfig
               ) -> tuple[TrainingState, dict[str, float]]:
    """One optimization step on ``batch = (x0, labels)``.

    Draws a uniform timestep and Gaussian noise per example, applies label
    dropout, updates weights with AdamW and then the EMA.
    """
    x0, labels = batch
    x0 = torch.as_tensor(x0, dtype=DTYPE)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if x0.ndim != 3 or x0.shape[0] == 0:
        raise EmptyBatch("batch must be a non-empty B x L x D tensor")
    if labels.shape != (x0.shape[0],):
        raise ShapeMismatch(f"{x0.shape[0]} examples but labels of shape {tuple(labels.shape)}")
    model = state.model
    g = state.generator
    B = x0.shape[0]
    t = torch.randint(1, sched.T + 1, (B,), generator=g)
    eps = torch.randn(x0.shape, generator=g, dtype=DTYPE)
    y = dropout_labels(labels, cfg.label_dropout_p, model.config.null_label, g)

    model.train()
    losses = training_losses(model, x0, t, eps, y, sched, cfg.lambda_vlb)
    for name in ("mse", "vlb", "total"):
        value = losses[name].item()
        if not math.isfinite(value):
            raise NonFiniteLoss(state.step + 1, name, value)
    names, params = zip(*model.named_parameters())
    grads = dict(zip(names, torch.autograd.grad(losses["total"], params)))
    if cfg.grad_clip:
        clip_gradients(grads, cfg.grad_clip)
    adamw_update(state, grads, cfg)
    ema_update(state.ema, dict(model.named_parameters()), cfg.ema_decay)
    state.step += 1
    return state, {k: v.item() for k, v in losses.items()}


class EpochBatcher:
    """Deterministic minibatches: a fresh seeded permutation per epoch.

    The position in the stream is a pure function of the global step, so a
    resumed run continues with exactly the batches it would have seen.
    """

    def __init__(self, n: int, batch_size: int, seed: int):
        if n == 0:
            raise EmptyBatch("dataset is empty")
        self.n = n
        self.batch_size = batch_size
        self.seed = seed
        self._perm_cache: dict[int, np.ndarray] = {}

    def _perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._perm_cache:
            self._perm_cache = {epoch: np.random.default_rng([self.seed, epoch]).permutation(self.n)}
        return self._perm_cache[epoch]

    def indices(self, step: int) -> np.ndarray:
        start = step * self.batch_size
        out = []
        while len(out) < self.batch_size:
            epoch, offset = divmod(start, self.n)
            take = min(self.batch_size - len(out), self.n - offset)
            out.extend(self._perm(epoch)[offset:offset + take].tolist())
            start += take
        return np.asarray(out)


def fit(state: TrainingState, data: torch.Tensor, labels: torch.Tensor, sched: NoiseSchedule,
        cfg: TrainConfig, steps: int, callback=None) -> TrainingState:
    """Run ``steps`` train steps starting from ``state.step``."""
    data = torch.as_tensor(data, dtype=DTYPE)
    labels = torch.as_tensor(labels, dtype=torch.long)
    batcher = EpochBatcher(len(data), cfg.batch_size, cfg.seed)
    for _ in range(steps):
        idx = torch.from_numpy(batcher.indices(state.step))
        state, metrics = train_step((data[idx], labels[idx]), state, sched, cfg)
        if callback is not None:
            callback(state, metrics)
    return state


def new_state(model_cfg: DenoiserConfig, train_cfg: TrainConfig) -> TrainingState:
    model = Denoiser(model_cfg, seed=train_cfg.seed)
    return TrainingState.create(model, seed=train_cfg.seed)
