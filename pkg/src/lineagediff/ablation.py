"""Patch-size and block-wiring sweep on the toy motif corpus.

Every setting trains a small model from the same seed on the same corpus and
reports one row of metrics. Rows contain no timing information other than
``wall_ms`` so that reruns can be compared field by field.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import torch

from .codec import decode_lenient, encode_batch
from .denoiser import METHODS, DenoiserConfig
from .diffusion import DTYPE, GuidanceConfig, build_schedule, sample_loop
from .evaluate import frequency_kl, validity_rate
from .toy import ToyCorpus, make_corpus, motif_rate
from .training import TrainConfig, fit, new_state, training_losses

PATCH_SIZES = (4, 8, 16, 32, 64)
METHOD_PATCH = 16


@dataclass(frozen=True)
class Setting:
    sweep: str  # "patch" or "method"
    patch: int
    method: str


def default_settings() -> list[Setting]:
    return ([Setting("patch", p, "A") for p in PATCH_SIZES]
            + [Setting("method", METHOD_PATCH, m) for m in METHODS])


@dataclass(frozen=True)
class AblationConfig:
    L: int = 64
    width: int = 32
    heads: int = 2
    blocks: int = 2
    T: int = 50
    steps: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    ema_decay: float = 0.99
    samples: int = 16
    seed: int = 0


def _held_out_mse(model, x0, y, sched, seed: int) -> float:
    g = torch.Generator().manual_seed(seed)
    t = torch.randint(1, sched.T + 1, (len(x0),), generator=g)
    eps = torch.randn(x0.shape, generator=g, dtype=DTYPE)
    with torch.no_grad():
        return training_losses(model, x0, t, eps, y, sched, 0.0)["mse"].item()


def run_setting(setting: Setting, corpus: ToyCorpus, cfg: AblationConfig) -> dict:
    start = time.perf_counter()
    mc = DenoiserConfig(L=cfg.L, D_in=22, width=cfg.width, heads=cfg.heads, patch=setting.patch,
                        blocks=cfg.blocks, method=setting.method,
                        num_classes=corpus.num_classes, T=cfg.T)
    tc = TrainConfig(learning_rate=cfg.learning_rate, batch_size=cfg.batch_size,
                     ema_decay=cfg.ema_decay, seed=cfg.seed)
    sched = build_schedule(cfg.T)
    x0 = torch.from_numpy(encode_batch(corpus.sequences, cfg.L))
    y = torch.tensor(corpus.labels)

    metrics = {}

    def keep(state, m):
        metrics.update(m)

    state = fit(new_state(mc, tc), x0, y, sched, tc, cfg.steps, keep)
    ema = state.ema_model()
    probe = slice(0, min(256, len(x0)))
    held_out = _held_out_mse(ema, x0[probe], y[probe], sched, cfg.seed + 1)

    g = torch.Generator().manual_seed(cfg.seed + 2)
    xs = sample_loop(ema, sched, GuidanceConfig(1.5, mc.null_label), 0, g, cfg.samples)
    seqs = [decode_lenient(x) for x in xs]
    return {
        "sweep": setting.sweep,
        "patch": setting.patch,
        "method": setting.method,
        "params": sum(p.numel() for p in ema.parameters()),
        "steps": cfg.steps,
        "train_mse": metrics.get("mse"),
        "train_vlb": metrics.get("vlb"),
        "held_out_mse": held_out,
        "validity": validity_rate(seqs),
        "class0_motif_rate": motif_rate(seqs, corpus.motifs[0]),
        "residue_kl": frequency_kl([s for s in seqs if s], corpus.sequences),
        "wall_ms": round(1000 * (time.perf_counter() - start)),
    }


def run_ablation(cfg: AblationConfig = AblationConfig(), settings=None, corpus: ToyCorpus | None = None,
                 on_row=None) -> list[dict]:
    corpus = corpus or make_corpus(seed=cfg.seed)
    rows = []
    for setting in settings or default_settings():
        row = run_setting(setting, corpus, cfg)
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows
