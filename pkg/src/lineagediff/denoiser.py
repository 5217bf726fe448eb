"""Patchify-attention denoising transformer.

Sequence tokens get a fixed sin-cos position table; the timestep and label
embeddings are prepended as two extra tokens, run through ``N`` patchify
blocks, and removed before the output head. Every block is conditioned by
adaLN modulation regressed from ``timestep_embedding + label_embedding``.

Block wirings (``method``):

* ``A`` global and local attention on the same normalized input, concatenated
  and fused by a pointwise feedforward
* ``B`` global, then local, then feedforward
* ``C`` local, then global, then feedforward
* ``D`` global then feedforward
* ``E`` local then feedforward
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import (
    GraphNotRecorded,
    LabelOutOfRange,
    PatchSizeMismatch,
    ShapeMismatch,
    TimestepOutOfRange,
    UnknownMethod,
)

DTYPE = torch.float64
METHODS = ("A", "B", "C", "D", "E")
SUBLAYERS = {
    "A": ("parallel",),
    "B": ("global", "local", "ff"),
    "C": ("local", "global", "ff"),
    "D": ("global", "ff"),
    "E": ("local", "ff"),
}
NUM_COND_TOKENS = 2
MAX_PERIOD = 10000.0


@dataclass(frozen=True)
class DenoiserConfig:
    L: int = 256
    D_in: int = 22
    width: int = 384
    heads: int = 6
    patch: int = 16
    blocks: int = 12
    method: str = "A"
    num_classes: int = 1
    T: int = 1000
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.method not in METHODS:
            raise UnknownMethod(f"method must be one of {METHODS}, got {self.method!r}")
        if self.patch < 1 or self.L % self.patch:
            raise PatchSizeMismatch(f"L={self.L} is not divisible by patch size {self.patch}")
        if self.width % self.heads:
            raise ShapeMismatch(f"width {self.width} not divisible by heads {self.heads}")
        if self.num_classes < 0 or self.T < 1 or self.blocks < 0:
            raise ValueError(f"invalid config {self}")

    @property
    def null_label(self) -> int:
        return self.num_classes

    @property
    def num_patches(self) -> int:
        return self.L // self.patch

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**d)


TINY_CONFIG = dict(L=16, D_in=6, width=16, heads=2, patch=4, blocks=2, num_classes=3, T=10)


class DenoiserOutput(NamedTuple):
    eps_pred: torch.Tensor
    v_raw: torch.Tensor


# --- functional pieces --------------------------------------------------------

def timestep_features(t, dim: int) -> torch.Tensor:
    """Sinusoidal features ``[cos(t w_k), sin(t w_k)]``; an odd ``dim`` gets a zero last channel."""
    t = torch.as_tensor(t, dtype=DTYPE)
    half = dim // 2
    freqs = torch.exp(-math.log(MAX_PERIOD) * torch.arange(half, dtype=DTYPE) / half)
    args = t[..., None] * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb


def position_embed(L: int, W: int) -> torch.Tensor:
    """Fixed table with ``row[p, 2i] = sin(p w_i)`` and ``row[p, 2i+1] = cos(p w_i)``."""
    pos = torch.arange(L, dtype=DTYPE)[:, None]
    i = torch.arange((W + 1) // 2, dtype=DTYPE)
    angles = pos / MAX_PERIOD ** (2 * i / W)
    table = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1).reshape(L, -1)
    return table[:, :W].contiguous()


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)


def global_attention(x: torch.Tensor, wq, wk, wv, wo, heads: int,
                     return_weights: bool = False):
    """Multi-head scaled dot-product attention over all tokens of ``x`` (``... x S x W``).

    Projections are ``x @ w``; head ``i`` uses columns ``i*d_k:(i+1)*d_k``.
    """
    W = x.shape[-1]
    if W % heads:
        raise ShapeMismatch(f"width {W} not divisible by {heads} heads")
    for name, w in (("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)):
        if w.shape[-2] != W:
            raise ShapeMismatch(f"{name} expects {w.shape[-2]} input channels, x has {W}")
    dk = W // heads

    def split(m):
        return m.unflatten(-1, (heads, dk)).transpose(-2, -3)

    q, k, v = split(x @ wq), split(x @ wk), split(x @ wv)
    att = attention_weights(q, k)
    out = (att @ v).transpose(-2, -3).flatten(-2) @ wo
    return (out, att) if return_weights else out


def local_attention(x: torch.Tensor, wq, wk, wv, patch: int, return_weights: bool = False):
    """Attention confined to contiguous patches of ``patch`` tokens.

    ``wq``/``wk``/``wv`` have shape ``n_patches x W x W``: patch ``j`` has its
    own projections. Outputs are concatenated back in token order.
    """
    S, W = x.shape[-2], x.shape[-1]
    if patch < 1 or S % patch:
        raise PatchSizeMismatch(f"{S} tokens cannot be split into patches of {patch}")
    n = S // patch
    if wq.shape[0] != n:
        raise ShapeMismatch(f"got {wq.shape[0]} patch weight sets for {n} patches")
    xp = x.unflatten(-2, (n, patch))
    q = torch.einsum("...npw,nwv->...npv", xp, wq)
    k = torch.einsum("...npw,nwv->...npv", xp, wk)
    v = torch.einsum("...npw,nwv->...npv", xp, wv)
    att = attention_weights(q, k)
    out = (att @ v).flatten(-3, -2)
    return (out, att) if return_weights else out


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(-2)) + shift.unsqueeze(-2)


def layer_norm(x: torch.Tensor) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:], eps=1e-6)


# --- modules ----------------------------------------------------------------------

class GlobalAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.wq = nn.Parameter(torch.empty(width, width, dtype=DTYPE))
        self.wk = nn.Parameter(torch.empty(width, width, dtype=DTYPE))
        self.wv = nn.Parameter(torch.empty(width, width, dtype=DTYPE))
        self.wo = nn.Parameter(torch.empty(width, width, dtype=DTYPE))

    def forward(self, x):
        return global_attention(x, self.wq, self.wk, self.wv, self.wo, self.heads)


class LocalAttention(nn.Module):
    """Per-patch attention; the conditional tokens form one extra leading patch."""

    def __init__(self, width: int, patch: int, num_patches: int):
        super().__init__()
        self.patch = patch
        n = num_patches + 1
        self.wq = nn.Parameter(torch.empty(n, width, width, dtype=DTYPE))
        self.wk = nn.Parameter(torch.empty(n, width, width, dtype=DTYPE))
        self.wv = nn.Parameter(torch.empty(n, width, width, dtype=DTYPE))

    def forward(self, x):
        c = NUM_COND_TOKENS
        cond = local_attention(x[..., :c, :], self.wq[:1], self.wk[:1], self.wv[:1], c)
        seq = local_attention(x[..., c:, :], self.wq[1:], self.wk[1:], self.wv[1:], self.patch)
        return torch.cat([cond, seq], dim=-2)


def _mlp(d_in: int, hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, hidden, dtype=DTYPE), nn.GELU(),
                         nn.Linear(hidden, d_out, dtype=DTYPE))


class PatchifyBlock(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        W = cfg.width
        self.method = cfg.method
        self.sublayers = SUBLAYERS[cfg.method]
        uses = set(self.sublayers)
        if uses & {"parallel", "global"}:
            self.global_attn = GlobalAttention(W, cfg.heads)
        if uses & {"parallel", "local"}:
            self.local_attn = LocalAttention(W, cfg.patch, cfg.num_patches)
        if "parallel" in uses:
            self.fuse = _mlp(2 * W, W, W)
        else:
            self.ff = _mlp(W, cfg.mlp_ratio * W, W)
        # (shift, scale, gate) per sub-layer
        self.adaLN = nn.Sequential(nn.SiLU(), nn.Linear(W, 3 * W * len(self.sublayers), dtype=DTYPE))

    def _sublayer(self, kind: str, h):
        if kind == "parallel":
            return self.fuse(torch.cat([self.global_attn(h), self.local_attn(h)], dim=-1))
        if kind == "global":
            return self.global_attn(h)
        if kind == "local":
            return self.local_attn(h)
        return self.ff(h)

    def forward(self, x, cond):
        mods = self.adaLN(cond).chunk(3 * len(self.sublayers), dim=-1)
        for i, kind in enumerate(self.sublayers):
            shift, scale, gate = mods[3 * i:3 * i + 3]
            h = modulate(layer_norm(x), shift, scale)
            x = x + gate.unsqueeze(-2) * self._sublayer(kind, h)
        return x


class TimestepEmbedder(nn.Module):
    def __init__(self, width: int, T: int):
        super().__init__()
        self.width = width
        self.T = T
        self.mlp = nn.Sequential(nn.Linear(width, width, dtype=DTYPE), nn.SiLU(),
                                 nn.Linear(width, width, dtype=DTYPE))

    def forward(self, t):
        t = torch.as_tensor(t)
        if t.numel() and (int(t.min()) < 1 or int(t.max()) > self.T):
            raise TimestepOutOfRange(f"timestep(s) outside [1, {self.T}]")
        return self.mlp(timestep_features(t, self.width))


class LabelEmbedder(nn.Module):
    """Lookup table with ``num_classes + 1`` rows; the last row is the null label."""

    def __init__(self, num_classes: int, width: int):
        super().__init__()
        self.num_classes = num_classes
        self.table = nn.Embedding(num_classes + 1, width, dtype=DTYPE)

    def forward(self, y):
        y = torch.as_tensor(y, dtype=torch.long)
        if y.numel() and (int(y.min()) < 0 or int(y.max()) > self.num_classes):
            raise LabelOutOfRange(f"label(s) outside [0, {self.num_classes}]")
        return self.table(y)


class FinalLayer(nn.Module):
    def __init__(self, width: int, d_out: int):
        super().__init__()
        self.adaLN = nn.Sequential(nn.SiLU(), nn.Linear(width, 2 * width, dtype=DTYPE))
        self.linear = nn.Linear(width, d_out, dtype=DTYPE)

    def forward(self, x, cond):
        shift, scale = self.adaLN(cond).chunk(2, dim=-1)
        return self.linear(modulate(layer_norm(x), shift, scale))


class Denoiser(nn.Module):
    def __init__(self, config: DenoiserConfig, seed: int = 0):
        super().__init__()
        self.config = cfg = config
        self.input_proj = nn.Linear(cfg.D_in, cfg.width, dtype=DTYPE)
        self.register_buffer("pos_embed", position_embed(cfg.L, cfg.width), persistent=False)
        self.t_embedder = TimestepEmbedder(cfg.width, cfg.T)
        self.y_embedder = LabelEmbedder(cfg.num_classes, cfg.width)
        self.blocks = nn.ModuleList(PatchifyBlock(cfg) for _ in range(cfg.blocks))
        self.final = FinalLayer(cfg.width, 2 * cfg.D_in)
        self.initialize(seed)

    @torch.no_grad()
    def initialize(self, seed: int = 0):
        """Fan-in uniform weights, N(0, 0.02) label table, zeros for every adaLN map and the head."""
        g = torch.Generator().manual_seed(seed)
        for module in self.modules():
            if isinstance(module, nn.Linear):
                bound = 1.0 / math.sqrt(module.in_features)
                module.weight.uniform_(-bound, bound, generator=g)
                module.bias.uniform_(-bound, bound, generator=g)
            elif isinstance(module, (GlobalAttention, LocalAttention)):
                for p in module.parameters(recurse=False):
                    bound = 1.0 / math.sqrt(p.shape[-2])
                    p.uniform_(-bound, bound, generator=g)
            elif isinstance(module, nn.Embedding):
                module.weight.normal_(0.0, 0.02, generator=g)
        for block in self.blocks:
            nn.init.zeros_(block.adaLN[-1].weight)
            nn.init.zeros_(block.adaLN[-1].bias)
        for p in self.final.parameters():
            nn.init.zeros_(p)
        return self

    def conditioning(self, t, y):
        te = self.t_embedder(t)
        ye = self.y_embedder(y)
        return te, ye

    def forward(self, x_t: torch.Tensor, t, y) -> DenoiserOutput:
        cfg = self.config
        single = x_t.ndim == 2
        if single:
            x_t = x_t.unsqueeze(0)
        if x_t.shape[-2:] != (cfg.L, cfg.D_in):
            raise ShapeMismatch(f"expected (..., {cfg.L}, {cfg.D_in}), got {tuple(x_t.shape)}")
        B = x_t.shape[0]
        t = torch.as_tensor(t, dtype=torch.long).expand(B)
        y = torch.as_tensor(y, dtype=torch.long).expand(B)
        te, ye = self.conditioning(t, y)
        h = self.input_proj(x_t) + self.pos_embed
        tokens = torch.cat([te.unsqueeze(-2), ye.unsqueeze(-2), h], dim=-2)
        cond = te + ye
        for block in self.blocks:
            tokens = block(tokens, cond)
        out = self.final(tokens[..., NUM_COND_TOKENS:, :], cond)
        eps, v = out[..., :cfg.D_in], out[..., cfg.D_in:]
        if single:
            eps, v = eps[0], v[0]
        return DenoiserOutput(eps, v)

    def denoise(self, x_t, t, y):
        return tuple(self(x_t, t, y))

    def block_stack(self, tokens, cond):
        """Run only the patchify blocks (used to check the adaLN-zero identity)."""
        for block in self.blocks:
            tokens = block(tokens, cond)
        return tokens


def parameter_gradients(model: nn.Module, loss: torch.Tensor, create_graph: bool = False
                        ) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar ``loss`` for every named parameter."""
    if not torch.is_tensor(loss) or loss.grad_fn is None:
        raise GraphNotRecorded("loss carries no autograd graph; run forward with grad enabled")
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True, create_graph=create_graph)
    return {n: torch.zeros_like(p) if g is None else g for n, p, g in zip(names, params, grads)}
