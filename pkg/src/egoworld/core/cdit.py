"""EgoWorld core: conditional diffusion transformer (CDiT) with adaLN-Zero conditioning.

Noisy tokens of a frame self-attend within that frame and cross-attend to clean context
frames selected by a frame-level mask. Masked context frames are never gathered into a
query's key set, so their contribution is exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import torch
import torch.nn as nn
from einops import rearrange

from .config import ModelConfig
from .diffusion import check_finite
from .errors import DataError
from .kinematics import ACTION_DIM

TIME_FREQ_DIM = 256


# ---------------- Masks ----------------

@dataclass(frozen=True)
class MaskSet:
    self_mask: torch.Tensor  # (Fq, Fq) bool, frame level
    cross_mask: torch.Tensor  # (Fq, Fc) bool, frame level
    query_frames: torch.Tensor  # (Fq,) sequence positions of the noisy frames
    context_frames: torch.Tensor  # (Fc,) sequence positions of the clean frames
    mode: str

    @property
    def num_query(self) -> int:
        return int(self.query_frames.numel())

    @property
    def num_context(self) -> int:
        return int(self.context_frames.numel())

    def token_masks(self, tokens_per_frame: int) -> Tuple[torch.Tensor, torch.Tensor]:
        """Token-level (self, cross) masks: every frame entry expanded to an N x N block."""
        block = torch.ones(tokens_per_frame, tokens_per_frame, dtype=torch.int64)
        self_tok = torch.kron(self.self_mask.to(torch.int64), block).bool()
        cross_tok = torch.kron(self.cross_mask.to(torch.int64), block).bool()
        return self_tok, cross_tok

    def cross_index(self) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Per query frame: padded context indices (Fq, K), validity (Fq, K) and any-allowed (Fq,)."""
        counts = self.cross_mask.sum(dim=1)
        k = max(1, int(counts.max()) if counts.numel() else 1)
        idx = torch.zeros(self.num_query, k, dtype=torch.long)
        valid = torch.zeros(self.num_query, k, dtype=torch.bool)
        for q in range(self.num_query):
            allowed = torch.nonzero(self.cross_mask[q], as_tuple=False).flatten()
            idx[q, : allowed.numel()] = allowed
            valid[q, : allowed.numel()] = True
        return idx, valid, counts > 0


def build_masks(T: int, k: int, tokens_per_frame: int, mode: str = "train_prefix") -> MaskSet:
    """Frame-level attention masks for a T-frame sequence with Markov context k.

    train_prefix: every frame is a noisy query; frame t sees clean frames max(0, t-k) .. t-1.
    infer_last: only frame T-1 is queried; it sees the last min(k, T-1) clean frames.
    """
    if T < 1:
        raise DataError(f"Mask sequence length must be >= 1, got {T}.")
    if tokens_per_frame < 1:
        raise DataError("tokens_per_frame must be >= 1.")
    frames = torch.arange(T)
    if mode == "train_prefix":
        cross = (frames[None, :] < frames[:, None]) & (frames[None, :] >= frames[:, None] - k)
        return MaskSet(self_mask=torch.eye(T, dtype=torch.bool), cross_mask=cross,
                       query_frames=frames, context_frames=frames, mode=mode)
    if mode == "infer_last":
        ctx = frames[:-1]
        cross = (ctx >= T - 1 - k)[None, :]
        return MaskSet(self_mask=torch.ones(1, 1, dtype=torch.bool), cross_mask=cross,
                       query_frames=frames[-1:], context_frames=ctx, mode=mode)
    raise DataError(f"Unknown mask mode '{mode}'.")


# ---------------- Layers ----------------

def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale) + shift


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of (possibly multi-dimensional) integer steps: (..., dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[..., None] * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb


class TimestepEmbedder(nn.Module):
    def __init__(self, hidden: int, freq_dim: int = TIME_FREQ_DIM):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        emb = timestep_embedding(t, self.freq_dim).to(self.mlp[0].weight.dtype)
        return self.mlp(emb)


class Attention(nn.Module):
    """Multi-head attention with an optional boolean key mask (True = attend)."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, memory: torch.Tensor, key_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        q = rearrange(self.q(x), "m l (h d) -> m h l d", h=self.heads)
        k, v = rearrange(self.kv(memory), "m l (two h d) -> two m h l d", two=2, h=self.heads)
        logits = torch.einsum("mhqd,mhkd->mhqk", q, k) * self.scale
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        out = torch.einsum("mhqk,mhkd->mhqd", logits.softmax(dim=-1), v)
        return self.proj(rearrange(out, "m h l d -> m l (h d)"))


class Modulation(NamedTuple):
    shift_msa: torch.Tensor
    scale_msa: torch.Tensor
    gate_msa: torch.Tensor
    shift_mca: torch.Tensor
    scale_mca: torch.Tensor
    gate_mca: torch.Tensor
    shift_mlp: torch.Tensor
    scale_mlp: torch.Tensor
    gate_mlp: torch.Tensor


class CDiTBlock(nn.Module):
    """Self-attention, context cross-attention and MLP, each modulated and gated by adaLN-Zero."""

    def __init__(self, hidden: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.norm2 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.norm3 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.norm_ctx = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.self_attn = Attention(hidden, heads)
        self.cross_attn = Attention(hidden, heads)
        mlp_hidden = int(hidden * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(hidden, mlp_hidden), nn.GELU(approximate="tanh"), nn.Linear(mlp_hidden, hidden))
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(hidden, 9 * hidden))

    def modulation(self, cond: torch.Tensor) -> Modulation:
        """cond (B, Fq, D) -> nine (B, Fq, 1, D) tensors broadcast over a frame's tokens."""
        return Modulation(*(c.unsqueeze(2) for c in self.adaLN_modulation(cond).chunk(9, dim=-1)))

    def forward(self, x: torch.Tensor, context: torch.Tensor, cond: torch.Tensor,
                cross: Tuple[torch.Tensor, torch.Tensor, torch.Tensor]) -> torch.Tensor:
        b, fq, n, _ = x.shape
        m = self.modulation(cond)

        h = rearrange(modulate(self.norm1(x), m.shift_msa, m.scale_msa), "b f n d -> (b f) n d")
        x = x + m.gate_msa * rearrange(self.self_attn(h, h), "(b f) n d -> b f n d", b=b)

        if context.shape[1] > 0:
            idx, valid, has_any = cross
            h = rearrange(modulate(self.norm2(x), m.shift_mca, m.scale_mca), "b f n d -> (b f) n d")
            mem = rearrange(self.norm_ctx(context)[:, idx], "b f k n d -> (b f) (k n) d")
            # Queries with no allowed frame attend to slot 0 and are zeroed below.
            safe = valid.clone()
            safe[~has_any, 0] = True
            key_mask = safe[:, :, None].expand(-1, -1, n).reshape(fq, -1).repeat(b, 1)
            out = rearrange(self.cross_attn(h, mem, key_mask), "(b f) n d -> b f n d", b=b)
            out = out * has_any.to(out.dtype)[None, :, None, None]
            x = x + m.gate_mca * out

        h = modulate(self.norm3(x), m.shift_mlp, m.scale_mlp)
        return x + m.gate_mlp * self.mlp(h)


class FinalLayer(nn.Module):
    def __init__(self, hidden: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.linear = nn.Linear(hidden, out_dim)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(hidden, 2 * hidden))

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        shift, scale = (c.unsqueeze(2) for c in self.adaLN_modulation(cond).chunk(2, dim=-1))
        return self.linear(modulate(self.norm(x), shift, scale))


# ---------------- Model ----------------

class CDiT(nn.Module):
    """Predicts epsilon (per token, C dims) and one variance coefficient in [-1, 1] per token."""

    def __init__(self, latent_dim: int, tokens_per_frame: int, width: int, layers: int, heads: int,
                 max_frames: int, action_conditioning: str = "concat", action_embed_dim: int = 512,
                 mlp_ratio: float = 4.0, timeskip_scale: float = 1.0):
        super().__init__()
        if width % heads:
            raise DataError(f"Model width {width} is not divisible by {heads} heads.")
        self.latent_dim = latent_dim
        self.tokens_per_frame = tokens_per_frame
        self.width = width
        self.max_frames = max_frames
        self.action_conditioning = action_conditioning
        self.timeskip_scale = float(timeskip_scale)
        self.x_embedder = nn.Linear(latent_dim, width)
        self.ctx_embedder = nn.Linear(latent_dim, width)
        self.frame_pos = nn.Parameter(torch.zeros(max_frames, width))
        self.patch_pos = nn.Parameter(torch.zeros(tokens_per_frame, width))
        self.t_embedder = TimestepEmbedder(width)
        cond_in = ACTION_DIM + 1
        if action_conditioning == "concat":
            self.a_embedder: nn.Module = nn.Linear(cond_in, width)
        elif action_conditioning == "embed":
            self.a_embedder = nn.Sequential(nn.Linear(cond_in, action_embed_dim), nn.SiLU(),
                                            nn.Linear(action_embed_dim, width))
        else:
            raise DataError(f"Unknown action conditioning '{action_conditioning}'.")
        self.blocks = nn.ModuleList([CDiTBlock(width, heads, mlp_ratio) for _ in range(layers)])
        self.final_layer = FinalLayer(width, latent_dim + 1)
        self.initialize_weights()

    def initialize_weights(self) -> None:
        def _basic_init(module: nn.Module) -> None:
            if isinstance(module, nn.Linear):
                nn.init.xavier_uniform_(module.weight)
                if module.bias is not None:
                    nn.init.constant_(module.bias, 0)

        self.apply(_basic_init)
        nn.init.normal_(self.frame_pos, std=0.02)
        nn.init.normal_(self.patch_pos, std=0.02)
        nn.init.normal_(self.t_embedder.mlp[0].weight, std=0.02)
        nn.init.normal_(self.t_embedder.mlp[2].weight, std=0.02)
        # Zero-out adaLN modulation and the output layer.
        for block in self.blocks:
            nn.init.constant_(block.adaLN_modulation[-1].weight, 0)
            nn.init.constant_(block.adaLN_modulation[-1].bias, 0)
        nn.init.constant_(self.final_layer.adaLN_modulation[-1].weight, 0)
        nn.init.constant_(self.final_layer.adaLN_modulation[-1].bias, 0)
        nn.init.constant_(self.final_layer.linear.weight, 0)
        nn.init.constant_(self.final_layer.linear.bias, 0)

    def condition(self, actions: torch.Tensor, timeskips: torch.Tensor, tau: torch.Tensor) -> torch.Tensor:
        """Per-frame conditioning vector (B, Fq, D) from the action, its timeskip and the noise step."""
        feat = torch.cat([actions, (timeskips * self.timeskip_scale)[..., None]], dim=-1)
        return self.a_embedder(feat.to(self.frame_pos.dtype)) + self.t_embedder(tau)

    def forward(self, noisy: torch.Tensor, context: torch.Tensor, actions: torch.Tensor, timeskips: torch.Tensor,
                tau: torch.Tensor, masks: MaskSet) -> Tuple[torch.Tensor, torch.Tensor]:
        """noisy (B, Fq, N, C), context (B, Fc, N, C), actions (B, Fq, 48), timeskips/tau (B, Fq)."""
        b, fq, n, c = noisy.shape
        if (fq, n, c) != (masks.num_query, self.tokens_per_frame, self.latent_dim):
            raise DataError(f"Noisy tokens {tuple(noisy.shape)} do not match masks/model "
                            f"({masks.num_query}, {self.tokens_per_frame}, {self.latent_dim}).")
        if context.shape[1] != masks.num_context or context.shape[0] != b:
            raise DataError(f"Context {tuple(context.shape)} does not match masks ({masks.num_context} frames).")
        if actions.shape != (b, fq, ACTION_DIM) or timeskips.shape != (b, fq) or tau.shape != (b, fq):
            raise DataError("actions/timeskips/tau must be (B, Fq, 48) / (B, Fq) / (B, Fq).")
        if not bool(torch.all(masks.self_mask == torch.eye(fq, dtype=torch.bool))):
            raise DataError("Self-attention is restricted to tokens of the same frame.")
        check_finite("model inputs", noisy, context, actions, timeskips)
        if int(masks.query_frames.max()) >= self.max_frames:
            raise DataError(f"Frame position {int(masks.query_frames.max())} exceeds model capacity {self.max_frames}.")

        dtype = self.frame_pos.dtype
        x = self.x_embedder(noisy.to(dtype)) + self.frame_pos[masks.query_frames][None, :, None] + self.patch_pos
        if masks.num_context:
            ctx = (self.ctx_embedder(context.to(dtype)) + self.frame_pos[masks.context_frames][None, :, None]
                   + self.patch_pos)
        else:
            ctx = context.new_zeros(b, 0, n, self.width, dtype=dtype)
        cond = self.condition(actions, timeskips, tau)
        cross = masks.cross_index()
        for block in self.blocks:
            x = block(x, ctx, cond, cross)
        out = self.final_layer(x, cond)
        return out[..., :c], torch.tanh(out[..., c:])


def build_model(cfg: ModelConfig, latent_dim: int, tokens_per_frame: int, timeskip_scale: float = 1.0) -> CDiT:
    r = cfg.resolved()
    return CDiT(latent_dim=latent_dim, tokens_per_frame=tokens_per_frame, width=r.width, layers=r.layers,
                heads=r.heads, max_frames=r.sequence_frames, action_conditioning=r.action_conditioning,
                action_embed_dim=r.action_embed_dim, mlp_ratio=r.mlp_ratio, timeskip_scale=timeskip_scale)


def analytic_param_count(cfg: ModelConfig, latent_dim: int, tokens_per_frame: int) -> int:
    """Closed-form parameter count of build_model(cfg, ...)."""
    r = cfg.resolved()
    d, c, h = r.width, latent_dim, int(r.width * r.mlp_ratio)
    linear = lambda i, o: i * o + o  # noqa: E731
    block = (linear(d, d) + linear(d, 2 * d) + linear(d, d)) * 2 + linear(d, h) + linear(h, d) + linear(d, 9 * d)
    if r.action_conditioning == "concat":
        action = linear(ACTION_DIM + 1, d)
    else:
        action = linear(ACTION_DIM + 1, r.action_embed_dim) + linear(r.action_embed_dim, d)
    embeddings = 2 * linear(c, d) + r.sequence_frames * d + tokens_per_frame * d + linear(TIME_FREQ_DIM, d) + linear(d, d)
    final = linear(d, 2 * d) + linear(d, c + 1)
    return r.layers * block + embeddings + action + final
