"""MBMD Transformer: shared patch embedding, alternating traditional and
multi-branch encoder blocks, per-band Expert FFNs, wavelet attention and
per-branch heads. Pattern ``"TTTT"`` gives the vanilla ViT."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from . import diffcore
from .errors import ShapeError

ENSEMBLE_MODES = ("wavelet_attention", "average", "gate_network")


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 4
    block_pattern: str = "TMTM"
    patch_size: int = 64
    embed_dim: int = 128
    num_heads: int = 4
    ffn_hidden: int = 512
    num_branches: int = 6
    num_classes: int = 4
    dropout: float = 0.1
    channels: int = 20
    window_len: int = 512
    aux_concat_head: bool = False

    def __post_init__(self):
        if len(self.block_pattern) != self.num_blocks or set(self.block_pattern) - {"T", "M"}:
            raise ValueError(f"block_pattern {self.block_pattern!r} must be {self.num_blocks} chars over T/M")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.window_len % self.patch_size:
            raise ValueError(f"window_len {self.window_len} not divisible by patch_size {self.patch_size}")
        if self.num_classes < 2 or self.num_branches < 1:
            raise ValueError("need num_classes >= 2 and num_branches >= 1")

    @property
    def num_tokens(self) -> int:
        return self.channels * self.window_len // self.patch_size

    @property
    def multi_branch(self) -> bool:
        return "M" in self.block_pattern


class ForwardOutputs(NamedTuple):
    z_data: torch.Tensor  # (n, K)
    z_branch: torch.Tensor | None  # (n, B, K), train mode only
    reps: dict[str, torch.Tensor]
    gates: torch.Tensor | None = None  # (n, B) per-sample weights in gate_network mode
    z_aux: torch.Tensor | None = None


def patchify(x: torch.Tensor, patch_size: int) -> torch.Tensor:
    """``(..., C, L)`` -> ``(..., C*L/P, P)``; tokens are channel-major."""
    c, length = x.shape[-2:]
    if length % patch_size:
        raise ShapeError(f"patchify: window length {length} not divisible by patch size {patch_size}")
    return x.reshape(*x.shape[:-2], c * (length // patch_size), patch_size)


def pool(x: torch.Tensor) -> torch.Tensor:
    """Token mean: ``(..., T, D)`` -> ``(..., D)``."""
    if x.shape[-2] < 1:
        raise ShapeError("pool: no tokens")
    return x.mean(dim=-2)


def combine(outputs: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Weighted sum over the branch axis.

    ``outputs`` is ``(B, n, ...)``; ``weights`` is ``(B,)`` shared or ``(n, B)``
    per sample.
    """
    if weights.dim() == 1:
        w = weights.reshape(-1, *([1] * (outputs.dim() - 1)))
    else:
        w = weights.transpose(0, 1).reshape(*weights.shape[::-1], *([1] * (outputs.dim() - 2)))
    return (outputs * w).sum(dim=0)


def raw_prediction(rep_raw: torch.Tensor, head_weight: torch.Tensor, head_bias: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """z_data = sum_b weights_b * g_b(rep_raw) with ``g_b(r) = r @ W_b + c_b``.

    ``rep_raw`` ``(n, D)``; ``head_weight`` ``(B, D, K)``; ``head_bias`` ``(B, K)``;
    ``weights`` already normalized, ``(B,)`` or ``(n, B)``.
    """
    per_head = torch.einsum("nd,bdk->bnk", rep_raw, head_weight) + head_bias[:, None, :]
    return combine(per_head, weights)


def _uniform_(t: torch.Tensor, fan_in: int) -> torch.Tensor:
    bound = 1 / math.sqrt(fan_in)
    return nn.init.uniform_(t, -bound, bound)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.dropout = dropout

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        *lead, t, d = x.shape
        q, k, v = self.qkv(x).reshape(*lead, t, 3, self.heads, d // self.heads).movedim(-3, 0).unbind(0)
        q, k, v = (a.transpose(-3, -2) for a in (q, k, v))  # (..., h, t, dh)
        weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d // self.heads), dim=-1)
        weights = F.dropout(weights, self.dropout, self.training)
        out = (weights @ v).transpose(-3, -2).reshape(*lead, t, d)
        return self.proj(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.dropout = dropout

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.dropout(self.fc2(F.gelu(self.fc1(x))), self.dropout, self.training)


class ExpertBank(nn.Module):
    """B independent FFNs stored as stacked weights."""

    def __init__(self, branches: int, dim: int, hidden: int, dropout: float):
        super().__init__()
        self.w1 = nn.Parameter(_uniform_(torch.empty(branches, dim, hidden), dim))
        self.b1 = nn.Parameter(_uniform_(torch.empty(branches, hidden), dim))
        self.w2 = nn.Parameter(_uniform_(torch.empty(branches, hidden, dim), hidden))
        self.b2 = nn.Parameter(_uniform_(torch.empty(branches, dim), hidden))
        self.dropout = dropout

    def routed(self, x: torch.Tensor) -> torch.Tensor:
        """Expert b on stream b: ``(B, n, T, D)`` -> ``(B, n, T, D)``."""
        h = F.gelu(torch.einsum("bntd,bdh->bnth", x, self.w1) + self.b1[:, None, None, :])
        out = torch.einsum("bnth,bhd->bntd", h, self.w2) + self.b2[:, None, None, :]
        return F.dropout(out, self.dropout, self.training)

    def all_experts(self, x: torch.Tensor) -> torch.Tensor:
        """Every expert on one stream: ``(n, T, D)`` -> ``(B, n, T, D)``."""
        h = F.gelu(torch.einsum("ntd,bdh->bnth", x, self.w1) + self.b1[:, None, None, :])
        out = torch.einsum("bnth,bhd->bntd", h, self.w2) + self.b2[:, None, None, :]
        return F.dropout(out, self.dropout, self.training)


class TraditionalBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.norm1 = nn.LayerNorm(d, eps=diffcore.LAYER_NORM_EPS)
        self.attn = SelfAttention(d, cfg.num_heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(d, eps=diffcore.LAYER_NORM_EPS)
        self.ffn = FeedForward(d, cfg.ffn_hidden, cfg.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class MultiBranchBlock(nn.Module):
    """Shared attention; band stream b uses expert b, the raw stream a weighted
    ensemble of all experts."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.norm1 = nn.LayerNorm(d, eps=diffcore.LAYER_NORM_EPS)
        self.attn = SelfAttention(d, cfg.num_heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(d, eps=diffcore.LAYER_NORM_EPS)
        self.experts = ExpertBank(cfg.num_branches, d, cfg.ffn_hidden, cfg.dropout)

    def forward_raw(self, x: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + combine(self.experts.all_experts(self.norm2(x)), weights)

    def forward_bands(self, x: torch.Tensor) -> torch.Tensor:
        """``x`` is ``(B, n, T, D)``."""
        x = x + self.attn(self.norm1(x))
        return x + self.experts.routed(self.norm2(x))


class GateNetwork(nn.Module):
    """One hidden layer (D/2, GELU) then softmax over branches, per sample."""

    def __init__(self, dim: int, branches: int):
        super().__init__()
        self.hidden = nn.Linear(dim, max(1, dim // 2))
        self.out = nn.Linear(max(1, dim // 2), branches)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, rep: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.out(F.gelu(self.hidden(rep))), dim=-1)


class MBMDTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig, ensemble_mode: str = "wavelet_attention"):
        super().__init__()
        if ensemble_mode not in ENSEMBLE_MODES:
            raise ValueError(f"ensemble_mode must be one of {ENSEMBLE_MODES}, got {ensemble_mode!r}")
        self.cfg = cfg
        self.ensemble_mode = ensemble_mode
        d, k = cfg.embed_dim, cfg.num_classes
        heads = cfg.num_branches if cfg.multi_branch else 1
        self.patch_proj = nn.Linear(cfg.patch_size, d)
        self.pos_embed = nn.Parameter(torch.randn(cfg.num_tokens, d) * 0.02)
        self.blocks = nn.ModuleList(TraditionalBlock(cfg) if c == "T" else MultiBranchBlock(cfg) for c in cfg.block_pattern)
        self.head_weight = nn.Parameter(_uniform_(torch.empty(heads, d, k), d))
        self.head_bias = nn.Parameter(_uniform_(torch.empty(heads, k), d))
        # zero init = equal normalized weights
        self.w = nn.Parameter(torch.zeros(heads), requires_grad=ensemble_mode == "wavelet_attention" and cfg.multi_branch)
        self.gate = GateNetwork(d, heads) if ensemble_mode == "gate_network" and cfg.multi_branch else None
        self.aux_head = nn.Linear((heads + 1) * d, k) if cfg.aux_concat_head and cfg.multi_branch else None

    # -- pieces

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """``(..., C, L)`` windows -> ``(..., T, D)`` embeddings."""
        if tuple(x.shape[-2:]) != (self.cfg.channels, self.cfg.window_len):
            raise ShapeError(f"embed: expected (..., {self.cfg.channels}, {self.cfg.window_len}), got {tuple(x.shape)}")
        return self.patch_proj(patchify(x, self.cfg.patch_size)) + self.pos_embed

    def norm_vector(self) -> torch.Tensor | None:
        """Vector penalized by the L1 term (the learnable wavelet attention)."""
        return self.w if self.w.requires_grad else None

    def branch_weights(self, rep: torch.Tensor) -> torch.Tensor:
        """Normalized ensemble weights: ``(B,)`` shared, or ``(n, B)`` from the gate."""
        if self.gate is not None:
            return self.gate(rep)
        return torch.softmax(self.w, dim=0)

    def _raw_path(self, raw: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor | None]:
        x = self.embed(raw)
        for block in self.blocks:
            if isinstance(block, MultiBranchBlock):
                x = block.forward_raw(x, self.branch_weights(pool(x)))
            else:
                x = block(x)
        rep = pool(x)
        weights = self.branch_weights(rep)
        z = raw_prediction(rep, self.head_weight, self.head_bias, weights)
        return z, rep, weights if self.gate is not None else None

    # -- public forward passes

    def forward_infer(self, raw: torch.Tensor) -> torch.Tensor:
        """Raw-signal logits ``(n, K)``; band signals are never read."""
        return self._raw_path(raw)[0]

    def forward_train(self, raw: torch.Tensor, bands: torch.Tensor | None) -> ForwardOutputs:
        """``raw`` ``(n, C, L)``; ``bands`` ``(n, B, C, L)`` (ignored for all-T patterns)."""
        z_data, rep_raw, gates = self._raw_path(raw)
        reps = {"raw": rep_raw}
        if not self.cfg.multi_branch:
            return ForwardOutputs(z_data, None, reps, None)
        b = self.cfg.num_branches
        if bands is None or bands.dim() != 4 or bands.shape[1] != b:
            got = None if bands is None else tuple(bands.shape)
            raise ShapeError(f"forward_train: expected bands (n, {b}, C, L), got {got}")
        x = self.embed(bands.transpose(0, 1))  # (B, n, T, D)
        for block in self.blocks:
            if isinstance(block, MultiBranchBlock):
                x = block.forward_bands(x)
            else:
                x = block(x)
        rep_b = pool(x)  # (B, n, D)
        z_branch = torch.einsum("bnd,bdk->nbk", rep_b, self.head_weight) + self.head_bias
        reps["bands"] = rep_b.transpose(0, 1)
        z_aux = None
        if self.aux_head is not None:
            z_aux = self.aux_head(torch.cat([rep_raw, reps["bands"].flatten(1)], dim=-1))
        return ForwardOutputs(z_data, z_branch, reps, gates, z_aux)

    def forward(self, raw: torch.Tensor) -> torch.Tensor:
        return self.forward_infer(raw)

    def config_dict(self) -> dict:
        return {"model": asdict(self.cfg), "ensemble_mode": self.ensemble_mode}


def micro_config(**overrides) -> ModelConfig:
    base = dict(
        num_blocks=2,
        block_pattern="TM",
        patch_size=16,
        embed_dim=8,
        num_heads=2,
        ffn_hidden=16,
        num_branches=2,
        num_classes=2,
        dropout=0.0,
        channels=1,
        window_len=64,
    )
    base.update(overrides)
    return ModelConfig(**base)


def micro_model_gradcheck(eps: float = 1e-5, seed: int = 0) -> tuple[float, str]:
    """Finite-difference check of the full training loss on the micro config."""
    from .losses import DistillConfig, compute_losses

    cfg = micro_config()
    with diffcore.precision(torch.float64):
        torch.manual_seed(seed)
        model = MBMDTransformer(cfg).double().eval()
        with torch.no_grad():
            model.w.normal_()  # move off the |w| kink at 0
        gen = torch.Generator().manual_seed(seed)
        raw = torch.randn(3, cfg.channels, cfg.window_len, generator=gen, dtype=torch.float64)
        bands = torch.randn(3, cfg.num_branches, cfg.channels, cfg.window_len, generator=gen, dtype=torch.float64)
        labels = torch.tensor([0, 1, 1])
        dcfg = DistillConfig()

        def loss() -> torch.Tensor:
            return compute_losses(model.forward_train(raw, bands), labels, dcfg, model.norm_vector()).total

        err = diffcore.model_gradient_check(model, loss, eps)
    return err, "micro:C1xL64,P16,D8,TM,B2,K2"
