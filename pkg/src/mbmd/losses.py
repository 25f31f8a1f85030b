"""Training objectives: cross-entropy, tempered KL distillation, L1 sparsity,
importance loss and the combined objective."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

PROB_FLOOR = 1e-12
DISTILL_MODES = ("mutual", "single_direction", "none")


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 6.0
    lam: float = 0.01
    mode: str = "mutual"
    branch_ce: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if self.mode not in DISTILL_MODES:
            raise ValueError(f"distill mode must be one of {DISTILL_MODES}, got {self.mode!r}")


@dataclass
class LossBreakdown:
    l_ce: torch.Tensor
    l_distill: torch.Tensor
    l_norm: torch.Tensor
    total: torch.Tensor
    l_imp: torch.Tensor | None = None

    def as_floats(self) -> dict[str, float]:
        out = {k: float(getattr(self, k).detach()) for k in ("l_ce", "l_distill", "l_norm", "total")}
        out["l_imp"] = float(self.l_imp.detach()) if self.l_imp is not None else 0.0
        return out


def cross_entropy(z: torch.Tensor, label) -> torch.Tensor:
    """-log softmax(z)[label], batch-averaged when ``z`` is ``(n, K)``."""
    z2 = z.unsqueeze(0) if z.dim() == 1 else z
    target = torch.as_tensor(label, dtype=torch.long).reshape(-1)
    k = z2.shape[-1]
    if target.numel() and (target.min() < 0 or target.max() >= k):
        raise ValueError(f"label out of range for {k} classes")
    return F.cross_entropy(z2, target)


def tempered_softmax(z: torch.Tensor, temperature: float) -> torch.Tensor:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = z / temperature
    z = z - z.max(dim=-1, keepdim=True).values
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def _kl(p_t: torch.Tensor, p_s: torch.Tensor) -> torch.Tensor:
    # xlogy gives 0*log 0 = 0
    return (torch.xlogy(p_t, p_t) - p_t * torch.log(p_s.clamp_min(PROB_FLOOR))).sum(dim=-1)


def kl_div(p_t: torch.Tensor, p_s: torch.Tensor) -> torch.Tensor:
    """KL(p_t || p_s) along the last axis."""
    for name, p in (("p_t", p_t), ("p_s", p_s)):
        if (p < 0).any() or not torch.allclose(p.sum(dim=-1), torch.ones((), dtype=p.dtype), atol=1e-6):
            raise ValueError(f"{name} is not a probability distribution")
    return _kl(p_t, p_s)


def _branch_terms(z_data: torch.Tensor, z_branch: torch.Tensor, temperature: float):
    if z_branch.shape[-1] != z_data.shape[-1] or z_branch.shape[:-2] != z_data.shape[:-1]:
        raise ValueError(f"z_branch {tuple(z_branch.shape)} incompatible with z_data {tuple(z_data.shape)}")
    if z_branch.shape[-2] < 1:
        raise ValueError("need at least one branch")
    p_data = tempered_softmax(z_data, temperature).unsqueeze(-2)
    p_b = tempered_softmax(z_branch, temperature)
    return p_data, p_b


def mutual_distill_loss(z_data: torch.Tensor, z_branch: torch.Tensor, temperature: float = 6.0) -> torch.Tensor:
    """(1/2) sum_b [KL(p_data || p_b) + KL(p_b || p_data)], batch-averaged.

    ``z_data`` is ``(K,)`` or ``(n, K)``; ``z_branch`` is ``(B, K)`` or ``(n, B, K)``.
    Gradients flow into both sides.
    """
    p_data, p_b = _branch_terms(z_data, z_branch, temperature)
    per = 0.5 * (_kl(p_data, p_b) + _kl(p_b, p_data)).sum(dim=-1)
    return per.mean()


def single_direction_loss(z_data: torch.Tensor, z_branch: torch.Tensor, temperature: float = 6.0) -> torch.Tensor:
    """sum_b KL(p_b || p_data): knowledge flows from branches to the raw path only."""
    p_data, p_b = _branch_terms(z_data, z_branch, temperature)
    return _kl(p_b, p_data).sum(dim=-1).mean()


def l1_norm(w: torch.Tensor) -> torch.Tensor:
    return w.abs().sum()


def importance_loss(gates: torch.Tensor) -> torch.Tensor:
    """Squared coefficient of variation of per-branch importance (column sums)."""
    imp = gates.sum(dim=0)
    m = imp.mean()
    if m.item() == 0:
        raise ValueError("importance loss undefined for zero mean importance")
    return imp.var(unbiased=False) / m**2


def total_loss(
    l_ce: torch.Tensor,
    l_distill: torch.Tensor,
    l_norm: torch.Tensor,
    cfg: DistillConfig = DistillConfig(),
    l_imp: torch.Tensor | None = None,
    imp_weight: float = 0.0,
) -> LossBreakdown:
    """L = L_ce + L_distill + lambda * L_norm (+ imp_weight * L_imp)."""
    if cfg.mode == "none":
        l_distill = torch.zeros_like(torch.as_tensor(l_ce))
    total = l_ce + l_distill + cfg.lam * l_norm
    if l_imp is not None and imp_weight:
        total = total + imp_weight * l_imp
    return LossBreakdown(l_ce, l_distill, l_norm, total, l_imp)


def compute_losses(outputs, labels: torch.Tensor, cfg: DistillConfig, w: torch.Tensor | None, imp_weight: float = 0.0) -> LossBreakdown:
    """Full objective from :class:`~mbmd.model.ForwardOutputs`."""
    l_ce = cross_entropy(outputs.z_data, labels)
    zb = outputs.z_branch
    has_branches = zb is not None and zb.shape[1] > 0
    if has_branches and cfg.branch_ce:
        n, b, k = zb.shape
        l_ce = l_ce + cross_entropy(zb.reshape(n * b, k), labels.repeat_interleave(b))
    if outputs.z_aux is not None:
        l_ce = l_ce + cross_entropy(outputs.z_aux, labels)
    zero = outputs.z_data.new_zeros(())
    if has_branches and cfg.mode == "mutual":
        l_distill = mutual_distill_loss(outputs.z_data, zb, cfg.temperature)
    elif has_branches and cfg.mode == "single_direction":
        l_distill = single_direction_loss(outputs.z_data, zb, cfg.temperature)
    else:
        l_distill = zero
    l_norm = l1_norm(w) if w is not None else zero
    l_imp = importance_loss(outputs.gates) if outputs.gates is not None else None
    return total_loss(l_ce, l_distill, l_norm, cfg, l_imp, imp_weight)
