"""Differentiable-computation substrate.

Tensors, graphs and reverse-mode gradients come from torch. This module pins
the operation set the model consumes, the precision policy, and a
central-difference checker that is independent of autograd.
"""

from __future__ import annotations

import contextlib
import csv
import math
import os
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NumericError, ShapeError

LAYER_NORM_EPS = 1e-5
VERIFY_ENV = "MBMD_VERIFY"


def verify_mode() -> bool:
    return os.environ.get(VERIFY_ENV, "") not in ("", "0")


def default_dtype() -> torch.dtype:
    """float64 under ``MBMD_VERIFY=1``, float32 otherwise."""
    return torch.float64 if verify_mode() else torch.float32


@contextlib.contextmanager
def precision(dtype: torch.dtype) -> Iterator[None]:
    prev = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(prev)


def check_finite(t: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {where}")
    return t


# ---------------------------------------------------------------- op set


def _require(cond: bool, op: str, msg: str) -> None:
    if not cond:
        raise ShapeError(f"{op}: {msg}")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _require(a.shape[-1] == b.shape[-2 if b.dim() > 1 else 0], "matmul", f"{tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError as exc:
        raise ShapeError(f"add: {tuple(a.shape)} + {tuple(b.shape)}") from exc
    return a + b


def scale(a: torch.Tensor, c: float) -> torch.Tensor:
    return a * c


def mean(a: torch.Tensor, axis: int = -1) -> torch.Tensor:
    return a.mean(dim=axis)


def concat(tensors: Sequence[torch.Tensor], axis: int = -1) -> torch.Tensor:
    try:
        return torch.cat(list(tensors), dim=axis)
    except RuntimeError as exc:
        raise ShapeError(f"concat: {[tuple(t.shape) for t in tensors]}") from exc


def split(a: torch.Tensor, sizes: Sequence[int], axis: int = -1) -> tuple[torch.Tensor, ...]:
    _require(sum(sizes) == a.shape[axis], "split", f"sizes {list(sizes)} vs axis length {a.shape[axis]}")
    return torch.split(a, list(sizes), dim=axis)


def transpose(a: torch.Tensor, dim0: int = -2, dim1: int = -1) -> torch.Tensor:
    return a.transpose(dim0, dim1)


def softmax(a: torch.Tensor, axis: int = -1) -> torch.Tensor:
    return torch.softmax(a, dim=axis)


def log(a: torch.Tensor) -> torch.Tensor:
    return torch.log(a)


def exp(a: torch.Tensor) -> torch.Tensor:
    return torch.exp(a)


def layer_norm(a: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = LAYER_NORM_EPS) -> torch.Tensor:
    _require(gain.shape == a.shape[-1:] and bias.shape == a.shape[-1:], "layer_norm", "gain/bias must match last axis")
    return F.layer_norm(a, a.shape[-1:], gain, bias, eps)


def gelu(a: torch.Tensor) -> torch.Tensor:
    return F.gelu(a)


def attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    dropout: float = 0.0,
    training: bool = False,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes."""
    _require(q.shape[-1] == k.shape[-1] and k.shape[-2] == v.shape[-2], "attention", "q/k/v shapes disagree")
    weights = softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), axis=-1)
    if dropout and training:
        weights = dropout_mask(weights, dropout, generator)
    return weights @ v


def gather(a: torch.Tensor, index: torch.Tensor, axis: int = -1) -> torch.Tensor:
    return torch.gather(a, axis, index)


def l1_norm(a: torch.Tensor) -> torch.Tensor:
    return a.abs().sum()


def dropout_mask(a: torch.Tensor, p: float, generator: torch.Generator | None = None) -> torch.Tensor:
    """Train-mode dropout: zero with probability ``p``, scale survivors by 1/(1-p)."""
    if p <= 0:
        return a
    keep = torch.rand(a.shape, generator=generator, dtype=a.dtype) >= p
    return a * keep / (1 - p)


@dataclass(frozen=True)
class OpSpec:
    name: str
    fn: Callable[..., torch.Tensor]
    shapes: tuple[tuple[int, ...], ...]
    domain: str = "real"  # "real" | "positive" | "away_from_zero"
    wrt: tuple[int, ...] | None = None  # inputs that get gradients; None = all


def _gather_fn(a):
    idx = torch.tensor([[2, 0, 1, 2], [1, 1, 0, 3]])[: a.shape[0]] % a.shape[-1]
    return gather(a, idx, axis=-1)


def _dropout_fn(a):
    return dropout_mask(a, 0.3, torch.Generator().manual_seed(1234))


OPS: dict[str, OpSpec] = {
    spec.name: spec
    for spec in [
        OpSpec("matmul", matmul, ((4, 5), (5, 3))),
        OpSpec("add", add, ((3, 4), (4,))),
        OpSpec("scale", lambda a: scale(a, -1.7), ((3, 4),)),
        OpSpec("mean", lambda a: mean(a, 0), ((5, 3),)),
        OpSpec("concat", lambda a, b: concat([a, b], 0), ((2, 3), (4, 3))),
        OpSpec("split", lambda a: concat([s * (i + 1) for i, s in enumerate(split(a, [2, 3], -1))], -1), ((3, 5),)),
        OpSpec("transpose", lambda a: transpose(a) @ torch.arange(1.0, 1 + a.shape[0], dtype=a.dtype), ((4, 3),)),
        OpSpec("softmax", softmax, ((8,),)),
        OpSpec("log", log, ((6,),), domain="positive"),
        OpSpec("exp", exp, ((6,),)),
        OpSpec("layer_norm", layer_norm, ((16,), (16,), (16,))),
        OpSpec("gelu", gelu, ((10,),)),
        OpSpec("attention", attention, ((2, 5, 4), (2, 5, 4), (2, 5, 3))),
        OpSpec("gather", _gather_fn, ((2, 4),)),
        OpSpec("l1_norm", l1_norm, ((7,),), domain="away_from_zero"),
        OpSpec("dropout", _dropout_fn, ((12,),)),
    ]
}


def op_set() -> list[str]:
    return list(OPS)


# ---------------------------------------------------------------- gradients


def gradients(output: torch.Tensor, leaves: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Reverse-mode gradients of a scalar ``output`` for each leaf (zeros if unused)."""
    if output.numel() != 1:
        raise ShapeError(f"gradients need a scalar output, got shape {tuple(output.shape)}")
    grads = torch.autograd.grad(output.reshape(()), list(leaves), allow_unused=True)
    return [torch.zeros_like(leaf) if g is None else g for leaf, g in zip(leaves, grads)]


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def central_differences(fn: Callable[[], torch.Tensor], leaf: torch.Tensor, eps: float) -> np.ndarray:
    """d fn / d leaf by central differences, perturbing ``leaf`` in place."""
    out = np.zeros(leaf.numel())
    flat = leaf.data.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = fn().item()
            flat[i] = orig - eps
            lo = fn().item()
            flat[i] = orig
            out[i] = (hi - lo) / (2 * eps)
    return out.reshape(tuple(leaf.shape))


def _random_input(shape, domain: str, gen: torch.Generator) -> torch.Tensor:
    x = torch.randn(shape, generator=gen, dtype=torch.float64)
    if domain == "positive":
        x = x.abs() + 0.5
    elif domain == "away_from_zero":
        x = torch.sign(x) * (x.abs() + 0.1)
    return x


def finite_diff_check(
    op_name: str,
    shapes: Sequence[Sequence[int]] | None = None,
    eps: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences for one op.

    The op output is contracted against a fixed random tensor so every output
    element contributes to the scalar being differentiated.
    """
    if op_name not in OPS:
        raise KeyError(f"unknown op {op_name!r}; known: {', '.join(OPS)}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    spec = OPS[op_name]
    shapes = [tuple(s) for s in (shapes or spec.shapes)]
    gen = torch.Generator().manual_seed(seed)
    with precision(torch.float64):
        inputs = [_random_input(s, spec.domain, gen).requires_grad_(True) for s in shapes]
        probe_out = spec.fn(*inputs)
        proj = torch.randn(probe_out.shape, generator=gen, dtype=torch.float64)

        def scalar() -> torch.Tensor:
            return (spec.fn(*inputs) * proj).sum()

        wrt = spec.wrt if spec.wrt is not None else range(len(inputs))
        leaves = [inputs[i] for i in wrt]
        analytic = gradients(scalar(), leaves)
        worst = 0.0
        for leaf, g in zip(leaves, analytic):
            numeric = central_differences(scalar, leaf, eps)
            worst = max(worst, max_relative_error(g.detach().numpy(), numeric))
    return worst


def model_gradient_check(model: torch.nn.Module, loss_fn: Callable[[], torch.Tensor], eps: float = 1e-5) -> float:
    """Central-difference check over every trainable parameter of ``model``."""
    params = [p for p in model.parameters() if p.requires_grad]
    analytic = gradients(loss_fn(), params)
    worst = 0.0
    for p, g in zip(params, analytic):
        numeric = central_differences(loss_fn, p, eps)
        worst = max(worst, max_relative_error(g.detach().numpy(), numeric))
    return worst


@dataclass
class GradcheckRow:
    op: str
    shape: str
    max_rel_err: float
    passed: bool


def gradcheck_suite(threshold: float = 1e-4, eps: float = 1e-5, seed: int = 0, include_model: bool = True) -> list[GradcheckRow]:
    rows = []
    for name, spec in OPS.items():
        err = finite_diff_check(name, None, eps, seed)
        rows.append(GradcheckRow(name, ";".join("x".join(map(str, s)) for s in spec.shapes), err, err < threshold))
    if include_model:
        from .model import micro_model_gradcheck

        err, desc = micro_model_gradcheck(eps=eps, seed=seed)
        rows.append(GradcheckRow("model_loss", desc, err, err < threshold))
    return rows


def write_gradcheck_csv(rows: Sequence[GradcheckRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["op", "shape", "max_rel_err", "pass"])
        for r in rows:
            writer.writerow([r.op, r.shape, f"{r.max_rel_err:.3e}", int(r.passed)])
