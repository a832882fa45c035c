"""Differentiable array primitives and a finite-difference gradient checker.

The reverse-mode machinery is torch.autograd; this module pins down the
contract the rest of the package relies on (row-major dense tensors, exact
adjoints, strict shapes) and supplies the checks that verify it.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import torch
import torch.nn.functional as F

LN_EPS = 1e-6


class ContractError(ValueError):
    """A shape or precondition contract was violated."""


class NumericalError(ArithmeticError):
    """A computation produced a non-finite value."""


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ContractError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


# --- primitives -------------------------------------------------------------
# Thin wrappers so every op in the contract has one name and one shape rule.


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ContractError(f"matmul: inner extents differ {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def add(a, b):
    _check_same_shape(a, b, "add")
    return a + b


def sub(a, b):
    _check_same_shape(a, b, "sub")
    return a - b


def mul(a, b):
    _check_same_shape(a, b, "mul")
    return a * b


def scale(a: torch.Tensor, c: float) -> torch.Tensor:
    return a * c


def concat(parts: Sequence[torch.Tensor], axis: int) -> torch.Tensor:
    return torch.cat(list(parts), dim=axis)


def split(x: torch.Tensor, sizes: Sequence[int], axis: int) -> tuple[torch.Tensor, ...]:
    if sum(sizes) != x.shape[axis]:
        raise ContractError(f"split: sizes {list(sizes)} do not cover extent {x.shape[axis]}")
    return torch.split(x, list(sizes), dim=axis)


def transpose(x: torch.Tensor, a: int = -2, b: int = -1) -> torch.Tensor:
    return x.transpose(a, b)


sigmoid = torch.sigmoid
tanh = torch.tanh
relu = torch.relu
exp = torch.exp
log = torch.log


def softmax_rows(x: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis, overflow-safe via max subtraction."""
    z = x - x.amax(dim=-1, keepdim=True).detach()
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    y = (x - mu) / torch.sqrt(var + LN_EPS) * gain
    return y if bias is None else y + bias


def embedding(table: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    return F.embedding(ids, table)


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-position negative log-likelihood in nats; logits [..., V], targets [...]."""
    logp = torch.log_softmax(logits, dim=-1)
    return -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)


def reduce_sum(x: torch.Tensor) -> torch.Tensor:
    return x.sum()


def reduce_mean(x: torch.Tensor) -> torch.Tensor:
    return x.mean()


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    return x.detach()


def masked_fill(x: torch.Tensor, mask: torch.Tensor, value: float) -> torch.Tensor:
    return x.masked_fill(mask, value)


# --- reverse mode -----------------------------------------------------------


def forward_backward(root: torch.Tensor, leaves: Iterable[torch.Tensor]) -> dict[int, torch.Tensor]:
    """Backpropagate a scalar root; return {id(leaf): grad} for leaves that require grad.

    Gradients from every path into a leaf are summed. Leaves that do not
    require grad, or that the root does not depend on, are left out.
    """
    if root.numel() != 1:
        raise ContractError(f"forward_backward: root must be scalar, got shape {tuple(root.shape)}")
    leaves = [t for t in leaves if t.requires_grad]
    grads = torch.autograd.grad(root, leaves, allow_unused=True) if leaves else ()
    return {id(t): g for t, g in zip(leaves, grads) if g is not None}


def grad_check(
    f: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    eps: float = 1e-6,
    max_coords: int | None = None,
    generator: torch.Generator | None = None,
    atol: float | None = None,
) -> float:
    """Max relative error between autograd and central differences.

    ``f`` maps ``inputs`` to a scalar. Inputs are cloned to float64. If
    ``max_coords`` is given, only that many randomly chosen coordinates per
    input are probed (the analytic gradient is still computed in full).
    Coordinates where the two estimates differ by less than ``atol`` count
    as exact; by default ``atol`` is the rounding floor of the central
    difference, 4 * machine-eps * max(|f|, 1) / eps.
    """
    xs = [x.detach().to(torch.float64).clone().requires_grad_(True) for x in inputs]
    out = f(*xs)
    if out.numel() != 1:
        raise ContractError("grad_check: f must return a scalar")
    if not torch.isfinite(out).all():
        raise NumericalError("grad_check: f is non-finite at the base point")
    analytic = torch.autograd.grad(out, xs, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for n, (x, g) in enumerate(zip(xs, analytic)):
            g = torch.zeros_like(x) if g is None else g
            flat = x.view(-1)
            coords: Iterable[int] = range(flat.numel())
            if max_coords is not None and flat.numel() > max_coords:
                coords = torch.randperm(flat.numel(), generator=generator)[:max_coords].tolist()
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = f(*xs).item()
                flat[i] = orig - eps
                fm = f(*xs).item()
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NumericalError(f"grad_check: non-finite f at input {n}, coordinate {i}")
                num = (fp - fm) / (2 * eps)
                ana = g.reshape(-1)[i].item()
                err = abs(ana - num) / max(abs(ana), abs(num), 1e-12)
                floor = atol if atol is not None else 4 * 2.23e-16 * max(abs(fp), abs(fm), 1.0) / eps
                if abs(ana - num) < floor:
                    err = 0.0
                worst = max(worst, err)
    return worst


def leaf_grads(named: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor | None]:
    return {k: (None if v.grad is None else v.grad.clone()) for k, v in named.items()}
