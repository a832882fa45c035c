"""Adafactor, learning-rate schedules and the training step."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from blockrec.diffengine import NumericalError

LN2 = math.log(2.0)


# --- schedules --------------------------------------------------------------


def lr_inverse_sqrt(step: int, base: float = 1.0, warmup: int = 1000) -> float:
    step = max(step, 1)
    return base * min(step / warmup**1.5, 1.0 / math.sqrt(step))


def lr_cosine(step: int, max_rate: float = 0.01, min_rate: float = 0.001, total: int = 1000, warmup: int = 0) -> float:
    if step >= total:
        return min_rate
    if warmup and step < warmup:
        return max_rate * step / warmup
    frac = (step - warmup) / max(total - warmup, 1)
    return min_rate + 0.5 * (max_rate - min_rate) * (1 + math.cos(math.pi * frac))


@dataclass
class ScheduleConfig:
    kind: str = "inverse_sqrt"
    base_rate: float = 1.0
    warmup_steps: int = 1000
    total_steps: int = 500_000
    min_rate: float = 0.001

    def __post_init__(self):
        if self.kind not in ("inverse_sqrt", "cosine"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.min_rate > self.base_rate:
            raise ValueError("min_rate must not exceed base_rate")

    def __call__(self, step: int) -> float:
        if self.kind == "inverse_sqrt":
            return lr_inverse_sqrt(step, self.base_rate, self.warmup_steps)
        return lr_cosine(step, self.base_rate, self.min_rate, self.total_steps, self.warmup_steps)


# --- Adafactor --------------------------------------------------------------


@dataclass
class OptimizerState:
    step: int = 0
    decay_exponent: float = 0.8
    clip_threshold: float = 1.0
    eps_scale: float = 1e-3
    eps_grad: float = 1e-30
    slots: dict[str, dict[str, torch.Tensor]] = field(default_factory=dict)


def _rms(x: torch.Tensor) -> torch.Tensor:
    return x.pow(2).mean().sqrt()


def adafactor_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor | None],
                   state: OptimizerState, rate: float) -> None:
    """In-place Adafactor update without momentum.

    Tensors with >= 2 axes keep row/column second-moment factors over their
    last two axes; vectors keep a full accumulator. Updates are the gradient
    normalised by the second-moment estimate, clipped to RMS <= clip
    threshold, and scaled by rate * max(RMS(param), eps_scale).
    """
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for {name!r} at step {state.step + 1}")
    state.step += 1
    t = state.step
    beta2 = 1.0 - t ** (-state.decay_exponent)
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            slot = state.slots.setdefault(name, _new_slot(p))
            g2 = g * g + state.eps_grad
            if p.dim() >= 2:
                r, c = slot["row"], slot["col"]
                r.mul_(beta2).add_(g2.mean(dim=-1), alpha=1 - beta2)
                c.mul_(beta2).add_(g2.mean(dim=-2), alpha=1 - beta2)
                v = (r / r.mean(dim=-1, keepdim=True)).unsqueeze(-1) * c.unsqueeze(-2)
            else:
                v = slot["v"]
                v.mul_(beta2).add_(g2, alpha=1 - beta2)
            u = g / v.sqrt()
            u = u / torch.clamp(_rms(u) / state.clip_threshold, min=1.0)
            scale = torch.clamp(_rms(p), min=state.eps_scale)
            p.sub_(rate * scale * u)


def _new_slot(p: torch.Tensor) -> dict[str, torch.Tensor]:
    if p.dim() >= 2:
        return {"row": torch.zeros(p.shape[:-1], dtype=p.dtype), "col": torch.zeros(p.shape[:-2] + p.shape[-1:], dtype=p.dtype)}
    return {"v": torch.zeros_like(p)}


class Adafactor:
    """Binds an OptimizerState to a module's named parameters."""

    def __init__(self, model: torch.nn.Module, **kw):
        self.model = model
        self.state = OptimizerState(**kw)

    def step(self, rate: float) -> None:
        params = dict(self.model.named_parameters())
        adafactor_step(params, {k: p.grad for k, p in params.items()}, self.state, rate)

    def zero_grad(self) -> None:
        for p in self.model.parameters():
            p.grad = None


# --- training ---------------------------------------------------------------


def loss_bits(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Mean cross-entropy in bits over masked-in positions, and their count."""
    targets, mask = torch.as_tensor(targets), torch.as_tensor(mask)
    nll = torch.nn.functional.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), targets.reshape(-1).clamp(max=logits.shape[-1] - 1), reduction="none"
    )
    m = mask.reshape(-1).to(nll.dtype)
    n = int(m.sum().item())
    return (nll * m).sum() / max(n, 1) / LN2, n


def train_step(model, opt: Adafactor, batch, caches, schedule, step: int):
    """forward -> bits/token -> backward -> Adafactor -> detached caches.

    ``batch`` is a data.Segment. Returns (loss_bits, new_caches, rate).
    """
    model.train()
    logits, new_caches = model(batch.tokens, caches, batch.reset)
    loss, n = loss_bits(logits, batch.targets, batch.mask)
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss at step {step} (batch {batch.index})")
    opt.zero_grad()
    if n:
        loss.backward()
    rate = schedule(step)
    opt.step(rate)
    return loss.item(), new_caches, rate


class MetricsWriter:
    """Append-only CSV: step, loss_bits, learning_rate, tokens_seen, wall_ms."""

    COLUMNS = ("step", "loss_bits", "learning_rate", "tokens_seen", "wall_ms")

    def __init__(self, path: str | Path):
        self.path = Path(path)
        new = not self.path.exists()
        self._f = open(self.path, "a", newline="")
        self._w = csv.writer(self._f)
        if new:
            self._w.writerow(self.COLUMNS)
        self._t0 = time.perf_counter()

    def write(self, step: int, loss: float, rate: float, tokens_seen: int, wall_ms: float | None = None):
        if wall_ms is None:
            wall_ms = (time.perf_counter() - self._t0) * 1000
        self._w.writerow([step, f"{loss:.6f}", f"{rate:.8g}", tokens_seen, f"{wall_ms:.1f}"])
        self._f.flush()

    def close(self):
        self._f.close()


def fit(model, stream, steps: int, schedule, metrics_path=None, callback=None, log_every: int = 1,
        start_step: int = 1, opt: Adafactor | None = None, caches=None):
    """Run ``steps`` training steps from an iterator of Segments.

    ``callback(step, loss, model)`` may return True to stop early. Returns
    (losses, opt, caches).
    """
    opt = opt or Adafactor(model)
    writer = MetricsWriter(metrics_path) if metrics_path else None
    losses = []
    tokens_seen = 0
    try:
        for step in range(start_step, start_step + steps):
            seg = next(stream)
            if caches is None:
                caches = model.init_caches(seg.tokens.shape[0])
            loss, caches, rate = train_step(model, opt, seg, caches, schedule, step)
            tokens_seen += seg.tokens.size
            losses.append(loss)
            if writer and step % log_every == 0:
                writer.write(step, loss, rate, tokens_seen)
            if callback is not None and callback(step, loss, model):
                break
    finally:
        if writer:
            writer.close()
    return losses, opt, caches
