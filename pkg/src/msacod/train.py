"""Plain gradient descent on the synthetic set (overfit sanity demo)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .loss import total_loss
from .model import Model, ModelConfig
from .synthetic import make_dataset
from .tensor import NonFiniteError, Tape, Tensor

log = logging.getLogger(__name__)

DEFAULT_STEPS = 2000
DEFAULT_LR = 0.005
TARGET_LOSS = 0.1


class DivergenceError(RuntimeError):
    def __init__(self, step: int, reason: str):
        super().__init__(f"non-finite loss at step {step}: {reason}")
        self.step = step


@dataclass
class OverfitResult:
    losses: list = field(default_factory=list)
    steps: int = 0

    @property
    def initial(self) -> float:
        return self.losses[0]

    @property
    def final(self) -> float:
        return self.losses[-1]

    @property
    def converged(self) -> bool:
        return self.final < TARGET_LOSS


def batch_loss(model: Model, batch, record: bool = True) -> Tensor:
    """Mean over images of the summed multi-level loss (records on the active tape)."""
    total = None
    for img, mask in batch:
        preds = model.forward(img)
        rep = total_loss(preds.upsampled, mask)
        total = rep.total if total is None else total + rep.total
    return total * (1.0 / len(batch))


def overfit(
    steps: int = DEFAULT_STEPS,
    lr: float = DEFAULT_LR,
    seed: int = 7,
    cfg: Optional[ModelConfig] = None,
    n_images: int = 4,
) -> OverfitResult:
    """Run ``steps`` updates; the trajectory holds ``steps + 1`` losses."""
    if steps < 0:
        raise ValueError("steps must be non-negative")
    cfg = cfg or ModelConfig.micro(seed=seed)
    model = Model(cfg)
    size = cfg.input_size[0]
    batch = [(Tensor(img), mask) for img, mask in make_dataset(n_images, size=size, seed=seed)]
    params = list(model.params.values())
    result = OverfitResult(steps=steps)

    for step in range(steps + 1):
        model.params.zero_grad()
        last = step == steps
        try:
            if last:
                loss = batch_loss(model, batch)
            else:
                with Tape() as tape:
                    loss = batch_loss(model, batch)
                tape.backward(loss)
        except NonFiniteError as exc:
            raise DivergenceError(step, str(exc)) from None
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(step, "loss is not finite")
        result.losses.append(value)
        if last:
            break
        if step % 100 == 0:
            log.info("step %d loss %.6f", step, value)
        for p in params:
            if p.grad is not None:
                p.data -= lr * p.grad
    return result
