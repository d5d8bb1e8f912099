"""Monolithic full-backbone training, run once before the backbone is frozen."""

from __future__ import annotations

import logging
import math

from .data import batches, gen_dataset
from .model import Backbone, ModelConfig, lm_loss_and_grads
from .numeric import Rng
from .peft import OptimState, adamw_step

log = logging.getLogger(__name__)


def pretrain_backbone(
    config: ModelConfig,
    *,
    task: str = "charlm",
    steps: int = 300,
    batch_size: int = 16,
    lr: float = 3e-3,
    weight_decay: float = 0.0,
    seed: int = 0,
    n_samples: int = 2048,
    segment_len: int = 8,
    init: Backbone | None = None,
    on_step=None,
) -> tuple[Backbone, list[float]]:
    """Train every backbone tensor with AdamW on ``task``; returns the model and its loss curve.

    Positional encodings are fixed and stay out of the update.
    """
    bb = init.copy() if init is not None else Backbone.init(config)
    samples = gen_dataset(task, seed, n_samples, vocab=config.vocab, segment_len=segment_len, seq_len=config.max_seq)
    rng = Rng(seed ^ 0x5052455400000000)
    state = OptimState(base_lr=lr, total_steps=steps, weight_decay=weight_decay)
    params = bb.trainable()
    losses: list[float] = []
    queue: list = []
    for step in range(steps):
        if not queue:
            queue = batches(samples, batch_size, rng.permutation(len(samples)))
        inputs, targets = queue.pop(0)
        loss, grads = lm_loss_and_grads(bb, inputs, targets)
        if not math.isfinite(loss):
            raise RuntimeError(f"pretraining diverged at step {step}")
        adamw_step(params, grads, state, step)
        losses.append(loss)
        if on_step:
            on_step(step, loss)
        if step % 50 == 0:
            log.info("pretrain step %d loss %.4f", step, loss)
    return bb, losses
