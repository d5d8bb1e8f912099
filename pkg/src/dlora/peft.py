"""LoRA triplets, serial adapters, module norms and AdamW with a cosine schedule.

Everything here runs on the edge node. Parameters are mutated in place by
:func:`adamw_step`, so references held by a module stay valid across steps.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .numeric import (
    Rng,
    ShapeError,
    add_flops,
    asum,
    dtype_for,
    matmul,
    seeded_normal,
    silu,
    silu_backward,
    transpose,
)

LORA_INIT_STD = 0.02


class Status(enum.IntEnum):
    KILLED = 0
    ACTIVE = 1


class Kind(enum.IntEnum):
    LORA = 0
    ADAPTER = 1


# -- LoRA -----------------------------------------------------------------------

@dataclass
class LoraProjection:
    down: np.ndarray  # [r, d]
    up: np.ndarray  # [r, d]
    alpha: float = 1.0

    @property
    def rank(self) -> int:
        return self.down.shape[0]

    def _check(self, h: np.ndarray) -> None:
        if self.down.shape != self.up.shape or self.down.ndim != 2:
            raise ShapeError(f"LoRA factors {self.down.shape} / {self.up.shape} must both be [r, d]")
        if h.shape[-1] != self.down.shape[1]:
            raise ShapeError(f"input width {h.shape[-1]} != LoRA width {self.down.shape[1]}")


def lora_delta(h: np.ndarray, p: LoraProjection) -> np.ndarray:
    """``alpha * (h W_down^T) W_up``."""
    p._check(h)
    u = matmul(h, transpose(p.down))
    add_flops(u.size)
    return matmul(u * p.alpha, p.up)


def lora_backward(
    h: np.ndarray, ddelta: np.ndarray, p: LoraProjection
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(grad_up, grad_down, dh)``; ``dh`` is the LoRA branch only."""
    p._check(h)
    if ddelta.shape != h.shape[:-1] + (p.up.shape[1],):
        raise ShapeError(f"delta gradient shape {ddelta.shape} does not match input {h.shape}")
    rows_h = h.reshape(-1, h.shape[-1])
    rows_g = ddelta.reshape(-1, ddelta.shape[-1])
    u = matmul(rows_h, transpose(p.down)) * p.alpha
    grad_up = matmul(transpose(u), rows_g)
    du = matmul(rows_g, transpose(p.up)) * p.alpha
    grad_down = matmul(transpose(du), rows_h)
    dh = matmul(du, p.down).reshape(h.shape)
    add_flops(2 * u.size)
    return grad_up, grad_down, dh


# -- serial adapter -------------------------------------------------------------

@dataclass
class SerialAdapter:
    wa: np.ndarray  # [d, m]
    ba: np.ndarray  # [m]
    wb: np.ndarray  # [m, d]
    bb: np.ndarray  # [d]

    def _check(self, h: np.ndarray) -> None:
        d, m = self.wa.shape
        if self.ba.shape != (m,) or self.wb.shape != (m, d) or self.bb.shape != (d,):
            raise ShapeError("inconsistent adapter tensor shapes")
        if h.shape[-1] != d:
            raise ShapeError(f"input width {h.shape[-1]} != adapter width {d}")


def adapter_delta(h: np.ndarray, m: SerialAdapter) -> np.ndarray:
    """The adapter branch ``silu(h W_a + b_a) W_b + b_b`` without the residual."""
    m._check(h)
    pre = matmul(h, m.wa) + m.ba
    out = matmul(silu(pre), m.wb) + m.bb
    add_flops(pre.size + out.size)
    return out


def adapter_forward(h: np.ndarray, m: SerialAdapter) -> np.ndarray:
    return h + adapter_delta(h, m)


def adapter_delta_backward(h: np.ndarray, dout: np.ndarray, m: SerialAdapter):
    """Gradients of the branch: ``(dict of param grads, dh_branch)``."""
    m._check(h)
    rows_h = h.reshape(-1, h.shape[-1])
    rows_g = dout.reshape(-1, dout.shape[-1])
    pre = matmul(rows_h, m.wa) + m.ba
    act = silu(pre)
    g_wb = matmul(transpose(act), rows_g)
    g_bb = asum(rows_g, axis=0)
    dact = matmul(rows_g, transpose(m.wb))
    dpre = silu_backward(pre, dact)
    g_wa = matmul(transpose(rows_h), dpre)
    g_ba = asum(dpre, axis=0)
    dh = matmul(dpre, transpose(m.wa)).reshape(h.shape)
    add_flops(pre.size + rows_g.size + dpre.size)
    return {"wa": g_wa, "ba": g_ba, "wb": g_wb, "bb": g_bb}, dh


def adapter_backward(h: np.ndarray, dout: np.ndarray, m: SerialAdapter):
    """Full adapter (residual included): ``(param grads, dh)``."""
    grads, dh = adapter_delta_backward(h, dout, m)
    return grads, dout + dh


# -- modules --------------------------------------------------------------------

@dataclass
class PeftModule:
    kind: Kind
    layer: int
    lora: dict[str, LoraProjection] | None = None
    adapter: SerialAdapter | None = None
    status: Status = Status.ACTIVE

    def parameters(self) -> list[np.ndarray]:
        """Learnable tensors in a fixed order (also the checkpoint order)."""
        if self.kind is Kind.LORA:
            return [t for key in "qkv" for t in (self.lora[key].down, self.lora[key].up)]
        a = self.adapter
        return [a.wa, a.ba, a.wb, a.bb]

    @property
    def active(self) -> bool:
        return self.status is Status.ACTIVE

    def forward(self, x: np.ndarray) -> list[np.ndarray]:
        """Deltas for this module's injection site: three for LoRA, one for an adapter."""
        if self.kind is Kind.LORA:
            return [lora_delta(x, self.lora[key]) for key in "qkv"]
        return [adapter_delta(x, self.adapter)]

    def backward(self, x: np.ndarray, douts: list[np.ndarray]) -> tuple[list[np.ndarray], np.ndarray]:
        """Parameter gradients (in :meth:`parameters` order) and the branch's input gradient."""
        if self.kind is Kind.LORA:
            grads: list[np.ndarray] = []
            dh = None
            for key, g in zip("qkv", douts):
                g_up, g_down, dh_k = lora_backward(x, g, self.lora[key])
                grads.extend([g_down, g_up])
                dh = dh_k if dh is None else dh + dh_k
            return grads, dh
        g, dh = adapter_delta_backward(x, douts[0], self.adapter)
        return [g["wa"], g["ba"], g["wb"], g["bb"]], dh


def init_lora_module(layer: int, d: int, rank: int, alpha: float, rng: Rng, precision: int = 32) -> PeftModule:
    dtype = dtype_for(precision)
    proj = {}
    for key in "qkv":
        down = (seeded_normal(rng, (rank, d), precision) * LORA_INIT_STD).astype(dtype)
        proj[key] = LoraProjection(down=down, up=np.zeros((rank, d), dtype=dtype), alpha=alpha)
    return PeftModule(Kind.LORA, layer, lora=proj)


def init_adapter_module(layer: int, d: int, dim: int, rng: Rng, precision: int = 32) -> PeftModule:
    dtype = dtype_for(precision)
    wa = (seeded_normal(rng, (d, dim), precision) * (1.0 / math.sqrt(d))).astype(dtype)
    adapter = SerialAdapter(
        wa=wa,
        ba=np.zeros(dim, dtype=dtype),
        wb=np.zeros((dim, d), dtype=dtype),
        bb=np.zeros(d, dtype=dtype),
    )
    return PeftModule(Kind.ADAPTER, layer, adapter=adapter)


def init_pool(
    kind: Kind | str,
    n_layers: int,
    d: int,
    *,
    rank: int = 4,
    alpha: float = 1.0,
    adapter_dim: int = 16,
    seed: int = 0,
    precision: int = 32,
) -> list[PeftModule]:
    """One module per decoder block, drawn from a single seeded stream in layer order."""
    kind = Kind[kind.upper()] if isinstance(kind, str) else Kind(kind)
    rng = Rng(seed)
    if kind is Kind.LORA:
        return [init_lora_module(i, d, rank, alpha, rng, precision) for i in range(n_layers)]
    return [init_adapter_module(i, d, adapter_dim, rng, precision) for i in range(n_layers)]


def module_l2_norm(m: PeftModule) -> float:
    """L2 norm over every learnable scalar of the module, accumulated in float64."""
    flat = np.concatenate([p.reshape(-1) for p in m.parameters()]).astype(np.float64)
    add_flops(2 * flat.size + 1)
    return float(math.sqrt(float(asum(flat * flat)))) if flat.size else 0.0


def pool_norms(pool: list[PeftModule]) -> list[float]:
    return [module_l2_norm(m) for m in pool]


# -- AdamW ----------------------------------------------------------------------

def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """``base_lr * 0.5 * (1 + cos(pi * step / total_steps))``; zero at the end."""
    if total_steps <= 0:
        return base_lr
    step = min(max(step, 0), total_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class OptimState:
    base_lr: float = 3e-4
    total_steps: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


ADAMW_FLOPS_PER_SCALAR = 14


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray], s: OptimState, schedule_step: int | None = None) -> None:
    """One in-place AdamW update with bias correction and decoupled weight decay.

    The learning rate follows the cosine schedule evaluated at
    ``schedule_step`` (defaults to this state's own step count before the
    update). Bias correction always uses the state's own counter, so a module
    that sat out some steps is corrected for the steps it actually took.
    """
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"param {p.shape} vs grad {g.shape}")
    if not s.m:
        s.m = [np.zeros_like(p) for p in params]
        s.v = [np.zeros_like(p) for p in params]
    lr = cosine_lr(s.base_lr, s.t if schedule_step is None else schedule_step, s.total_steps)
    s.t += 1
    b1, b2 = s.betas
    c1 = 1.0 - b1**s.t
    c2 = 1.0 - b2**s.t
    for p, g, m, v in zip(params, grads, s.m, s.v):
        add_flops(ADAMW_FLOPS_PER_SCALAR * p.size)
        if s.weight_decay:
            p *= 1.0 - lr * s.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + s.eps)
