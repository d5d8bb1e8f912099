"""Dense kernels with hand-written backward passes and a portable seeded RNG.

Every reduction accumulates in ascending index order in the working precision,
so two evaluations on identical inputs are bit-identical regardless of how
the surrounding code is arranged (split runtime vs. single process).
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Callable, Iterator, Sequence

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class InputError(ValueError):
    """An argument is outside the operation's domain (bad token id, overlong sequence...)."""


def dtype_for(precision: int) -> np.dtype:
    if precision == 32:
        return np.dtype(np.float32)
    if precision == 64:
        return np.dtype(np.float64)
    raise ValueError(f"precision must be 32 or 64, got {precision}")


# -- FLOP tally --------------------------------------------------------------

_tally: contextvars.ContextVar[Callable[[int], None] | None] = contextvars.ContextVar(
    "dlora_flop_tally", default=None
)


@contextlib.contextmanager
def counting(sink: Callable[[int], None] | None) -> Iterator[None]:
    """Route FLOPs of every kernel called inside the block to ``sink``."""
    token = _tally.set(sink)
    try:
        yield
    finally:
        _tally.reset(token)


def add_flops(n: int) -> None:
    sink = _tally.get()
    if sink is not None and n:
        sink(int(n))


def matmul_flops(m: int, k: int, n: int) -> int:
    """Multiply-add convention: one multiply and one add per inner-product term."""
    return 2 * m * k * n


# -- reductions ---------------------------------------------------------------

def asum(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Sum along ``axis`` accumulating strictly in ascending index order."""
    return np.take(np.add.accumulate(x, axis=axis), -1, axis=axis)


def transpose(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# -- matmul -----------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched ``a @ b`` with the inner sum taken in ascending order.

    Leading dimensions broadcast like ``np.matmul``. Each term is rounded to
    the working precision before it is added, so results are reproducible
    bit-for-bit but generally differ from BLAS in the last ulp.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    k = a.shape[-1]
    if b.shape[-2] != k:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    m, n = a.shape[-2], b.shape[-1]
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"batch dimensions differ: {a.shape} @ {b.shape}") from exc
    add_flops(math.prod(batch) * matmul_flops(m, k, n))
    if k == 0:
        return np.zeros(batch + (m, n), dtype=np.result_type(a, b))
    out = a[..., :, 0:1] * b[..., 0:1, :]
    for p in range(1, k):
        out += a[..., :, p : p + 1] * b[..., p : p + 1, :]
    return out


# -- softmax ------------------------------------------------------------------

def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row softmax over the last axis, stabilised by subtracting the row max."""
    add_flops(5 * x.size)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / asum(e)[..., None]


def softmax_rows_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    add_flops(4 * y.size)
    inner = asum(dy * y)[..., None]
    return y * (dy - inner)


# -- rmsnorm ------------------------------------------------------------------

def rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """``gain * x / sqrt(mean(x**2) + eps)`` over the last axis."""
    d = x.shape[-1]
    add_flops(4 * x.size + 3 * (x.size // max(d, 1)))
    ms = asum(x * x) / d
    rms = np.sqrt(ms + eps)
    return gain * (x / rms[..., None])


def rmsnorm_backward(
    x: np.ndarray, gain: np.ndarray, dy: np.ndarray, eps: float = 1e-5
) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(dx, dgain)``; ``dgain`` is summed over all leading axes."""
    d = x.shape[-1]
    rows = x.size // max(d, 1)
    add_flops(9 * x.size + 4 * rows)
    ms = asum(x * x) / d
    rms = np.sqrt(ms + eps)[..., None]
    xhat = x / rms
    gdy = gain * dy
    proj = asum(gdy * xhat)[..., None] / d
    dx = (gdy - xhat * proj) / rms
    dgain = asum((dy * xhat).reshape(-1, d), axis=0)
    return dx, dgain


# -- activations --------------------------------------------------------------

def silu(x: np.ndarray) -> np.ndarray:
    add_flops(4 * x.size)
    return x / (1 + np.exp(-x))


def silu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    add_flops(7 * x.size)
    s = 1 / (1 + np.exp(-x))
    return dy * (s * (1 + x * (1 - s)))


# -- loss ---------------------------------------------------------------------

IGNORE = -1


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean token cross-entropy and its gradient w.r.t. ``logits``.

    ``logits`` is ``[..., V]`` and ``targets`` the matching integer ids; a
    target of ``IGNORE`` (-1) excludes the position from both the mean and the
    gradient. The scalar loss is evaluated in float64 so tiny values such as
    ``-log(sigmoid(20))`` survive 32-bit logits; the gradient stays in the
    logits' precision.
    """
    vocab = logits.shape[-1]
    flat = logits.reshape(-1, vocab)
    tgt = np.asarray(targets).reshape(-1)
    if tgt.shape[0] != flat.shape[0]:
        raise ShapeError(f"{flat.shape[0]} logit rows but {tgt.shape[0]} targets")
    valid = tgt != IGNORE
    if np.any((tgt[valid] < 0) | (tgt[valid] >= vocab)):
        raise InputError(f"target outside vocabulary [0, {vocab})")
    count = int(valid.sum())
    if count == 0:
        raise InputError("no scored positions")
    rows = np.nonzero(valid)[0]
    picked = tgt[valid]

    z = flat.astype(np.float64)
    z = z - np.max(z, axis=-1, keepdims=True)
    lse = np.log(asum(np.exp(z)))
    nll = lse[rows] - z[rows, picked]
    loss = float(asum(nll, axis=0)) / count

    probs = softmax_rows(flat)
    grad = probs.copy()
    grad[rows, picked] -= 1
    grad[~valid] = 0
    grad /= count
    add_flops(2 * flat.size + 3 * count)
    return loss, grad.reshape(logits.shape)


# -- RNG ----------------------------------------------------------------------

def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step; returns ``(new_state, output_word)``."""
    state = (state + GOLDEN_GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


class Rng:
    """SplitMix64 stream. Vectorised draws match the scalar stream word for word."""

    def __init__(self, seed: int) -> None:
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state, word = splitmix64(self.state)
        return word

    def words(self, n: int) -> np.ndarray:
        idx = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + idx * np.uint64(GOLDEN_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GOLDEN_GAMMA) & MASK64
        return z

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1): the top 53 bits of each word times 2**-53."""
        return (self.words(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def below(self, n: int) -> int:
        """Integer in [0, n) (modulo reduction; bias is irrelevant at these sizes)."""
        return self.next_u64() % n

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of ``range(n)``."""
        out = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    def normal(self, n: int) -> np.ndarray:
        """Box-Muller over consecutive uniform pairs; an odd tail drops its sine half."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1, u2 = u[0::2], u[1::2]
        r = np.sqrt(-2.0 * np.log1p(-u1))
        theta = 2.0 * math.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n]


def seeded_normal(rng: Rng, dims: Sequence[int], precision: int = 32) -> np.ndarray:
    """Standard-normal tensor filled in row-major order."""
    dims = tuple(int(d) for d in dims)
    return rng.normal(math.prod(dims)).reshape(dims).astype(dtype_for(precision))
