"""Cloud and edge state machines, the single-process reference trainer, and
the session driver.

Per training step the edge embeds the batch and ships the activations; the
cloud runs the frozen blocks and, at every block whose PEFT module takes part,
asks the edge for the module's delta. Logits go back to the edge, which owns
the labels and the loss; the cloud back-propagates and, at every active
module, hands the site gradient to the edge, which updates the module and
returns the branch's input gradient.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import protocol as P
from .config import RunConfig
from .costs import CostLedger
from .data import Sample, batches, gen_dataset
from .model import Backbone, embed, forward_hidden, backward_hidden
from .numeric import IGNORE, Rng, cross_entropy
from .peft import Kind, OptimState, PeftModule, Status, adamw_step, init_pool, pool_norms
from .scheduler import KRState, Mode

log = logging.getLogger(__name__)

PEFT_SALT = 0x5045465400000000
EVAL_SALT = 0x4556414C00000000
SHUFFLE_SALT = 0x5348554600000000


class FrozenPolicy(enum.IntEnum):
    SKIP_FROZEN = 0
    COMPUTE_FROZEN_ON_EDGE = 1


class Pass(enum.Enum):
    TRAIN = P.Site.EMBED_TRAIN
    EVAL = P.Site.EMBED_EVAL
    EVAL_ALL = P.Site.EMBED_EVAL_ALL


class RunAbort(RuntimeError):
    """Training cannot continue (non-finite loss, peer failure...)."""


def module_runs_forward(status: Status, policy: FrozenPolicy, kind: Pass) -> bool:
    if kind is Pass.EVAL_ALL:
        return True
    return status == Status.ACTIVE or policy is FrozenPolicy.COMPUTE_FROZEN_ON_EDGE


def module_runs_backward(status: Status, kind: Pass) -> bool:
    # Killed modules are constants in backward, whatever the frozen policy.
    return kind is Pass.TRAIN and status == Status.ACTIVE


def _site_for(kind: Kind) -> P.Site:
    return P.Site.QKV_INPUT if kind is Kind.LORA else P.Site.MLP_INPUT


# -- edge-side PEFT compute -----------------------------------------------------

class PeftPool:
    """The edge's module pool with optimizer state and the per-step input cache."""

    def __init__(self, modules: list[PeftModule], optim: OptimState, ledger: CostLedger | None = None) -> None:
        self.modules = modules
        self.states = [
            OptimState(optim.base_lr, optim.total_steps, optim.betas, optim.eps, optim.weight_decay)
            for _ in modules
        ]
        self.ledger = ledger
        self.cache: dict[int, np.ndarray] = {}
        self.last_grads: dict[int, list[np.ndarray]] = {}

    @property
    def kind(self) -> Kind:
        return self.modules[0].kind

    @property
    def status(self) -> list[Status]:
        return [m.status for m in self.modules]

    def set_status(self, status) -> None:
        if len(status) != len(self.modules):
            raise P.ProtocolError(f"status vector of length {len(status)} for {len(self.modules)} modules")
        for m, s in zip(self.modules, status):
            m.status = Status(int(s))

    def _tally(self, tag: str):
        import contextlib

        return self.ledger.tally(tag, "edge") if self.ledger else contextlib.nullcontext()

    def forward(self, layer: int, x: np.ndarray, kind: Pass) -> list[np.ndarray]:
        m = self.modules[layer]
        if module_runs_backward(m.status, kind):
            self.cache[layer] = x
        with self._tally("peft"):
            return m.forward(x)

    def backward(self, layer: int, douts: list[np.ndarray], schedule_step: int, apply: bool = True) -> np.ndarray:
        if layer not in self.cache:
            raise P.ProtocolError(f"backward for layer {layer} without a cached forward")
        x = self.cache.pop(layer)
        m = self.modules[layer]
        with self._tally("peft"):
            grads, dx = m.backward(x, douts)
        if apply:
            with self._tally("optim"):
                adamw_step(m.parameters(), grads, self.states[layer], schedule_step)
        else:
            self.last_grads[layer] = grads
        return dx

    def norms(self) -> list[float]:
        with self._tally("norm"):
            return pool_norms(self.modules)


class LocalProvider:
    """Calls the pool directly; the single-process twin of the wire choreography."""

    def __init__(self, pool: PeftPool, policy: FrozenPolicy, kind: Pass, step: int = 0, apply: bool = True) -> None:
        self.pool, self.policy, self.kind, self.step, self.apply = pool, policy, kind, step, apply
        self.site = _site_for(pool.kind)

    def _fwd(self, layer, x):
        m = self.pool.modules[layer]
        if not module_runs_forward(m.status, self.policy, self.kind):
            return None
        return self.pool.forward(layer, x, self.kind)

    def _bwd(self, layer, douts):
        m = self.pool.modules[layer]
        if not module_runs_backward(m.status, self.kind):
            return None
        return self.pool.backward(layer, douts, self.step, self.apply)

    def qkv_delta(self, layer, a):
        return self._fwd(layer, a) if self.site is P.Site.QKV_INPUT else None

    def mlp_delta(self, layer, y):
        if self.site is not P.Site.MLP_INPUT:
            return None
        out = self._fwd(layer, y)
        return None if out is None else out[0]

    def qkv_backward(self, layer, dq, dk, dv):
        return self._bwd(layer, [dq, dk, dv]) if self.site is P.Site.QKV_INPUT else None

    def mlp_backward(self, layer, dy):
        return self._bwd(layer, [dy]) if self.site is P.Site.MLP_INPUT else None


class RemoteProvider:
    """Cloud-side provider: every delta and branch gradient is a round trip to the edge."""

    def __init__(self, channel: P.Channel, status: list[Status], policy: FrozenPolicy, kind: Pass, peft_kind: Kind, dtype) -> None:
        self.channel, self.status, self.policy, self.kind = channel, status, policy, kind
        self.site = _site_for(peft_kind)
        self.dtype = dtype

    def _fwd(self, layer, x, n_out):
        if not module_runs_forward(self.status[layer], self.policy, self.kind):
            return None
        self.channel.send(P.FwdActivation(layer, self.site, x))
        msg = self.channel.expect(P.FwdDelta, layer)
        if len(msg.tensors) != n_out:
            raise P.ProtocolError(f"expected {n_out} delta tensors, got {len(msg.tensors)}")
        return [t.astype(self.dtype, copy=False) for t in msg.tensors]

    def _bwd(self, layer, douts):
        if not module_runs_backward(self.status[layer], self.kind):
            return None
        self.channel.send(P.BwdGrad(layer, self.site, douts))
        return self.channel.expect(P.BwdDeltaGrad, layer).tensor.astype(self.dtype, copy=False)

    def qkv_delta(self, layer, a):
        return self._fwd(layer, a, 3) if self.site is P.Site.QKV_INPUT else None

    def mlp_delta(self, layer, y):
        if self.site is not P.Site.MLP_INPUT:
            return None
        out = self._fwd(layer, y, 1)
        return None if out is None else out[0]

    def qkv_backward(self, layer, dq, dk, dv):
        return self._bwd(layer, [dq, dk, dv]) if self.site is P.Site.QKV_INPUT else None

    def mlp_backward(self, layer, dy):
        return self._bwd(layer, [dy]) if self.site is P.Site.MLP_INPUT else None


def _check_shape(t: np.ndarray, shape: tuple, what: str) -> None:
    if t.shape != shape:
        raise P.ProtocolError(f"{what} has shape {t.shape}, expected {shape}")


# -- placement ----------------------------------------------------------------

@dataclass
class EmbeddingLayer:
    """The slice of the backbone that lives on the edge."""

    config: object
    embedding: np.ndarray
    positions: np.ndarray

    @classmethod
    def from_backbone(cls, bb: Backbone) -> "EmbeddingLayer":
        return cls(bb.config, bb.embedding, bb.positions)


def session_config(cfg: RunConfig) -> P.SessionConfig:
    m = cfg.model
    return P.SessionConfig(
        vocab=m.vocab, d_model=m.d_model, n_heads=m.n_heads, d_ff=m.d_ff, n_layers=m.n_layers,
        max_seq=m.max_seq, precision=m.precision, model_seed=m.seed,
        peft_kind=int(Kind[cfg.peft.upper()]), lora_rank=cfg.lora_rank, adapter_dim=cfg.adapter_dim,
        lora_alpha=cfg.lora_alpha, mode=int(Mode[cfg.mode.upper()]), budget=cfg.budget,
        quant_bits=cfg.quant_bits, frozen_policy=int(FrozenPolicy[cfg.frozen_policy.upper()]),
    )


def _finite_scores(row: list[float]) -> list:
    return [s if math.isfinite(s) else "inf" for s in row]


# -- cloud ----------------------------------------------------------------------

class CloudNode:
    """Frozen blocks + LM head, the KR scheduler, and nothing the user owns."""

    def __init__(self, backbone: Backbone, channel: P.Channel, ledger: CostLedger | None = None) -> None:
        self.backbone = backbone
        self.channel = channel
        self.ledger = ledger or CostLedger("cloud")
        channel.ledger = self.ledger
        self.session: P.SessionConfig | None = None
        self.scheduler: KRState | None = None
        self.status: list[Status] = []
        self.last_norms: list[float] | None = None
        self.passes = 0

    def _configure(self, s: P.SessionConfig) -> None:
        c = self.backbone.config
        mine = (c.vocab, c.d_model, c.n_heads, c.d_ff, c.n_layers, c.max_seq, c.precision)
        theirs = (s.vocab, s.d_model, s.n_heads, s.d_ff, s.n_layers, s.max_seq, s.precision)
        if mine != theirs:
            raise P.ProtocolError(f"edge model config {theirs} does not match cloud backbone {mine}")
        if s.quant_bits not in (8, 32) or s.mode not in (0, 1, 2) or s.peft_kind not in (0, 1):
            raise P.ProtocolError("invalid session configuration")
        self.session = s
        self.channel.quant = P.QuantSpec(s.quant_bits)
        self.mode = Mode(s.mode)
        self.policy = FrozenPolicy(s.frozen_policy)
        self.peft_kind = Kind(s.peft_kind)
        self.status = [Status.ACTIVE] * c.n_layers
        if self.mode is not Mode.FT:
            self.scheduler = KRState(c.n_layers, max(1, s.budget), self.mode)

    def serve(self) -> None:
        """Run one session to Shutdown. Any protocol or transport fault aborts it."""
        try:
            self._configure(self.channel.expect(P.Config).session)
            while True:
                msg = self.channel.recv()
                if isinstance(msg, P.FwdActivation) and msg.site in (P.Site.EMBED_TRAIN, P.Site.EMBED_EVAL, P.Site.EMBED_EVAL_ALL):
                    self._pass(msg)
                elif isinstance(msg, P.NormReport) and self.mode is not Mode.FT:
                    self.last_norms = self._norms(msg)
                elif isinstance(msg, P.EpochEnd):
                    self._epoch_end(msg.epoch)
                elif isinstance(msg, P.Shutdown):
                    self.ledger.snapshot("final")
                    return
                else:
                    raise P.ProtocolError(f"cloud: unexpected {type(msg).__name__}")
        finally:
            self.channel.close()

    def _norms(self, msg: P.NormReport) -> list[float]:
        if len(msg.norms) != self.backbone.config.n_layers:
            raise P.ProtocolError("norm report length differs from layer count")
        return list(msg.norms)

    def _pass(self, msg: P.FwdActivation) -> None:
        cfg = self.backbone.config
        kind = Pass(msg.site)
        h0 = msg.tensor.astype(cfg.dtype)
        if h0.ndim != 3 or h0.shape[-1] != cfg.d_model or h0.shape[1] > cfg.max_seq:
            raise P.ProtocolError(f"embedding tensor has shape {h0.shape}")
        provider = RemoteProvider(self.channel, self.status, self.policy, kind, self.peft_kind, cfg.dtype)
        with self.ledger.tally("backbone", "cloud"):
            logits, cache = forward_hidden(h0, self.backbone, provider)
        self.channel.send(P.LogitsToEdge(logits))
        self.passes += 1
        if kind is not Pass.TRAIN:
            return
        grad = self.channel.expect(P.LossGradToCloud)
        if not math.isfinite(grad.loss):
            raise RunAbort(f"edge reported non-finite loss {grad.loss}")
        _check_shape(grad.tensor, logits.shape, "loss gradient")
        with self.ledger.tally("backbone", "cloud"):
            backward_hidden(grad.tensor.astype(cfg.dtype), self.backbone, cache, provider)

    def _epoch_end(self, epoch: int) -> None:
        record: dict = {"epoch": epoch}
        if self.mode is not Mode.FT:
            norms = self._norms(self.channel.expect(P.NormReport))
            if self.last_norms is None:
                raise P.ProtocolError("epoch ended before the initial norm report")
            if epoch == 0:
                status = self.scheduler.pretune_done(self.last_norms, norms)
            else:
                status = self.scheduler.epoch_transition(self.last_norms, norms)
            self.last_norms = norms
            self.status[:] = status
            self.channel.send(P.Command([int(s) for s in status]))
            record["scores"] = _finite_scores(self.scheduler.scores[-1])
            record["threshold"] = _threshold(self.scheduler.scores[-1], self.scheduler.budget)
        record["cloud"] = self.ledger.since_last()
        self.ledger.snapshot(f"epoch{epoch}")
        self.channel.send(P.EpochStats(record))


def _threshold(row: list[float], budget: int):
    """The B-th largest score: the implicit kill threshold for this epoch."""
    ranked = sorted(row, reverse=True)
    t = ranked[min(budget, len(ranked)) - 1]
    return t if math.isfinite(t) else "inf"


# -- edge -----------------------------------------------------------------------

class EdgeNode:
    """Embedding, PEFT modules, optimizer, labels and loss; drives the session."""

    def __init__(self, cfg: RunConfig, embedding: EmbeddingLayer, pool: PeftPool, channel: P.Channel, ledger: CostLedger | None = None) -> None:
        self.cfg = cfg
        self.embedding = embedding
        self.pool = pool
        self.channel = channel
        self.ledger = ledger or CostLedger("edge")
        channel.ledger = self.ledger
        pool.ledger = self.ledger
        channel.quant = P.QuantSpec(cfg.quant_bits)
        self.dtype = cfg.model.dtype

    def handshake(self) -> None:
        self.channel.send(P.Config(session_config(self.cfg)))

    def _forward(self, inputs: np.ndarray, kind: Pass) -> np.ndarray:
        with self.ledger.tally("embed", "edge"):
            h0 = embed(inputs, self.embedding)
        self.channel.send(P.FwdActivation(0, kind.value, h0))
        while True:
            msg = self.channel.recv()
            if isinstance(msg, P.FwdActivation) and msg.site in P.MODULE_SITES:
                if not 0 <= msg.layer_id < len(self.pool.modules):
                    raise P.ProtocolError(f"layer {msg.layer_id} out of range")
                if msg.site is not _site_for(self.pool.kind):
                    raise P.ProtocolError(f"site {msg.site.name} does not match {self.pool.kind.name} modules")
                x = msg.tensor.astype(self.dtype, copy=False)
                _check_shape(x, h0.shape, "module input")
                deltas = self.pool.forward(msg.layer_id, x, kind)
                self.channel.send(P.FwdDelta(msg.layer_id, deltas))
            elif isinstance(msg, P.LogitsToEdge):
                logits = msg.tensor.astype(self.dtype, copy=False)
                _check_shape(logits, h0.shape[:-1] + (self.cfg.model.vocab,), "logits")
                return logits
            else:
                raise P.ProtocolError(f"edge: unexpected {type(msg).__name__} during forward")

    def train_step(self, inputs: np.ndarray, targets: np.ndarray, step: int) -> float:
        logits = self._forward(inputs, Pass.TRAIN)
        with self.ledger.tally("loss", "edge"):
            loss, dlogits = cross_entropy(logits, targets)
        if not math.isfinite(loss):
            raise RunAbort(f"non-finite loss {loss} at step {step}")
        self.channel.send(P.LossGradToCloud(dlogits, loss))
        pending = sorted(self.pool.cache, reverse=True)
        for layer in pending:
            msg = self.channel.expect(P.BwdGrad, layer)
            douts = [g.astype(self.dtype, copy=False) for g in msg.tensors]
            dx = self.pool.backward(layer, douts, step)
            self.channel.send(P.BwdDeltaGrad(layer, dx))
        return loss

    def eval_batch(self, inputs: np.ndarray, targets: np.ndarray, kind: Pass = Pass.EVAL) -> tuple[float, int, int]:
        logits = self._forward(inputs, kind)
        return score_batch(logits, targets)

    def evaluate(self, samples: list[Sample], kind: Pass = Pass.EVAL) -> dict:
        return _evaluate(lambda x, y: self.eval_batch(x, y, kind), samples, self.cfg.batch_size)

    def report_norms(self) -> list[float]:
        norms = self.pool.norms()
        self.channel.send(P.NormReport(norms))
        return norms

    def end_epoch(self, epoch: int) -> tuple[list[float] | None, dict]:
        """Epoch marker, norm report and the scheduler's answer."""
        self.channel.send(P.EpochEnd(epoch))
        norms = None
        if self.cfg.mode != "ft":
            norms = self.report_norms()
            cmd = self.channel.expect(P.Command)
            self.pool.set_status(cmd.status)
        edge = self.ledger.since_last()
        self.ledger.snapshot(f"epoch{epoch}")
        stats = self.channel.expect(P.EpochStats).record
        if stats.get("epoch") != epoch:
            raise P.ProtocolError("epoch stats out of order")
        stats["edge"] = edge
        return norms, stats

    def shutdown(self) -> None:
        self.channel.send(P.Shutdown())
        self.ledger.snapshot("final")


def score_batch(logits: np.ndarray, targets: np.ndarray) -> tuple[float, int, int]:
    loss, _ = cross_entropy(logits, targets)
    mask = targets != IGNORE
    pred = np.argmax(logits, axis=-1)
    return loss, int(np.sum((pred == targets) & mask)), int(mask.sum())


def _evaluate(run_batch: Callable, samples: list[Sample], batch_size: int) -> dict:
    total_loss = 0.0
    correct = count = 0
    size = min(batch_size, len(samples))
    for inputs, targets in batches(samples, size) if size else []:
        loss, c, n = run_batch(inputs, targets)
        total_loss += loss * n
        correct += c
        count += n
    if count == 0:
        return {"loss": None, "accuracy": None, "tokens": 0}
    return {"loss": total_loss / count, "accuracy": correct / count, "tokens": count}


# -- single-process reference -------------------------------------------------

class ReferenceTrainer:
    """Same arithmetic in the same order as the split runtime, no protocol."""

    def __init__(self, backbone: Backbone, pool: PeftPool, policy: FrozenPolicy = FrozenPolicy.SKIP_FROZEN, ledger: CostLedger | None = None) -> None:
        self.backbone, self.pool, self.policy = backbone, pool, policy
        self.ledger = ledger
        pool.ledger = ledger

    def loss_and_grads(self, inputs: np.ndarray, targets: np.ndarray, step: int = 0, apply: bool = True) -> float:
        h0 = embed(inputs, self.backbone)
        provider = LocalProvider(self.pool, self.policy, Pass.TRAIN, step, apply)
        logits, cache = forward_hidden(h0, self.backbone, provider)
        loss, dlogits = cross_entropy(logits, targets)
        if not math.isfinite(loss):
            raise RunAbort(f"non-finite loss {loss} at step {step}")
        backward_hidden(dlogits, self.backbone, cache, provider)
        return loss

    def train_step(self, inputs: np.ndarray, targets: np.ndarray, step: int) -> float:
        return self.loss_and_grads(inputs, targets, step, apply=True)

    def loss(self, inputs: np.ndarray, targets: np.ndarray, kind: Pass = Pass.EVAL) -> float:
        return self.eval_batch(inputs, targets, kind)[0]

    def eval_batch(self, inputs, targets, kind: Pass = Pass.EVAL):
        h0 = embed(inputs, self.backbone)
        logits, _ = forward_hidden(h0, self.backbone, LocalProvider(self.pool, self.policy, kind))
        return score_batch(logits, targets)

    def evaluate(self, samples: list[Sample], batch_size: int, kind: Pass = Pass.EVAL) -> dict:
        return _evaluate(lambda x, y: self.eval_batch(x, y, kind), samples, batch_size)


# -- metrics log ----------------------------------------------------------------

class MetricsLog:
    """Newline-delimited JSON records, optionally mirrored to a file."""

    def __init__(self, path: str | Path | None = None) -> None:
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        self._fh = open(self.path, "w", encoding="utf-8") if self.path else None

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self._fh:
            self._fh.write(json.dumps(record, separators=(",", ":")) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None

    def lines(self) -> list[str]:
        return [json.dumps(r, separators=(",", ":")) for r in self.records]


# -- session driver -----------------------------------------------------------

def make_pool(cfg: RunConfig) -> PeftPool:
    m = cfg.model
    modules = init_pool(
        cfg.peft, m.n_layers, m.d_model, rank=cfg.lora_rank, alpha=cfg.lora_alpha,
        adapter_dim=cfg.adapter_dim, seed=cfg.seed ^ PEFT_SALT, precision=m.precision,
    )
    optim = OptimState(base_lr=cfg.lr, total_steps=cfg.total_steps, weight_decay=cfg.weight_decay)
    return PeftPool(modules, optim)


def make_datasets(cfg: RunConfig) -> tuple[list[Sample], list[Sample]]:
    kw = dict(vocab=cfg.model.vocab, segment_len=cfg.segment_len, seq_len=cfg.model.max_seq)
    train = gen_dataset(cfg.task, cfg.seed, cfg.n_train, **kw)
    heldout = gen_dataset(cfg.task, cfg.seed ^ EVAL_SALT, cfg.n_eval, **kw) if cfg.n_eval else []
    return train, heldout


def resolve_backbone(cfg: RunConfig) -> Backbone:
    from .checkpoint import load_backbone

    if cfg.backbone:
        bb = load_backbone(cfg.backbone)
        if bb.config != cfg.model:
            raise ValueError(f"backbone checkpoint config {bb.config} differs from run config {cfg.model}")
        return bb
    return Backbone.init(cfg.model)


@dataclass
class RunResult:
    log: MetricsLog
    edge: EdgeNode
    cloud_ledger: CostLedger | None = None
    frames: list = field(default_factory=list)


def drive_session(edge: EdgeNode, train: list[Sample], heldout: list[Sample], log_out: MetricsLog) -> MetricsLog:
    """Edge-side main loop: warm-up, E epochs, evaluation, shutdown."""
    cfg = edge.cfg
    shuffle = Rng(cfg.seed ^ SHUFFLE_SALT)
    step = 0
    log_out.write({"event": "config", "config": cfg.loggable()})
    edge.handshake()

    def epoch_batches(n_steps: int):
        out: list = []
        while len(out) < n_steps:
            out.extend(batches(train, cfg.batch_size, shuffle.permutation(len(train))))
        return out[:n_steps]

    def run_epoch(epoch: int, phase: str, n_steps: int) -> None:
        nonlocal step
        status = [int(s) for s in edge.pool.status]
        losses = []
        for inputs, targets in epoch_batches(n_steps):
            loss = edge.train_step(inputs, targets, step)
            losses.append(loss)
            log_out.write({"event": "step", "phase": phase, "epoch": epoch, "step": step, "loss": loss})
            step += 1
        norms, stats = edge.end_epoch(epoch)
        record = {
            "event": "epoch",
            "phase": phase,
            "epoch": epoch,
            "steps": n_steps,
            "mean_loss": sum(losses) / len(losses),
            "last_loss": losses[-1],
            "status": status,
            "n_active": sum(status),
            "next_status": [int(s) for s in edge.pool.status],
        }
        if norms is not None:
            record["norms"] = norms
        for key in ("scores", "threshold"):
            if key in stats:
                record[key] = stats[key]
        record["edge"] = stats["edge"]
        record["cloud"] = stats["cloud"]
        log_out.write(record)

    try:
        if cfg.mode != "ft":
            edge.report_norms()
            run_epoch(0, "warmup", cfg.pretune_steps)
        for epoch in range(1, cfg.epochs + 1):
            run_epoch(epoch, "train", cfg.steps_per_epoch)
        summary: dict = {"event": "summary", "steps": step}
        if heldout:
            run_policy = edge.evaluate(heldout, Pass.EVAL)
            all_modules = edge.evaluate(heldout, Pass.EVAL_ALL)
            summary["eval"] = run_policy
            summary["eval_all_modules"] = all_modules
            summary["frozen_policy_gap"] = all_modules["loss"] - run_policy["loss"]
        edge.shutdown()
        summary["edge"] = edge.ledger.totals()
        log_out.write(summary)
    except Exception as exc:
        log_out.write({"event": "abort", "step": step, "error": f"{type(exc).__name__}: {exc}"})
        edge.channel.close()
        raise
    return log_out


def run_finetune(cfg: RunConfig, backbone: Backbone | None = None, *, capture: list | None = None, timeout: float | None = 600.0) -> RunResult:
    """Both nodes in one process, cloud on a thread; ``transport`` picks queue or TCP loopback."""
    cfg.validate()
    backbone = backbone or resolve_backbone(cfg)
    if backbone.config != cfg.model:
        raise ValueError("backbone config differs from run config")
    train, heldout = make_datasets(cfg)
    cloud_ledger = CostLedger("cloud")
    errors: list[BaseException] = []

    if cfg.transport == "local":
        cloud_end, edge_end = P.local_pair(timeout)
        srv = None
    else:
        srv = P.tcp_listen(cfg.host, 0)
        cloud_end = None
        edge_end = None

    def cloud_main() -> None:
        try:
            end = cloud_end if srv is None else P.tcp_accept(srv, timeout)
            CloudNode(backbone, P.Channel(end, "cloud"), cloud_ledger).serve()
        except BaseException as exc:  # surfaced after join
            errors.append(exc)

    thread = threading.Thread(target=cloud_main, name="dlora-cloud", daemon=True)
    thread.start()
    if srv is not None:
        edge_end = P.tcp_connect(cfg.host, srv.getsockname()[1], timeout)
    edge = EdgeNode(cfg, EmbeddingLayer.from_backbone(backbone), make_pool(cfg), P.Channel(edge_end, "edge", capture=capture))
    log_out = MetricsLog(cfg.output)
    try:
        drive_session(edge, train, heldout, log_out)
    except BaseException as exc:
        thread.join(timeout=5)
        if errors and not isinstance(exc, RunAbort):
            raise errors[0] from exc
        raise
    finally:
        log_out.close()
        if srv is not None:
            srv.close()
    thread.join(timeout=timeout)
    edge.channel.close()
    if errors:
        raise errors[0]
    return RunResult(log_out, edge, cloud_ledger, capture or [])


def serve_cloud(backbone: Backbone, host: str = "127.0.0.1", port: int = P.DEFAULT_PORT, timeout: float | None = None, ready: Callable[[int], None] | None = None) -> CostLedger:
    """Accept one edge and serve its session."""
    srv = P.tcp_listen(host, port)
    try:
        if ready:
            ready(srv.getsockname()[1])
        end = P.tcp_accept(srv, timeout)
        end.sock.settimeout(timeout)
        ledger = CostLedger("cloud")
        CloudNode(backbone, P.Channel(end, "cloud"), ledger).serve()
        return ledger
    finally:
        srv.close()


def run_edge(cfg: RunConfig, embedding_source: Backbone | None = None, *, capture: list | None = None, timeout: float | None = 600.0) -> RunResult:
    """Connect to a running cloud and drive the session from this process."""
    cfg.validate()
    bb = embedding_source or resolve_backbone(cfg)
    train, heldout = make_datasets(cfg)
    end = P.tcp_connect(cfg.host, cfg.port, timeout)
    edge = EdgeNode(cfg, EmbeddingLayer.from_backbone(bb), make_pool(cfg), P.Channel(end, "edge", capture=capture))
    log_out = MetricsLog(cfg.output)
    try:
        drive_session(edge, train, heldout, log_out)
    finally:
        log_out.close()
        edge.channel.close()
    return RunResult(log_out, edge, None, capture or [])
