"""Command-line driver.

    dlora init-backbone --out bb.dlbk
    dlora pretrain-backbone --out bb.dlbk --steps 300
    dlora finetune --backbone bb.dlbk --mode kr --budget 4 --output run.ndjson
    dlora report run.ndjson --out run.csv

Exit status is 0 on success, 2 for an invalid configuration and 1 for any
runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import protocol as P
from .checkpoint import CheckpointError, load_backbone, load_peft, save_backbone, save_peft
from .config import MODES, PEFT_KINDS, POLICIES, TRANSPORTS, ConfigError, RunConfig
from .data import TASKS
from .model import Backbone, ModelConfig
from .pretrain import pretrain_backbone
from .runtime import (
    Pass,
    PeftPool,
    ReferenceTrainer,
    FrozenPolicy,
    make_datasets,
    make_pool,
    resolve_backbone,
    run_edge,
    run_finetune,
    serve_cloud,
)

log = logging.getLogger("dlora")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

MODEL_FLAGS = {
    "vocab": "vocab",
    "d_model": "d_model",
    "n_heads": "n_heads",
    "d_ff": "d_ff",
    "n_layers": "n_layers",
    "max_seq": "max_seq",
    "precision": "precision",
    "model_seed": "seed",
}

RUN_FLAGS = (
    "peft", "lora_rank", "lora_alpha", "adapter_dim", "mode", "budget", "epochs",
    "warmup_steps", "batch_size", "lr", "weight_decay", "quant_bits", "frozen_policy",
    "transport", "host", "port", "task", "n_train", "n_eval", "segment_len", "seed",
    "backbone", "output",
)

CSV_FIELDS = (
    "epoch", "steps", "mean_loss", "last_loss", "n_active", "status",
    "edge_flops", "edge_module_flops", "cloud_flops",
    "bytes_to_cloud", "bytes_to_edge", "module_bytes", "frames",
)


class UsageError(Exception):
    pass


def _model_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--vocab", type=int)
    g.add_argument("--d-model", type=int)
    g.add_argument("--n-heads", type=int)
    g.add_argument("--d-ff", type=int)
    g.add_argument("--n-layers", type=int)
    g.add_argument("--max-seq", type=int)
    g.add_argument("--precision", type=int, choices=(32, 64))
    g.add_argument("--model-seed", type=int)


def _run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with RunConfig fields; flags override it")
    _model_args(p)
    g = p.add_argument_group("run")
    g.add_argument("--peft", choices=PEFT_KINDS)
    g.add_argument("--lora-rank", type=int)
    g.add_argument("--lora-alpha", type=float)
    g.add_argument("--adapter-dim", type=int)
    g.add_argument("--mode", choices=MODES)
    g.add_argument("--budget", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--warmup-steps", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--weight-decay", type=float)
    g.add_argument("--quant-bits", type=int, choices=(8, 32))
    g.add_argument("--frozen-policy", choices=POLICIES)
    g.add_argument("--transport", choices=TRANSPORTS)
    g.add_argument("--host")
    g.add_argument("--port", type=int)
    g.add_argument("--task", choices=TASKS)
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-eval", type=int)
    g.add_argument("--segment-len", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--backbone", help="DLBK checkpoint; a fresh seeded backbone is used if omitted")
    g.add_argument("--output", help="metrics log path (NDJSON)")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    changes = {}
    for flag, name in MODEL_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            changes[f"model.{name}"] = value
    for name in RUN_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            changes[name] = value
    try:
        cfg = cfg.replace(**changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


def _model_config(args: argparse.Namespace) -> ModelConfig:
    changes = {name: getattr(args, flag) for flag, name in MODEL_FLAGS.items() if getattr(args, flag, None) is not None}
    try:
        return ModelConfig(**changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


# -- subcommands ----------------------------------------------------------------

def cmd_init_backbone(args) -> int:
    bb = Backbone.init(_model_config(args))
    save_backbone(bb, args.out)
    log.info("wrote %s", args.out)
    return 0


def cmd_pretrain_backbone(args) -> int:
    config = _model_config(args)
    init = load_backbone(args.init) if args.init else None
    if init is not None and init.config != config:
        raise ConfigError("--init checkpoint config differs from the model flags")
    bb, losses = pretrain_backbone(
        config, task=args.task, steps=args.steps, batch_size=args.batch_size,
        lr=args.lr, seed=args.seed, init=init,
    )
    save_backbone(bb, args.out)
    print(json.dumps({"steps": len(losses), "first_loss": losses[0], "final_loss": losses[-1]}))
    return 0


def cmd_finetune(args) -> int:
    cfg = resolve_config(args)
    result = run_finetune(cfg)
    if args.save_peft:
        save_peft(result.edge.pool.modules, args.save_peft)
    print(json.dumps(result.log.records[-1]))
    return 0


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    backbone = resolve_backbone(cfg)
    pool = make_pool(cfg)
    if args.peft_checkpoint:
        modules = load_peft(args.peft_checkpoint, alpha=cfg.lora_alpha)
        if len(modules) != cfg.model.n_layers or modules[0].kind != pool.kind:
            raise ConfigError("PEFT checkpoint does not match the run config")
        pool = PeftPool(modules, pool.states[0])
    _, heldout = make_datasets(cfg)
    if not heldout:
        raise ConfigError("n_eval must be positive to evaluate")
    trainer = ReferenceTrainer(backbone, pool, FrozenPolicy[cfg.frozen_policy.upper()])
    out = {
        "eval": trainer.evaluate(heldout, cfg.batch_size, Pass.EVAL),
        "eval_all_modules": trainer.evaluate(heldout, cfg.batch_size, Pass.EVAL_ALL),
    }
    print(json.dumps(out))
    return 0


def cmd_serve_cloud(args) -> int:
    backbone = load_backbone(args.backbone) if args.backbone else Backbone.init(_model_config(args))

    def ready(port: int) -> None:
        print(json.dumps({"listening": port}), flush=True)

    ledger = serve_cloud(backbone, args.host, args.port, timeout=args.timeout, ready=ready)
    print(json.dumps(ledger.totals()))
    return 0


def cmd_run_edge(args) -> int:
    cfg = resolve_config(args)
    result = run_edge(cfg)
    if args.save_peft:
        save_peft(result.edge.pool.modules, args.save_peft)
    print(json.dumps(result.log.records[-1]))
    return 0


def epoch_rows(records: list[dict]) -> list[dict]:
    """One CSV row per training epoch (the warm-up epoch is not counted)."""
    from .costs import module_bytes, module_flops

    rows = []
    for r in records:
        if r.get("event") != "epoch" or r.get("phase") != "train":
            continue
        edge, cloud = r["edge"], r["cloud"]
        rows.append({
            "epoch": r["epoch"],
            "steps": r["steps"],
            "mean_loss": r["mean_loss"],
            "last_loss": r["last_loss"],
            "n_active": r["n_active"],
            "status": "".join(str(s) for s in r["status"]),
            "edge_flops": edge["edge_flops"],
            "edge_module_flops": module_flops(edge),
            "cloud_flops": cloud["cloud_flops"],
            "bytes_to_cloud": edge["bytes_to_cloud"],
            "bytes_to_edge": edge["bytes_to_edge"],
            "module_bytes": module_bytes(edge),
            "frames": edge["frames_sent"] + edge["frames_received"],
        })
    return rows


def read_log(path: str | Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    records.append(json.loads(line))
                except ValueError as exc:
                    raise UsageError(f"{path}:{n}: not a JSON record ({exc})") from None
    return records


def cmd_report(args) -> int:
    rows = epoch_rows(read_log(args.log))
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        writer = csv.DictWriter(out, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if args.out:
            out.close()
    return 0


# -- entry ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dlora", description="Split cloud/edge PEFT fine-tuning with Kill and Revive scheduling.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-backbone", help="write a freshly initialised backbone checkpoint")
    _model_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_backbone)

    p = sub.add_parser("pretrain-backbone", help="train the whole backbone monolithically, then save it")
    _model_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--init", help="start from this checkpoint instead of a fresh init")
    p.add_argument("--task", choices=TASKS, default="charlm")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_pretrain_backbone)

    p = sub.add_parser("finetune", help="run both nodes in one process")
    _run_args(p)
    p.add_argument("--save-peft", help="write the trained PEFT pool (DLPF) here")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="held-out loss and token accuracy, no training")
    _run_args(p)
    p.add_argument("--peft-checkpoint", help="DLPF checkpoint to evaluate (fresh init if omitted)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("serve-cloud", help="host the frozen backbone and serve one edge session")
    _model_args(p)
    p.add_argument("--backbone")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=P.DEFAULT_PORT)
    p.add_argument("--timeout", type=float, default=600.0)
    p.set_defaults(func=cmd_serve_cloud)

    p = sub.add_parser("run-edge", help="connect to serve-cloud and drive a session")
    _run_args(p)
    p.add_argument("--save-peft")
    p.set_defaults(func=cmd_run_edge)

    p = sub.add_parser("report", help="flatten a metrics log to per-epoch CSV")
    p.add_argument("log")
    p.add_argument("--out", help="CSV path (stdout if omitted)")
    p.set_defaults(func=cmd_report)
    return parser


def _setup_logging() -> None:
    name = os.environ.get("DLORA_LOG_LEVEL", "error").lower()
    logging.basicConfig(level=LOG_LEVELS.get(name, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"dlora {args.command}: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, P.ProtocolError, OSError, RuntimeError, ValueError) as exc:
        print(f"dlora {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
