"""FLOP and byte accounting for one node.

FLOPs use the multiply-add convention (``2*m*k*n`` per matmul) and one FLOP
per scalar per elementwise op. Bytes are whole encoded frames, headers
included. Counters only ever grow; :meth:`CostLedger.snapshot` marks epoch
boundaries and :meth:`CostLedger.report` turns the marks into per-epoch rows.
"""

from __future__ import annotations

import contextlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterator

from .numeric import counting, matmul_flops
from .protocol import HEADER_SIZE

NODES = ("edge", "cloud")
DIRECTIONS = ("to_cloud", "to_edge")


@dataclass
class CostLedger:
    node: str = "edge"
    edge_flops: int = 0
    cloud_flops: int = 0
    bytes_to_cloud: int = 0
    bytes_to_edge: int = 0
    frames_sent: int = 0
    frames_received: int = 0
    flops_by_tag: Counter = field(default_factory=Counter)
    bytes_by_class: Counter = field(default_factory=Counter)
    bytes_by_type: Counter = field(default_factory=Counter)
    frames_by_type: Counter = field(default_factory=Counter)
    snapshots: list[tuple[str, dict]] = field(default_factory=list)

    def add_flops(self, node: str, n: int, tag: str = "other") -> None:
        if node == "edge":
            self.edge_flops += n
        elif node == "cloud":
            self.cloud_flops += n
        else:
            raise ValueError(f"unknown node {node!r}")
        self.flops_by_tag[f"{node}.{tag}"] += n

    def count_matmul(self, node: str, m: int, k: int, n: int, tag: str = "other") -> None:
        self.add_flops(node, matmul_flops(m, k, n), tag)

    @contextlib.contextmanager
    def tally(self, tag: str, node: str | None = None) -> Iterator[None]:
        """Charge every kernel FLOP inside the block to ``node`` under ``tag``."""
        node = node or self.node
        with counting(lambda n: self.add_flops(node, n, tag)):
            yield

    def record_frame(self, direction: str, encoded_len: int, traffic: str = "other", msg_type: str = "", sent: bool = True) -> None:
        if encoded_len < HEADER_SIZE:
            raise ValueError(f"frame of {encoded_len} bytes is shorter than a header")
        if direction == "to_cloud":
            self.bytes_to_cloud += encoded_len
        elif direction == "to_edge":
            self.bytes_to_edge += encoded_len
        else:
            raise ValueError(f"unknown direction {direction!r}")
        if sent:
            self.frames_sent += 1
        else:
            self.frames_received += 1
        self.bytes_by_class[f"{direction}.{traffic}"] += encoded_len
        if msg_type:
            self.bytes_by_type[msg_type] += encoded_len
            self.frames_by_type[msg_type] += 1

    def totals(self) -> dict:
        """Flat counter dict with a stable key order."""
        out = {
            "edge_flops": self.edge_flops,
            "cloud_flops": self.cloud_flops,
            "bytes_to_cloud": self.bytes_to_cloud,
            "bytes_to_edge": self.bytes_to_edge,
            "frames_sent": self.frames_sent,
            "frames_received": self.frames_received,
        }
        for key in sorted(self.flops_by_tag):
            out[f"flops.{key}"] = self.flops_by_tag[key]
        for key in sorted(self.bytes_by_class):
            out[f"bytes.{key}"] = self.bytes_by_class[key]
        for key in sorted(self.frames_by_type):
            out[f"frames.{key}"] = self.frames_by_type[key]
        return out

    def snapshot(self, label: str) -> dict:
        snap = self.totals()
        self.snapshots.append((label, snap))
        return snap

    def since_last(self) -> dict:
        """Counter deltas since the latest snapshot (or since zero)."""
        base = self.snapshots[-1][1] if self.snapshots else {}
        return delta(self.totals(), base)

    def report(self) -> dict:
        rows = []
        prev: dict = {}
        for label, snap in self.snapshots:
            rows.append({"label": label, **delta(snap, prev)})
            prev = snap
        return {"node": self.node, "totals": self.totals(), "epochs": rows}


def delta(cur: dict, prev: dict) -> dict:
    return {k: v - prev.get(k, 0) for k, v in cur.items()}


def module_bytes(counters: dict) -> int:
    """Both directions of per-module traffic from a totals/delta dict."""
    return sum(v for k, v in counters.items() if k.startswith("bytes.") and k.endswith(".module"))


def module_flops(counters: dict, node: str = "edge") -> int:
    """Edge FLOPs spent on PEFT module math and their optimizer updates."""
    return counters.get(f"flops.{node}.peft", 0) + counters.get(f"flops.{node}.optim", 0)
