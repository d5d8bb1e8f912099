"""Backbone ("DLBK") and PEFT ("DLPF") checkpoint files.

Both use the wire tensor encoding from :mod:`dlora.protocol`, little-endian
throughout.
"""

from __future__ import annotations

import struct
from pathlib import Path

from .model import Backbone, DecoderBlock, ModelConfig
from .peft import Kind, LoraProjection, PeftModule, SerialAdapter, Status
from .protocol import ProtocolError, Reader, decode_tensor, encode_tensor

BACKBONE_MAGIC = b"DLBK"
PEFT_MAGIC = b"DLPF"
VERSION = 1
_MODEL_FMT = struct.Struct("<7IQ")


class CheckpointError(ValueError):
    pass


def backbone_bytes(bb: Backbone) -> bytes:
    c = bb.config
    head = BACKBONE_MAGIC + bytes([VERSION]) + _MODEL_FMT.pack(
        c.vocab, c.d_model, c.n_heads, c.d_ff, c.n_layers, c.max_seq, c.precision, c.seed
    )
    return head + b"".join(encode_tensor(t) for t in bb.tensors())


def backbone_from_bytes(buf: bytes) -> Backbone:
    r = Reader(buf)
    try:
        if bytes(r.take(4)) != BACKBONE_MAGIC:
            raise CheckpointError("not a backbone checkpoint (bad magic)")
        if r.u8() != VERSION:
            raise CheckpointError("unsupported backbone checkpoint version")
        config = ModelConfig(*r.unpack(_MODEL_FMT.format[1:]))
        tensors = [decode_tensor(r) for _ in range(1 + 8 * config.n_layers + 3)]
        r.done()
    except ProtocolError as exc:
        raise CheckpointError(f"corrupt backbone checkpoint: {exc}") from None
    it = iter(tensors)
    embedding = next(it)
    blocks = [DecoderBlock(*(next(it) for _ in DecoderBlock.FIELDS)) for _ in range(config.n_layers)]
    final_gain, lm_head, positions = next(it), next(it), next(it)
    bb = Backbone(config, embedding, blocks, final_gain, lm_head, positions)
    _check_backbone(bb)
    return bb


def _check_backbone(bb: Backbone) -> None:
    c = bb.config
    d, f = c.d_model, c.d_ff
    block = [(d, d)] * 4 + [(d, f), (f, d), (d,), (d,)]
    want = [(c.vocab, d)] + block * c.n_layers + [(d,), (d, c.vocab), (c.max_seq, d)]
    got = [t.shape for t in bb.tensors()]
    if got != want:
        raise CheckpointError("backbone tensor shapes do not match its config")
    for t in bb.tensors():
        if t.dtype != c.dtype:
            raise CheckpointError(f"tensor dtype {t.dtype} does not match precision {c.precision}")


def save_backbone(bb: Backbone, path: str | Path) -> None:
    Path(path).write_bytes(backbone_bytes(bb))


def load_backbone(path: str | Path) -> Backbone:
    return backbone_from_bytes(Path(path).read_bytes())


def peft_bytes(pool: list[PeftModule]) -> bytes:
    out = [PEFT_MAGIC, bytes([VERSION]), struct.pack("<I", len(pool))]
    for m in pool:
        out.append(bytes([int(m.kind), int(m.status)]))
        out.extend(encode_tensor(t) for t in m.parameters())
    return b"".join(out)


def peft_from_bytes(buf: bytes, alpha: float = 1.0) -> list[PeftModule]:
    """``alpha`` is run configuration, not stored in the file."""
    r = Reader(buf)
    pool = []
    try:
        if bytes(r.take(4)) != PEFT_MAGIC:
            raise CheckpointError("not a PEFT checkpoint (bad magic)")
        if r.u8() != VERSION:
            raise CheckpointError("unsupported PEFT checkpoint version")
        for layer in range(r.u32()):
            kind, status = Kind(r.u8()), Status(r.u8())
            if kind is Kind.LORA:
                proj = {}
                for key in "qkv":
                    down, up = decode_tensor(r), decode_tensor(r)
                    proj[key] = LoraProjection(down.copy(), up.copy(), alpha)
                pool.append(PeftModule(kind, layer, lora=proj, status=status))
            else:
                wa, ba, wb, bb = (decode_tensor(r).copy() for _ in range(4))
                pool.append(PeftModule(kind, layer, adapter=SerialAdapter(wa, ba, wb, bb), status=status))
        r.done()
    except (ProtocolError, ValueError) as exc:
        raise CheckpointError(f"corrupt PEFT checkpoint: {exc}") from None
    return pool


def save_peft(pool: list[PeftModule], path: str | Path) -> None:
    Path(path).write_bytes(peft_bytes(pool))


def load_peft(path: str | Path, alpha: float = 1.0) -> list[PeftModule]:
    return peft_from_bytes(Path(path).read_bytes(), alpha)
