"""Binary frames between cloud and edge, the 8-bit tensor quantizer and transports.

Frame layout (little-endian)::

    b"DLOR" | version u8 | msg_type u8 | payload_len u32 | payload

Tensor layout inside payloads::

    dtype u8 (0=f32, 1=f64, 2=int8+scale) | ndim u8 | dims u32 * ndim
    | [scale f32 if dtype 2] | data
"""

from __future__ import annotations

import enum
import json
import logging
import math
import queue
import socket
import struct
from dataclasses import dataclass, field
from typing import Callable, ClassVar

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"DLOR"
VERSION = 1
HEADER = struct.Struct("<4sBBI")
HEADER_SIZE = HEADER.size  # 10
DEFAULT_PORT = 7431
MAX_PAYLOAD = 1 << 28


class ProtocolError(Exception):
    """Malformed or unexpected frame; the session cannot continue."""


class TransportError(ConnectionError):
    """The peer went away or stopped answering."""


class MsgType(enum.IntEnum):
    CONFIG = 1
    FWD_ACTIVATION = 2
    FWD_DELTA = 3
    LOGITS_TO_EDGE = 4
    LOSS_GRAD_TO_CLOUD = 5
    BWD_GRAD = 6
    BWD_DELTA_GRAD = 7
    NORM_REPORT = 8
    COMMAND = 9
    EPOCH_END = 10
    SHUTDOWN = 11
    EPOCH_STATS = 12


class Site(enum.IntEnum):
    QKV_INPUT = 0
    MLP_INPUT = 1
    # FwdActivation carrying the embedding output that opens a pass:
    EMBED_TRAIN = 2  # forward + backward, run status and frozen policy
    EMBED_EVAL = 3  # forward only, run status and frozen policy
    EMBED_EVAL_ALL = 4  # forward only, every module contributes


class DType(enum.IntEnum):
    F32 = 0
    F64 = 1
    Q8 = 2


# -- quantization ---------------------------------------------------------------

@dataclass(frozen=True)
class QuantSpec:
    bits: int = 32

    def __post_init__(self) -> None:
        if self.bits not in (8, 32):
            raise ValueError(f"quantization bits must be 8 or 32, got {self.bits}")

    @property
    def passthrough(self) -> bool:
        return self.bits == 32


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(t: np.ndarray) -> tuple[np.ndarray, np.float32]:
    """Symmetric per-tensor int8: ``scale ~ max|x| / 127``; codes clamp to +-127.

    The scale sits a hair below ``max|x| / 127`` (relative 2**-15, rounded
    toward zero) so the fp32 dequantize rounding cannot push the round-trip
    error past ``max|x| / 254``.
    """
    x = np.asarray(t, dtype=np.float64)
    peak = float(np.max(np.abs(x))) if x.size else 0.0
    target = peak / 127.0 * (1.0 - 2.0**-15)
    scale = np.float32(target)
    if float(scale) > target:
        scale = np.nextafter(scale, np.float32(0))
    if scale == 0:
        return np.zeros(x.shape, dtype=np.int8), np.float32(0.0)
    codes = np.clip(round_half_away(x / np.float64(scale)), -127, 127)
    return codes.astype(np.int8), scale


def dequantize(codes: np.ndarray, scale: np.float32) -> np.ndarray:
    return codes.astype(np.float32) * np.float32(scale)


# -- byte helpers ---------------------------------------------------------------

class Reader:
    """Bounds-checked cursor; every overrun becomes a ProtocolError."""

    def __init__(self, buf: bytes) -> None:
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if n < 0 or self.pos + n > len(self.buf):
            raise ProtocolError(f"truncated payload: need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def u8(self) -> int:
        return self.unpack("B")[0]

    def u32(self) -> int:
        return self.unpack("I")[0]

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise ProtocolError(f"{len(self.buf) - self.pos} trailing bytes in payload")


def encode_tensor(t: np.ndarray, quant: QuantSpec | None = None) -> bytes:
    t = np.asarray(t)
    if t.ndim > 255:
        raise ValueError("too many dimensions")
    if quant is not None and not quant.passthrough:
        codes, scale = quantize(t)
        head = struct.pack(f"<BB{t.ndim}I", DType.Q8, t.ndim, *t.shape)
        return head + struct.pack("<f", scale) + codes.tobytes()
    if t.dtype == np.float32:
        dt = DType.F32
    elif t.dtype == np.float64:
        dt = DType.F64
    else:
        raise ValueError(f"unsupported tensor dtype {t.dtype}")
    head = struct.pack(f"<BB{t.ndim}I", dt, t.ndim, *t.shape)
    return head + np.ascontiguousarray(t).astype(t.dtype.newbyteorder("<"), copy=False).tobytes()


def decode_tensor(r: Reader) -> np.ndarray:
    dt = r.u8()
    if dt not in (0, 1, 2):
        raise ProtocolError(f"unknown tensor dtype {dt}")
    ndim = r.u8()
    dims = r.unpack(f"{ndim}I") if ndim else ()
    n = math.prod(dims)
    if dt == DType.Q8:
        (scale,) = r.unpack("f")
        if not math.isfinite(scale) or scale < 0:
            raise ProtocolError(f"invalid quantization scale {scale}")
        raw = r.take(n)
        codes = np.frombuffer(raw, dtype=np.int8)
        if codes.size and (codes.min() < -127):
            raise ProtocolError("int8 code -128 is outside the symmetric range")
        return dequantize(codes, np.float32(scale)).reshape(dims)
    width = 4 if dt == DType.F32 else 8
    raw = r.take(n * width)
    arr = np.frombuffer(raw, dtype="<f4" if dt == DType.F32 else "<f8").reshape(dims)
    return arr.astype(np.float32 if dt == DType.F32 else np.float64)


# -- messages ---------------------------------------------------------------

@dataclass
class SessionConfig:
    """Everything the cloud must know about a session before the first step."""

    vocab: int
    d_model: int
    n_heads: int
    d_ff: int
    n_layers: int
    max_seq: int
    precision: int
    model_seed: int
    peft_kind: int  # peft.Kind
    lora_rank: int
    adapter_dim: int
    lora_alpha: float
    mode: int  # scheduler.Mode
    budget: int
    quant_bits: int
    frozen_policy: int  # runtime.FrozenPolicy

    _FMT: ClassVar[struct.Struct] = struct.Struct("<7IQBIIdBIBB")

    def pack(self) -> bytes:
        return self._FMT.pack(
            self.vocab, self.d_model, self.n_heads, self.d_ff, self.n_layers, self.max_seq,
            self.precision, self.model_seed, self.peft_kind, self.lora_rank, self.adapter_dim,
            self.lora_alpha, self.mode, self.budget, self.quant_bits, self.frozen_policy,
        )

    @classmethod
    def unpack(cls, r: Reader) -> "SessionConfig":
        return cls(*r.unpack(cls._FMT.format[1:]))


@dataclass
class Config:
    session: SessionConfig
    TYPE: ClassVar[MsgType] = MsgType.CONFIG


@dataclass
class FwdActivation:
    layer_id: int
    site: Site
    tensor: np.ndarray
    TYPE: ClassVar[MsgType] = MsgType.FWD_ACTIVATION


@dataclass
class FwdDelta:
    layer_id: int
    tensors: list[np.ndarray]
    TYPE: ClassVar[MsgType] = MsgType.FWD_DELTA


@dataclass
class LogitsToEdge:
    tensor: np.ndarray
    TYPE: ClassVar[MsgType] = MsgType.LOGITS_TO_EDGE


@dataclass
class LossGradToCloud:
    tensor: np.ndarray
    loss: float
    TYPE: ClassVar[MsgType] = MsgType.LOSS_GRAD_TO_CLOUD


@dataclass
class BwdGrad:
    layer_id: int
    site: Site
    tensors: list[np.ndarray]
    TYPE: ClassVar[MsgType] = MsgType.BWD_GRAD


@dataclass
class BwdDeltaGrad:
    layer_id: int
    tensor: np.ndarray
    TYPE: ClassVar[MsgType] = MsgType.BWD_DELTA_GRAD


@dataclass
class NormReport:
    norms: list[float]
    TYPE: ClassVar[MsgType] = MsgType.NORM_REPORT


@dataclass
class Command:
    status: list[int]
    TYPE: ClassVar[MsgType] = MsgType.COMMAND


@dataclass
class EpochEnd:
    epoch: int
    TYPE: ClassVar[MsgType] = MsgType.EPOCH_END


@dataclass
class Shutdown:
    TYPE: ClassVar[MsgType] = MsgType.SHUTDOWN


@dataclass
class EpochStats:
    """Cloud-side telemetry for the metrics log (scheduler scores, cloud ledger)."""

    record: dict = field(default_factory=dict)
    TYPE: ClassVar[MsgType] = MsgType.EPOCH_STATS


Message = (
    Config | FwdActivation | FwdDelta | LogitsToEdge | LossGradToCloud | BwdGrad
    | BwdDeltaGrad | NormReport | Command | EpochEnd | Shutdown | EpochStats
)

# Bulk tensor traffic; these honour the configured QuantSpec.
QUANTIZED_TYPES = frozenset(
    {MsgType.FWD_ACTIVATION, MsgType.FWD_DELTA, MsgType.LOGITS_TO_EDGE,
     MsgType.LOSS_GRAD_TO_CLOUD, MsgType.BWD_GRAD, MsgType.BWD_DELTA_GRAD}
)


def _tensor_list(tensors: list[np.ndarray], q: QuantSpec | None) -> bytes:
    if len(tensors) > 255:
        raise ValueError("too many tensors")
    return bytes([len(tensors)]) + b"".join(encode_tensor(t, q) for t in tensors)


def _read_tensor_list(r: Reader) -> list[np.ndarray]:
    return [decode_tensor(r) for _ in range(r.u8())]


def _layer(r: Reader) -> int:
    return r.u32()


def encode_payload(msg: Message, quant: QuantSpec | None = None) -> bytes:
    q = quant if msg.TYPE in QUANTIZED_TYPES else None
    if isinstance(msg, Config):
        return msg.session.pack()
    if isinstance(msg, FwdActivation):
        return struct.pack("<IB", msg.layer_id, msg.site) + encode_tensor(msg.tensor, q)
    if isinstance(msg, FwdDelta):
        return struct.pack("<I", msg.layer_id) + _tensor_list(msg.tensors, q)
    if isinstance(msg, LogitsToEdge):
        return encode_tensor(msg.tensor, q)
    if isinstance(msg, LossGradToCloud):
        return struct.pack("<d", msg.loss) + encode_tensor(msg.tensor, q)
    if isinstance(msg, BwdGrad):
        return struct.pack("<IB", msg.layer_id, msg.site) + _tensor_list(msg.tensors, q)
    if isinstance(msg, BwdDeltaGrad):
        return struct.pack("<I", msg.layer_id) + encode_tensor(msg.tensor, q)
    if isinstance(msg, NormReport):
        return bytes([len(msg.norms)]) + struct.pack(f"<{len(msg.norms)}d", *msg.norms)
    if isinstance(msg, Command):
        return bytes([len(msg.status)]) + bytes(int(s) for s in msg.status)
    if isinstance(msg, EpochEnd):
        return struct.pack("<I", msg.epoch)
    if isinstance(msg, Shutdown):
        return b""
    if isinstance(msg, EpochStats):
        return json.dumps(msg.record, separators=(",", ":")).encode()
    raise TypeError(f"not a wire message: {msg!r}")


def encode_frame(msg: Message, quant: QuantSpec | None = None) -> bytes:
    payload = encode_payload(msg, quant)
    return HEADER.pack(MAGIC, VERSION, msg.TYPE, len(payload)) + payload


def _site(value: int, allowed: tuple[Site, ...]) -> Site:
    if value not in {int(s) for s in allowed}:
        raise ProtocolError(f"invalid site {value}")
    return Site(value)


def decode_payload(mtype: int, payload: bytes) -> Message:
    r = Reader(payload)
    try:
        t = MsgType(mtype)
    except ValueError:
        raise ProtocolError(f"unknown message type {mtype}") from None
    if t is MsgType.CONFIG:
        msg = Config(SessionConfig.unpack(r))
    elif t is MsgType.FWD_ACTIVATION:
        layer, site = r.unpack("IB")
        msg = FwdActivation(layer, _site(site, tuple(Site)), decode_tensor(r))
    elif t is MsgType.FWD_DELTA:
        msg = FwdDelta(_layer(r), _read_tensor_list(r))
    elif t is MsgType.LOGITS_TO_EDGE:
        msg = LogitsToEdge(decode_tensor(r))
    elif t is MsgType.LOSS_GRAD_TO_CLOUD:
        (loss,) = r.unpack("d")
        msg = LossGradToCloud(decode_tensor(r), loss)
    elif t is MsgType.BWD_GRAD:
        layer, site = r.unpack("IB")
        msg = BwdGrad(layer, _site(site, (Site.QKV_INPUT, Site.MLP_INPUT)), _read_tensor_list(r))
    elif t is MsgType.BWD_DELTA_GRAD:
        msg = BwdDeltaGrad(_layer(r), decode_tensor(r))
    elif t is MsgType.NORM_REPORT:
        n = r.u8()
        msg = NormReport(list(r.unpack(f"{n}d")))
    elif t is MsgType.COMMAND:
        n = r.u8()
        status = list(r.take(n))
        if any(s > 1 for s in status):
            raise ProtocolError("command status must be 0 or 1")
        msg = Command(status)
    elif t is MsgType.EPOCH_END:
        msg = EpochEnd(r.u32())
    elif t is MsgType.SHUTDOWN:
        msg = Shutdown()
    else:
        try:
            record = json.loads(bytes(r.take(len(payload))).decode())
        except (UnicodeDecodeError, ValueError) as exc:
            raise ProtocolError(f"bad telemetry payload: {exc}") from None
        if not isinstance(record, dict):
            raise ProtocolError("telemetry payload must be an object")
        msg = EpochStats(record)
    r.done()
    return msg


def parse_header(header: bytes) -> tuple[int, int]:
    if len(header) != HEADER_SIZE:
        raise ProtocolError(f"truncated header ({len(header)} bytes)")
    magic, version, mtype, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    if mtype not in {int(m) for m in MsgType}:
        raise ProtocolError(f"unknown message type {mtype}")
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"payload length {length} exceeds limit")
    return mtype, length


def decode_frame(frame: bytes) -> Message:
    mtype, length = parse_header(bytes(frame[:HEADER_SIZE]))
    if len(frame) - HEADER_SIZE != length:
        raise ProtocolError(f"payload length field {length} but {len(frame) - HEADER_SIZE} bytes follow")
    return decode_payload(mtype, bytes(frame[HEADER_SIZE:]))


def frame_type(frame: bytes) -> MsgType:
    return MsgType(frame[5])


# -- transports -------------------------------------------------------------

class Endpoint:
    """One side of an ordered, reliable byte-frame pipe."""

    def send(self, frame: bytes) -> None:
        raise NotImplementedError

    def recv(self) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass


_CLOSED = object()


class QueueEndpoint(Endpoint):
    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, timeout: float | None) -> None:
        self.inbox, self.outbox, self.timeout = inbox, outbox, timeout
        self.closed = False

    def send(self, frame: bytes) -> None:
        if self.closed:
            raise TransportError("endpoint closed")
        self.outbox.put(bytes(frame))

    def recv(self) -> bytes:
        try:
            item = self.inbox.get(timeout=self.timeout)
        except queue.Empty:
            raise TransportError(f"no frame within {self.timeout}s") from None
        if item is _CLOSED:
            self.inbox.put(_CLOSED)
            raise TransportError("peer closed the connection")
        return item

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self.outbox.put(_CLOSED)


def local_pair(timeout: float | None = 120.0) -> tuple[QueueEndpoint, QueueEndpoint]:
    """In-process transport: ``(cloud_end, edge_end)``."""
    a, b = queue.Queue(), queue.Queue()
    return QueueEndpoint(a, b, timeout), QueueEndpoint(b, a, timeout)


def read_frame(read_exact: Callable[[int], bytes]) -> bytes:
    header = read_exact(HEADER_SIZE)
    _, length = parse_header(header)
    return header + read_exact(length)


class TcpEndpoint(Endpoint):
    def __init__(self, sock: socket.socket, timeout: float | None = 120.0) -> None:
        self.sock = sock
        sock.settimeout(timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def _read_exact(self, n: int) -> bytes:
        chunks, got = [], 0
        while got < n:
            try:
                chunk = self.sock.recv(min(n - got, 1 << 20))
            except socket.timeout:
                raise TransportError("timed out waiting for peer") from None
            except OSError as exc:
                raise TransportError(f"connection lost: {exc}") from None
            if not chunk:
                raise TransportError("peer closed the connection")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def send(self, frame: bytes) -> None:
        try:
            self.sock.sendall(frame)
        except OSError as exc:
            raise TransportError(f"connection lost: {exc}") from None

    def recv(self) -> bytes:
        return read_frame(self._read_exact)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def tcp_listen(host: str = "127.0.0.1", port: int = DEFAULT_PORT) -> socket.socket:
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(1)
    return srv


def tcp_accept(srv: socket.socket, timeout: float | None = 120.0) -> TcpEndpoint:
    srv.settimeout(timeout)
    try:
        conn, _ = srv.accept()
    except socket.timeout:
        raise TransportError("no edge connected in time") from None
    return TcpEndpoint(conn, timeout)


def tcp_connect(host: str, port: int, timeout: float | None = 120.0) -> TcpEndpoint:
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise TransportError(f"cannot reach cloud at {host}:{port}: {exc}") from None
    return TcpEndpoint(sock, timeout)


# -- channel ------------------------------------------------------------------

MODULE_SITES = (Site.QKV_INPUT, Site.MLP_INPUT)


def traffic_class(msg: Message) -> str:
    """``module`` for per-PEFT-module round trips, ``base`` for the fixed
    per-step tensors, ``control`` for everything else."""
    if isinstance(msg, FwdActivation):
        return "module" if msg.site in MODULE_SITES else "base"
    if isinstance(msg, (FwdDelta, BwdGrad, BwdDeltaGrad)):
        return "module"
    if isinstance(msg, (LogitsToEdge, LossGradToCloud)):
        return "base"
    return "control"


class Channel:
    """Typed message I/O over an endpoint, with accounting and optional capture.

    ``side`` is ``"cloud"`` or ``"edge"``. Telemetry frames
    (:class:`EpochStats`) are not charged to the ledger.
    """

    def __init__(self, endpoint: Endpoint, side: str, ledger=None, quant: QuantSpec | None = None, capture: list | None = None) -> None:
        if side not in ("cloud", "edge"):
            raise ValueError(side)
        self.endpoint, self.side, self.ledger = endpoint, side, ledger
        self.quant = quant or QuantSpec(32)
        self.capture = capture

    @property
    def outbound(self) -> str:
        return "to_edge" if self.side == "cloud" else "to_cloud"

    @property
    def inbound(self) -> str:
        return "to_cloud" if self.side == "cloud" else "to_edge"

    def _account(self, direction: str, msg: Message, frame: bytes, sent: bool) -> None:
        if self.capture is not None:
            self.capture.append((direction, frame))
        if self.ledger is not None and not isinstance(msg, EpochStats):
            self.ledger.record_frame(direction, len(frame), traffic_class(msg), msg.TYPE.name, sent=sent)

    def send(self, msg: Message) -> None:
        frame = encode_frame(msg, self.quant)
        self._account(self.outbound, msg, frame, sent=True)
        log.debug("%s -> %s (%d bytes)", self.side, msg.TYPE.name, len(frame))
        self.endpoint.send(frame)

    def recv(self) -> Message:
        frame = self.endpoint.recv()
        msg = decode_frame(frame)
        self._account(self.inbound, msg, frame, sent=False)
        return msg

    def expect(self, kind: type, layer: int | None = None):
        msg = self.recv()
        if not isinstance(msg, kind):
            raise ProtocolError(f"{self.side}: expected {kind.__name__}, got {type(msg).__name__}")
        if layer is not None and msg.layer_id != layer:
            raise ProtocolError(f"{self.side}: expected layer {layer}, got {msg.layer_id}")
        return msg

    def close(self) -> None:
        self.endpoint.close()
