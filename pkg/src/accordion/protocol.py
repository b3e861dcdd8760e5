"""Endpoint/UE model-transfer protocol over framed messages.

Every frame is ``u32 body length (big-endian) | u8 tag | body``.  Bodies are
little-endian ``struct`` layouts:

=====  ==============  =====================================================
tag    message         body
=====  ==============  =====================================================
1      ModelRequest    16s model id | u8 scheme | u32 deadline_ms |
                       u64 throughput_bps | u8 has_max_error | f64 max_error |
                       f64 rtt_ms
2      ModelOffer      u32 n | f64 predicted error | f64 predicted transfer_ms |
                       u8 accuracy met | u32 manifest length | manifest
3      ChunkData       one ``.acdn`` chunk record
4      TransferDone    u32 n delivered
5      UpgradeRequest  16s model id | u32 current n | u8 mode (0 error, 1 n) |
                       f64 target error | u32 target n
6      ErrorReply      u16 code | UTF-8 detail
=====  ==============  =====================================================

An all-zero model id in a request means "whatever model the endpoint serves".
"""

from __future__ import annotations

import csv
import io
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field
from fractions import Fraction

from . import wire
from .arch import AccordionModel, DepthConfig, Scheme
from .errors import (
    ConfigError,
    InfeasibleBudgetError,
    IntegrityError,
    ProtocolError,
    UnreachableAccuracyError,
)
from .profile import ProfileTable, select_by_accuracy, select_by_link

PAYLOAD_BITS_PER_PARAM = 32
ANY_MODEL = bytes(16)
MAX_FRAME = 1 << 30

FRAME_HEADER = struct.Struct(">IB")

SCHEME_CODES = {Scheme.COML: 0, Scheme.BLOCKCOML: 1}
SCHEME_FROM_CODE = {v: k for k, v in SCHEME_CODES.items()}

INFEASIBLE = 1
NOT_FOUND = 2
UNREACHABLE = 3
PROTOCOL = 4
BAD_REQUEST = 5


@dataclass(frozen=True)
class ModelRequest:
    TAG = 1
    _S = struct.Struct("<16sBIQBdd")
    model_id: bytes
    scheme: Scheme
    deadline_ms: int
    throughput_bps: int
    max_error: float | None = None
    rtt_ms: float = 0.0

    def body(self) -> bytes:
        has = self.max_error is not None
        return self._S.pack(
            self.model_id, SCHEME_CODES[Scheme.parse(self.scheme)], self.deadline_ms,
            self.throughput_bps, has, self.max_error if has else 0.0, self.rtt_ms,
        )

    @classmethod
    def parse(cls, body: bytes) -> ModelRequest:
        mid, sc, dl, tp, has, err, rtt = _unpack(cls._S, body)
        return cls(mid, _scheme(sc), dl, tp, err if has else None, rtt)


@dataclass(frozen=True)
class ModelOffer:
    TAG = 2
    _S = struct.Struct("<IddBI")
    n: int
    predicted_error: float
    predicted_transfer_ms: float
    accuracy_met: bool
    manifest: bytes

    def body(self) -> bytes:
        head = self._S.pack(
            self.n, self.predicted_error, self.predicted_transfer_ms, self.accuracy_met,
            len(self.manifest),
        )
        return head + self.manifest

    @classmethod
    def parse(cls, body: bytes) -> ModelOffer:
        if len(body) < cls._S.size:
            raise ProtocolError("truncated ModelOffer")
        n, err, ms, met, mlen = cls._S.unpack_from(body)
        manifest = body[cls._S.size:]
        if len(manifest) != mlen:
            raise ProtocolError("ModelOffer manifest length mismatch")
        return cls(n, err, ms, bool(met), bytes(manifest))


@dataclass(frozen=True)
class ChunkData:
    TAG = 3
    record: bytes

    def body(self) -> bytes:
        return self.record

    @classmethod
    def parse(cls, body: bytes) -> ChunkData:
        return cls(bytes(body))

    @property
    def payload_bits(self) -> int:
        return 8 * (len(self.record) - wire.CHUNK_HEADER.size)


@dataclass(frozen=True)
class TransferDone:
    TAG = 4
    _S = struct.Struct("<I")
    n: int

    def body(self) -> bytes:
        return self._S.pack(self.n)

    @classmethod
    def parse(cls, body: bytes) -> TransferDone:
        return cls(*_unpack(cls._S, body))


@dataclass(frozen=True)
class UpgradeRequest:
    TAG = 5
    _S = struct.Struct("<16sIBdI")
    model_id: bytes
    current_n: int
    target_error: float | None = None
    target_n: int | None = None

    def __post_init__(self):
        if (self.target_error is None) == (self.target_n is None):
            raise ConfigError("upgrade needs exactly one of target_error and target_n")

    def body(self) -> bytes:
        by_n = self.target_n is not None
        return self._S.pack(
            self.model_id, self.current_n, by_n,
            0.0 if by_n else self.target_error, self.target_n if by_n else 0,
        )

    @classmethod
    def parse(cls, body: bytes) -> UpgradeRequest:
        mid, cur, by_n, err, n = _unpack(cls._S, body)
        if by_n not in (0, 1):
            raise ProtocolError(f"bad upgrade mode {by_n}")
        return cls(mid, cur, None if by_n else err, n if by_n else None)


@dataclass(frozen=True)
class ErrorReply:
    TAG = 6
    code: int
    detail: str = ""

    def body(self) -> bytes:
        return struct.pack("<H", self.code) + self.detail.encode("utf-8")

    @classmethod
    def parse(cls, body: bytes) -> ErrorReply:
        if len(body) < 2:
            raise ProtocolError("truncated ErrorReply")
        (code,) = struct.unpack_from("<H", body)
        return cls(code, bytes(body[2:]).decode("utf-8", errors="replace"))


MESSAGE_TYPES = {
    cls.TAG: cls
    for cls in (ModelRequest, ModelOffer, ChunkData, TransferDone, UpgradeRequest, ErrorReply)
}


def _unpack(s: struct.Struct, body: bytes):
    if len(body) != s.size:
        raise ProtocolError(f"message body has {len(body)} bytes, expected {s.size}")
    return s.unpack(body)


def _scheme(code: int) -> Scheme:
    if code not in SCHEME_FROM_CODE:
        raise ProtocolError(f"unknown scheme code {code}")
    return SCHEME_FROM_CODE[code]


def encode_frame(msg) -> bytes:
    body = msg.body()
    return FRAME_HEADER.pack(len(body), msg.TAG) + body


def decode_frame(buf: bytes, offset: int = 0):
    """Decode one frame at ``offset``; returns (message, next offset) or None if incomplete."""
    if len(buf) - offset < FRAME_HEADER.size:
        return None
    length, tag = FRAME_HEADER.unpack_from(buf, offset)
    if length > MAX_FRAME:
        raise ProtocolError(f"frame of {length} bytes exceeds limit")
    start = offset + FRAME_HEADER.size
    if len(buf) - start < length:
        return None
    if tag not in MESSAGE_TYPES:
        raise ProtocolError(f"unknown message tag {tag}")
    return MESSAGE_TYPES[tag].parse(bytes(buf[start:start + length])), start + length


def decode_frames(buf: bytes) -> list:
    out, off = [], 0
    while off < len(buf):
        step = decode_frame(buf, off)
        if step is None:
            raise ProtocolError("trailing partial frame")
        msg, off = step
        out.append(msg)
    return out


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    chunks, got = [], 0
    while got < n:
        part = sock.recv(n - got)
        if not part:
            if got == 0:
                return None
            raise ProtocolError("connection closed mid-frame")
        chunks.append(part)
        got += len(part)
    return b"".join(chunks)


def read_frame(sock: socket.socket):
    """Blocking read of one message; None on clean end of stream."""
    head = _recv_exact(sock, FRAME_HEADER.size)
    if head is None:
        return None
    length, _ = FRAME_HEADER.unpack(head)
    if length > MAX_FRAME:
        raise ProtocolError(f"frame of {length} bytes exceeds limit")
    body = _recv_exact(sock, length) if length else b""
    if body is None:
        raise ProtocolError("connection closed mid-frame")
    msg, _ = decode_frame(head + body)
    return msg


@dataclass(frozen=True)
class LinkModel:
    throughput_bps: float
    rtt_s: float = 0.0

    def __post_init__(self):
        if self.throughput_bps <= 0 or self.rtt_s < 0:
            raise ConfigError("link needs positive throughput and nonnegative rtt")

    def serialization_time(self, bits: int) -> Fraction:
        return Fraction(bits) / Fraction(str(self.throughput_bps))

    def transfer_time(self, bits: int) -> float:
        return float(Fraction(str(self.rtt_s)) + self.serialization_time(bits))


@dataclass
class Session:
    """Endpoint-side state of one client conversation."""

    scheme: Scheme | None = None
    delivered_n: int | None = None
    manifest: wire.ModelManifest | None = None
    sent: set[int] = field(default_factory=set)


class Endpoint:
    """Serves one trained model and its profile table.

    Selection uses sizes at 32 bits per parameter, the actual payload width,
    so predicted and measured transfer times agree.
    """

    def __init__(self, model: AccordionModel, table: ProfileTable):
        self.model = model
        self.model_id = wire.model_id(model)
        self.table = table.rescaled(PAYLOAD_BITS_PER_PARAM, model.spec.bits_per_param)
        self._streams = {}
        self._lock = threading.Lock()

    def stream(self, scheme: Scheme):
        with self._lock:
            if scheme not in self._streams:
                full = DepthConfig.full(self.model.spec, scheme)
                mbytes, chunks = wire.serialize(self.model, full)
                manifest, _ = wire.ModelManifest.from_bytes(mbytes)
                self._streams[scheme] = (mbytes, manifest, chunks)
            return self._streams[scheme]

    def new_session(self) -> Session:
        return Session()

    def handle(self, msg, session: Session) -> list:
        """Replies to ``msg``; updates ``session`` in place."""
        try:
            if isinstance(msg, ModelRequest):
                return self._on_request(msg, session)
            if isinstance(msg, UpgradeRequest):
                return self._on_upgrade(msg, session)
            return [ErrorReply(PROTOCOL, f"unexpected {type(msg).__name__} from client")]
        except InfeasibleBudgetError as exc:
            return [ErrorReply(INFEASIBLE, str(exc))]
        except UnreachableAccuracyError as exc:
            return [ErrorReply(UNREACHABLE, str(exc))]
        except ConfigError as exc:
            return [ErrorReply(BAD_REQUEST, str(exc))]

    def _check_id(self, mid: bytes):
        if mid not in (ANY_MODEL, self.model_id):
            return [ErrorReply(NOT_FOUND, f"unknown model {mid.hex()}")]
        return None

    def _send(self, session: Session, indices: list[int], n: int) -> list:
        _, _, chunks = self.stream(session.scheme)
        out = []
        for i in indices:
            if i in session.sent:
                raise AssertionError(f"chunk {i} would be sent twice")
            session.sent.add(i)
            out.append(ChunkData(chunks[i]))
        session.delivered_n = n
        out.append(TransferDone(n))
        return out

    def _on_request(self, msg: ModelRequest, session: Session) -> list:
        bad = self._check_id(msg.model_id)
        if bad:
            return bad
        if session.delivered_n is not None:
            return [ErrorReply(PROTOCOL, "session already holds a model; send an upgrade")]
        if msg.deadline_ms <= 0 or msg.throughput_bps <= 0:
            return [ErrorReply(BAD_REQUEST, "deadline and throughput must be positive")]
        scheme = msg.scheme
        chosen = select_by_link(
            self.table, scheme, msg.throughput_bps, Fraction(msg.deadline_ms, 1000)
        )
        met = True
        if msg.max_error is not None:
            try:
                acc = select_by_accuracy(self.table, scheme, msg.max_error)
            except UnreachableAccuracyError:
                acc = None
            if acc is not None and acc.n <= chosen.n:
                chosen = acc
            else:
                met = chosen.error_rate <= msg.max_error
        mbytes, manifest, _ = self.stream(scheme)
        session.scheme = scheme
        session.manifest = manifest
        seconds = Fraction(str(msg.rtt_ms)) / 1000 + Fraction(chosen.size_bits, msg.throughput_bps)
        offer = ModelOffer(chosen.n, chosen.error_rate, float(seconds * 1000), met, mbytes)
        indices = manifest.chunks_for(chosen.n)
        return [offer] + self._send(session, indices, chosen.n)

    def _on_upgrade(self, msg: UpgradeRequest, session: Session) -> list:
        bad = self._check_id(msg.model_id)
        if bad:
            return bad
        if session.delivered_n is None:
            return [ErrorReply(PROTOCOL, "upgrade before any model was delivered")]
        have = session.delivered_n
        if msg.target_n is not None:
            if not 0 <= msg.target_n <= self.model.spec.total_units:
                return [ErrorReply(BAD_REQUEST, f"target n {msg.target_n} out of range")]
            want = msg.target_n
        else:
            want = select_by_accuracy(self.table, session.scheme, msg.target_error).n
        if want <= have:
            return [TransferDone(have)]
        return self._send(session, wire.delta_chunks(session.manifest, have, want), want)


@dataclass(frozen=True)
class Requirements:
    deadline_ms: int
    throughput_bps: int
    scheme: Scheme = Scheme.COML
    max_error: float | None = None
    rtt_ms: float = 0.0
    model_id: bytes = ANY_MODEL

    def request(self) -> ModelRequest:
        return ModelRequest(
            self.model_id, Scheme.parse(self.scheme), self.deadline_ms, self.throughput_bps,
            self.max_error, self.rtt_ms,
        )


class LoopbackTransport:
    """In-process byte pipe to an endpoint; every message goes through the framing."""

    def __init__(self, endpoint: Endpoint):
        self.endpoint = endpoint
        self.session = endpoint.new_session()
        self.bytes_up = 0
        self.bytes_down = 0

    def exchange(self, msg) -> list:
        up = encode_frame(msg)
        self.bytes_up += len(up)
        (request,) = decode_frames(up)
        down = b"".join(encode_frame(r) for r in self.endpoint.handle(request, self.session))
        self.bytes_down += len(down)
        return decode_frames(down)

    def close(self) -> None:
        pass


class TcpTransport:
    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.bytes_up = 0
        self.bytes_down = 0

    def exchange(self, msg) -> list:
        frame = encode_frame(msg)
        self.sock.sendall(frame)
        self.bytes_up += len(frame)
        out = []
        while True:
            reply = read_frame(self.sock)
            if reply is None:
                raise ProtocolError("endpoint closed the connection")
            self.bytes_down += FRAME_HEADER.size + len(reply.body())
            out.append(reply)
            if isinstance(reply, (TransferDone, ErrorReply)):
                return out

    def close(self) -> None:
        self.sock.close()


def raise_for_error(reply: ErrorReply):
    if reply.code == INFEASIBLE:
        raise InfeasibleBudgetError(reply.detail)
    if reply.code == UNREACHABLE:
        raise UnreachableAccuracyError(reply.detail)
    raise ProtocolError(f"endpoint error {reply.code}: {reply.detail}")


class Client:
    """UE side: fetches a partial model, then upgrades it on demand.

    ``on_chunk(partial)`` is called after every chunk lands, so callers can
    run inference on whatever prefix has arrived.
    """

    def __init__(self, transport, on_chunk=None):
        self.transport = transport
        self.on_chunk = on_chunk
        self.partial: wire.PartialModel | None = None
        self.offer: ModelOffer | None = None

    def _consume_one(self, r) -> int | None:
        """Apply one endpoint message; returns the delivered depth on TransferDone."""
        if isinstance(r, ErrorReply):
            raise_for_error(r)
        elif isinstance(r, ModelOffer):
            if self.partial is not None:
                raise ProtocolError("unexpected second offer")
            self.offer = r
            manifest, _ = wire.ModelManifest.from_bytes(r.manifest)
            self.partial = wire.PartialModel.empty(manifest)
        elif isinstance(r, ChunkData):
            if self.partial is None:
                raise ProtocolError("chunk before offer")
            self.partial.add_chunk(r.record)
            if self.on_chunk is not None:
                self.on_chunk(self.partial)
        elif isinstance(r, TransferDone):
            if self.partial is None or self.partial.achievable_n != r.n:
                raise IntegrityError("delivered chunks do not realize the announced depth")
            return r.n
        else:
            raise ProtocolError(f"unexpected {type(r).__name__} from endpoint")
        return None

    def _consume(self, replies: list) -> int:
        delivered = None
        for r in replies:
            n = self._consume_one(r)
            if n is not None:
                delivered = n
        if delivered is None:
            raise ProtocolError("transfer ended without TransferDone")
        return delivered

    def fetch(self, req: Requirements) -> wire.PartialModel:
        self._consume(self.transport.exchange(req.request()))
        return self.partial

    def upgrade(self, target_error: float | None = None, target_n: int | None = None):
        if self.partial is None:
            raise ProtocolError("nothing fetched yet")
        msg = UpgradeRequest(
            self.partial.manifest.model_id, self.partial.achievable_n, target_error, target_n
        )
        self._consume(self.transport.exchange(msg))
        return self.partial


def client_fetch(req: Requirements, transport, on_chunk=None) -> wire.PartialModel:
    return Client(transport, on_chunk).fetch(req)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        endpoint: Endpoint = self.server.endpoint
        session = endpoint.new_session()
        while True:
            try:
                msg = read_frame(self.request)
            except ProtocolError as exc:
                self.request.sendall(encode_frame(ErrorReply(PROTOCOL, str(exc))))
                return
            if msg is None:
                return
            out = b"".join(encode_frame(r) for r in endpoint.handle(msg, session))
            self.request.sendall(out)


class EndpointServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, endpoint: Endpoint):
        super().__init__(address, _Handler)
        self.endpoint = endpoint


# ---------------------------------------------------------------- simulation


@dataclass(frozen=True)
class UpgradeEvent:
    at_s: float
    target_error: float | None = None
    target_n: int | None = None


@dataclass(frozen=True)
class Scenario:
    link: LinkModel
    requirements: Requirements
    upgrades: tuple[UpgradeEvent, ...] = ()


@dataclass(frozen=True)
class LogRow:
    event: str
    time_s: float
    payload_bits: int
    wire_bytes: int
    achievable_n: int | None
    predicted_error: float | None


LOG_COLUMNS = ["event", "time_s", "payload_bits", "wire_bytes", "achievable_n", "predicted_error"]


@dataclass
class SessionLog:
    rows: list[LogRow] = field(default_factory=list)
    partial: wire.PartialModel | None = None
    offer: ModelOffer | None = None

    def events(self, name: str) -> list[LogRow]:
        return [r for r in self.rows if r.event == name]

    @property
    def total_payload_bits(self) -> int:
        return sum(r.payload_bits for r in self.rows if r.event == "chunk")

    @property
    def total_wire_bytes(self) -> int:
        return sum(r.wire_bytes for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.rows:
            w.writerow([
                r.event, repr(r.time_s), r.payload_bits, r.wire_bytes,
                "" if r.achievable_n is None else r.achievable_n,
                "" if r.predicted_error is None else repr(r.predicted_error),
            ])
        return buf.getvalue()


def simulate_session(endpoint: Endpoint, scenario: Scenario) -> SessionLog:
    """Replay one client session against ``endpoint`` on a simulated link.

    Each request costs one round trip; each chunk costs its payload bits
    over the link throughput.  Framing and manifest bytes are logged in
    ``wire_bytes`` but not clocked.  Times are accumulated exactly.
    """
    link = scenario.link
    transport = LoopbackTransport(endpoint)
    client = Client(transport)
    log = SessionLog()
    clock = Fraction(0)
    table = endpoint.table

    def error_of(n):
        if n is None or n == 0:
            return None
        return table.entry(client.partial.manifest.scheme, n).error_rate

    def run(request, label: str):
        nonlocal clock
        frame = encode_frame(request)
        n = _n(client)
        log.rows.append(LogRow(label, float(clock), 0, len(frame), n, error_of(n)))
        clock += Fraction(str(link.rtt_s))
        replies = transport.exchange(request)
        for r in replies:
            if isinstance(r, ErrorReply):
                size = len(encode_frame(r))
                log.rows.append(LogRow("error", float(clock), 0, size, _n(client), None))
                raise_for_error(r)
        for r in replies:
            size = len(encode_frame(r))
            client._consume_one(r)
            if isinstance(r, ModelOffer):
                log.offer = r
                log.rows.append(LogRow("offer", float(clock), 0, size, r.n, r.predicted_error))
            elif isinstance(r, ChunkData):
                clock += link.serialization_time(r.payload_bits)
                n = _n(client)
                log.rows.append(LogRow("chunk", float(clock), r.payload_bits, size, n, error_of(n)))
            elif isinstance(r, TransferDone):
                log.rows.append(LogRow("transfer_done", float(clock), 0, size, r.n, error_of(r.n)))

    run(scenario.requirements.request(), "request")
    for ev in sorted(scenario.upgrades, key=lambda e: e.at_s):
        clock = max(clock, Fraction(str(ev.at_s)))
        msg = UpgradeRequest(
            client.partial.manifest.model_id, client.partial.achievable_n,
            ev.target_error, ev.target_n,
        )
        run(msg, "upgrade_request")
    log.partial = client.partial
    return log


def _n(client: Client):
    return None if client.partial is None else client.partial.achievable_n
