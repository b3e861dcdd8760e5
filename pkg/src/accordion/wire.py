"""The ``.acdn`` model format: a manifest followed by priority-ordered chunks.

All integers are little-endian.  Manifest::

    4s   magic "ACDN"
    u16  format version (1)
    16s  model id
    u32  descriptor length, then UTF-8 ``key=value`` lines
    u32  chunk count, then per chunk:
         u32 index | u8 kind | u16 block | u16 pos | u64 offset | u64 length | u32 crc32

Chunk record (offsets in the manifest are relative to the first record)::

    u32 index | u8 kind | u16 block | u16 pos | u32 payload length | u32 crc32 | payload

Payloads are float32 parameters in the order W1, b1, W2, b2 (stem and head:
W, b), each matrix row-major.  The transition chunk carries no payload; the
maps are rebuilt from the seed in the descriptor.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arch import (
    AccordionModel,
    ArchSpec,
    DepthConfig,
    Piece,
    Scheme,
    active_set,
    chunk_priority,
    forward,
    make_transitions,
    parse_kv,
)
from .errors import ConfigError, IntegrityError, VersionError
from .nncore import DTYPE, ParamSet

MAGIC = b"ACDN"
FORMAT_VERSION = 1
NUM_BASE_CHUNKS = 3

KIND_CODES = {"stem": 0, "head": 1, "transition": 2, "unit": 3}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}

_PREFIX = struct.Struct("<4sH16sI")
_COUNT = struct.Struct("<I")
_TABLE_ROW = struct.Struct("<IBHHQQI")
CHUNK_HEADER = struct.Struct("<IBHHII")


def crc32(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


def _piece_from_codes(kind: int, block: int, pos: int) -> Piece:
    if kind not in KIND_NAMES:
        raise IntegrityError(f"unknown chunk kind code {kind}")
    name = KIND_NAMES[kind]
    if name != "unit" and (block or pos):
        raise IntegrityError(f"{name} chunk carries a unit position")
    return Piece(name, block, pos) if name == "unit" else Piece(name)


def _param_shapes(spec: ArchSpec, piece: Piece) -> list[tuple[int, ...]]:
    if piece.kind == "stem":
        w = spec.block_widths[0]
        return [(w, spec.input_dim), (w,)]
    if piece.kind == "head":
        return [(spec.num_classes, spec.block_widths[-1]), (spec.num_classes,)]
    if piece.kind == "transition":
        return []
    w = spec.block_widths[piece.block]
    return [(w, w), (w,), (w, w), (w,)]


def piece_param_count(spec: ArchSpec, piece: Piece) -> int:
    return sum(int(np.prod(s)) for s in _param_shapes(spec, piece))


def piece_payload(model: AccordionModel, piece: Piece) -> bytes:
    return b"".join(
        np.ascontiguousarray(model.params.value(name), dtype="<f4").tobytes()
        for name in piece.param_names()
    )


def model_id(model: AccordionModel) -> bytes:
    """16-byte content hash of architecture, seed and all parameters."""
    h = hashlib.sha256()
    h.update(model.spec.to_text().encode())
    h.update(f"seed={model.seed}\n".encode())
    for piece in chunk_priority(Scheme.COML, model.spec):
        h.update(piece_payload(model, piece))
    return h.digest()[:16]


@dataclass(frozen=True)
class ChunkEntry:
    index: int
    piece: Piece
    offset: int
    length: int
    crc: int


@dataclass(frozen=True)
class LayerChunk:
    index: int
    piece: Piece
    payload: bytes
    crc: int

    @classmethod
    def make(cls, index: int, piece: Piece, payload: bytes) -> LayerChunk:
        return cls(index, piece, payload, crc32(payload))

    def to_bytes(self) -> bytes:
        head = CHUNK_HEADER.pack(
            self.index, KIND_CODES[self.piece.kind], self.piece.block, self.piece.pos,
            len(self.payload), self.crc,
        )
        return head + self.payload

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> tuple[LayerChunk, int]:
        """Parse one record at ``offset``; returns it and the next offset."""
        if len(data) - offset < CHUNK_HEADER.size:
            raise IntegrityError("truncated chunk header")
        index, kind, block, pos, length, crc = CHUNK_HEADER.unpack_from(data, offset)
        start = offset + CHUNK_HEADER.size
        if len(data) - start < length:
            raise IntegrityError(f"chunk {index}: truncated payload", index)
        piece = _piece_from_codes(kind, block, pos)
        chunk = cls(index, piece, bytes(data[start:start + length]), crc)
        return chunk, start + length

    def verify(self) -> None:
        if crc32(self.payload) != self.crc:
            raise IntegrityError(f"chunk {self.index}: crc32 mismatch", self.index)

    @property
    def size(self) -> int:
        return CHUNK_HEADER.size + len(self.payload)


@dataclass
class ModelManifest:
    model_id: bytes
    spec: ArchSpec
    seed: int
    scheme: Scheme
    chunks: list[ChunkEntry]
    format_version: int = FORMAT_VERSION

    @property
    def total_chunks(self) -> int:
        return len(self.chunks)

    def descriptor(self) -> str:
        order = ";".join(str(e.piece) for e in self.chunks)
        return (
            self.spec.to_text()
            + f"seed={self.seed}\n"
            + f"scheme={self.scheme.value}\n"
            + f"chunk_order={order}\n"
        )

    def to_bytes(self) -> bytes:
        desc = self.descriptor().encode("utf-8")
        out = [_PREFIX.pack(MAGIC, self.format_version, self.model_id, len(desc)), desc]
        out.append(_COUNT.pack(len(self.chunks)))
        for e in self.chunks:
            out.append(
                _TABLE_ROW.pack(
                    e.index, KIND_CODES[e.piece.kind], e.piece.block, e.piece.pos,
                    e.offset, e.length, e.crc,
                )
            )
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> tuple[ModelManifest, int]:
        """Parse a manifest; returns it and the number of bytes consumed."""
        if len(data) < _PREFIX.size:
            raise IntegrityError("truncated manifest")
        magic, version, mid, dlen = _PREFIX.unpack_from(data)
        if magic != MAGIC:
            raise IntegrityError("not an .acdn stream (bad magic)")
        if version != FORMAT_VERSION:
            raise VersionError(f"unsupported format version {version}")
        off = _PREFIX.size
        if len(data) < off + dlen + _COUNT.size:
            raise IntegrityError("truncated manifest descriptor")
        try:
            text = bytes(data[off:off + dlen]).decode("utf-8")
        except UnicodeDecodeError:
            raise IntegrityError("manifest descriptor is not UTF-8") from None
        off += dlen
        (count,) = _COUNT.unpack_from(data, off)
        off += _COUNT.size
        if len(data) < off + count * _TABLE_ROW.size:
            raise IntegrityError("truncated chunk table")
        chunks = []
        for _ in range(count):
            index, kind, block, pos, offset, length, crc = _TABLE_ROW.unpack_from(data, off)
            off += _TABLE_ROW.size
            piece = _piece_from_codes(kind, block, pos)
            chunks.append(ChunkEntry(index, piece, offset, length, crc))
        try:
            kv = parse_kv(text)
            seed = int(kv["seed"])
            scheme = Scheme.parse(kv["scheme"])
            spec = ArchSpec.from_text(text)
        except KeyError as exc:
            raise IntegrityError(f"manifest descriptor lacks {exc}") from None
        except ValueError as exc:  # includes ConfigError
            raise IntegrityError(f"malformed manifest descriptor: {exc}") from None
        manifest = cls(mid, spec, seed, scheme, chunks, version)
        manifest._check()
        return manifest, off

    def _check(self) -> None:
        expected = chunk_priority(self.scheme, self.spec)
        if [e.piece for e in self.chunks] != expected:
            raise IntegrityError("chunk table does not follow the priority order of its scheme")
        pos = 0
        for i, e in enumerate(self.chunks):
            if e.index != i or e.offset != pos:
                raise IntegrityError(f"chunk table entry {i} is out of place", i)
            if e.length != CHUNK_HEADER.size + 4 * piece_param_count(self.spec, e.piece):
                raise IntegrityError(f"chunk {i}: length disagrees with architecture", i)
            pos += e.length

    def unit_chunk_index(self, unit) -> int:
        piece = Piece("unit", *unit)
        for e in self.chunks:
            if e.piece == piece:
                return e.index
        raise ConfigError(f"unit {unit} not in manifest")

    def chunks_for(self, n: int) -> list[int]:
        """Indices needed to run ``n`` units: the base chunks plus the units' own."""
        return list(range(NUM_BASE_CHUNKS)) + sorted(
            self.unit_chunk_index(u) for u in active_set(self.scheme, n, self.spec)
        )


def serialize(model: AccordionModel, config: DepthConfig) -> tuple[bytes, list[bytes]]:
    """Manifest for the whole model plus the chunk records config needs.

    The manifest always describes every chunk, so a client can later ask for
    the rest; the stream holds the first ``3 + n`` records.
    """
    spec = model.spec
    pieces = chunk_priority(config.scheme, spec)
    records = [LayerChunk.make(i, p, piece_payload(model, p)) for i, p in enumerate(pieces)]
    entries, pos = [], 0
    for r in records:
        entries.append(ChunkEntry(r.index, r.piece, pos, r.size, r.crc))
        pos += r.size
    manifest = ModelManifest(model_id(model), spec, model.seed, config.scheme, entries)
    config.active_set(spec)  # range check
    keep = NUM_BASE_CHUNKS + config.kept_units
    return manifest.to_bytes(), [r.to_bytes() for r in records[:keep]]


@dataclass
class PartialModel:
    manifest: ModelManifest
    model: AccordionModel
    received: set[int] = field(default_factory=set)

    @classmethod
    def empty(cls, manifest: ModelManifest) -> PartialModel:
        spec = manifest.spec
        params = ParamSet()
        # same insertion order as build(), so parameter digests agree
        pieces = chunk_priority(Scheme.COML, spec)
        for piece in [pieces[0], *pieces[3:], pieces[1]]:
            for name, shape in zip(piece.param_names(), _param_shapes(spec, piece)):
                params.add(name, np.zeros(shape, DTYPE))
        model = AccordionModel(spec, manifest.seed, params, make_transitions(spec, manifest.seed))
        return cls(manifest, model)

    def add_chunk(self, chunk: LayerChunk | bytes) -> None:
        if isinstance(chunk, (bytes, bytearray, memoryview)):
            chunk, _ = LayerChunk.from_bytes(bytes(chunk))
        if not 0 <= chunk.index < self.manifest.total_chunks:
            raise IntegrityError(f"chunk index {chunk.index} outside manifest", chunk.index)
        entry = self.manifest.chunks[chunk.index]
        if chunk.piece != entry.piece:
            raise IntegrityError(f"chunk {chunk.index}: kind disagrees with manifest", chunk.index)
        chunk.verify()
        if chunk.crc != entry.crc:
            raise IntegrityError(f"chunk {chunk.index}: crc32 differs from manifest", chunk.index)
        if chunk.size != entry.length:
            raise IntegrityError(f"chunk {chunk.index}: wrong payload length", chunk.index)
        values = np.frombuffer(chunk.payload, dtype="<f4")
        pos = 0
        for name in chunk.piece.param_names():
            target = self.model.params.value(name)
            target.reshape(-1)[...] = values[pos:pos + target.size]
            pos += target.size
        self.received.add(chunk.index)

    @property
    def achievable_n(self) -> int | None:
        """Largest unit count runnable from what has arrived; None before the base chunks."""
        if not all(i in self.received for i in range(NUM_BASE_CHUNKS)):
            return None
        n = 0
        while n < self.manifest.spec.total_units and NUM_BASE_CHUNKS + n in self.received:
            n += 1
        return n

    def config(self, n: int | None = None) -> DepthConfig:
        top = self.achievable_n
        if top is None:
            raise ConfigError("stem, head and transition chunks have not all arrived")
        if n is None:
            n = top
        if not 0 <= n <= top:
            raise ConfigError(f"requested {n} units but only {top} are available")
        return DepthConfig(self.manifest.scheme, n)

    def forward(self, batch: np.ndarray, n: int | None = None) -> np.ndarray:
        return forward(self.model, self.config(n), batch)

    def to_bytes(self) -> bytes:
        out = [self.manifest.to_bytes()]
        for i in sorted(self.received):
            p = self.manifest.chunks[i].piece
            out.append(LayerChunk.make(i, p, piece_payload(self.model, p)).to_bytes())
        return b"".join(out)


def assemble(manifest: bytes | ModelManifest, chunks) -> PartialModel:
    """Materialize whatever ``chunks`` carry; missing units run as identity."""
    if not isinstance(manifest, ModelManifest):
        manifest, _ = ModelManifest.from_bytes(manifest)
    partial = PartialModel.empty(manifest)
    for c in chunks:
        partial.add_chunk(c)
    return partial


def delta_chunks(manifest: ModelManifest, have_n: int, want_n: int) -> list[int]:
    """Chunk indices a client holding ``have_n`` units needs to reach ``want_n``."""
    if have_n > want_n:
        raise ConfigError("downgrades are local and need no transfer")
    have = active_set(manifest.scheme, have_n, manifest.spec)
    want = active_set(manifest.scheme, want_n, manifest.spec)
    return sorted(manifest.unit_chunk_index(u) for u in want - have)


def write_acdn(path, manifest: bytes, chunks: list[bytes]) -> None:
    Path(path).write_bytes(manifest + b"".join(chunks))


def read_acdn(path_or_bytes) -> PartialModel:
    data = path_or_bytes
    if not isinstance(data, (bytes, bytearray)):
        data = Path(data).read_bytes()
    manifest, off = ModelManifest.from_bytes(data)
    partial = PartialModel.empty(manifest)
    while off < len(data):
        chunk, off = LayerChunk.from_bytes(data, off)
        partial.add_chunk(chunk)
    return partial
