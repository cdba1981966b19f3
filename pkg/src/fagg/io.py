"""On-disk formats.

Embedding sets (``.fagg``), all little-endian::

    header   magic "FAGG" | version u16 | dim u32 | set_count u32 | prng_tag 16 bytes (NUL padded)
    per set  id_len u32 | set_id utf-8 | label u32 | frame_count u32 | frame_count*dim float32

Parameters (``.fagp``)::

    header   magic "FAGP" | version u16 | dim u32 | num_classes u32 | mode u8 (0 linear, 1 cascaded)
    body     Q1, b1, Q2, b2, class_weights as float64, row-major

Checkpoints (``.fagc``)::

    magic "FAGC" | version u16 | meta_len u32 | meta (utf-8 JSON) | params blob (.fagp layout)
    | momentum buffers for Q1, b1, Q2, b2, class_weights as float64

Readers fail closed: nothing is returned unless the whole file parses and no
bytes are left over.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from fagg.attention import AttentionParams, Mode
from fagg.core import FeatureSet
from fagg.grad import MarginHead
from fagg.synth import PRNG_TAG, LabeledCorpus

CORPUS_MAGIC = b"FAGG"
PARAMS_MAGIC = b"FAGP"
CKPT_MAGIC = b"FAGC"
VERSION = 1

_CORPUS_HEADER = struct.Struct("<4sHII16s")
_PARAMS_HEADER = struct.Struct("<4sHIIB")
_CKPT_HEADER = struct.Struct("<4sHI")
_U32 = struct.Struct("<I")


class FormatError(ValueError):
    code = 10


class BadMagicError(FormatError):
    code = 11


class VersionMismatchError(FormatError):
    code = 12


class TruncatedError(FormatError):
    code = 13


class CountMismatchError(FormatError):
    code = 14


class _Cursor:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if n < 0 or self.pos + n > len(self.data):
            raise TruncatedError(f"file ends inside {what} (need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct, what: str):
        return st.unpack(self.take(st.size, what))

    def floats(self, count: int, dtype: str, what: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        raw = np.frombuffer(self.take(count * itemsize, what), dtype=dtype)
        with np.errstate(invalid="ignore", over="ignore"):  # non-finite values are rejected by the callers
            return raw.astype(np.float64)

    def finish(self):
        extra = len(self.data) - self.pos
        if extra:
            raise CountMismatchError(f"{extra} trailing bytes after the declared content")


def _check_magic(magic: bytes, expected: bytes, version: int):
    if magic != expected:
        raise BadMagicError(f"bad magic {bytes(magic)!r}, expected {expected!r}")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported version {version}, expected {VERSION}")


def _write_atomic(path, payload: bytes):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


# -- corpus -------------------------------------------------------------------


def encode_corpus(corpus: LabeledCorpus) -> bytes:
    if not corpus.sets:
        raise ValueError("cannot write an empty corpus")
    tag = corpus.prng_tag.encode("ascii")
    if len(tag) > 16:
        raise ValueError("prng tag longer than 16 bytes")
    dim = corpus.dim
    parts = [_CORPUS_HEADER.pack(CORPUS_MAGIC, VERSION, dim, len(corpus.sets), tag.ljust(16, b"\0"))]
    for s in corpus.sets:
        sid = s.set_id.encode("utf-8")
        if np.any(np.abs(s.frames) > np.finfo(np.float32).max):
            raise ValueError(f"set {s.set_id!r} does not fit in float32")
        frames = s.frames.astype("<f4")
        parts += [_U32.pack(len(sid)), sid, struct.pack("<II", s.label, s.num_frames), frames.tobytes()]
    return b"".join(parts)


def _read_sets(cur: _Cursor, dim: int, count: int) -> list[FeatureSet]:
    sets = []
    for i in range(count):
        (id_len,) = cur.unpack(_U32, f"set {i} id length")
        raw = cur.take(id_len, f"set {i} id")
        try:
            set_id = bytes(raw).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CountMismatchError(f"set {i} id is not utf-8; declared sizes do not match the payload") from exc
        label, k = struct.unpack("<II", cur.take(8, f"set {i} label/frame count"))
        if k == 0:
            raise CountMismatchError(f"set {i} declares zero frames")
        frames = cur.floats(k * dim, "<f4", f"set {i} frames").reshape(k, dim)
        if not np.all(np.isfinite(frames)):
            raise FormatError(f"set {i} has non-finite frame values")
        sets.append(FeatureSet(frames, label, set_id))
    cur.finish()
    return sets


def _skims_exactly(data: bytes, start: int, dim: int, count: int) -> bool:
    """Walk the per-set length fields only; True if they consume the payload exactly."""
    pos, end = start, len(data)
    for _ in range(count):
        if pos + 4 > end:
            return False
        (id_len,) = _U32.unpack_from(data, pos)
        pos += 4 + id_len
        if pos + 8 > end:
            return False
        _, k = struct.unpack_from("<II", data, pos)
        pos += 8 + 4 * k * dim
        if k == 0 or pos > end:
            return False
    return pos == end


def _payload_dim(data: bytes, count: int, declared: int) -> int | None:
    """Another dim under which the payload parses exactly, if there is one (error path only)."""
    start = _CORPUS_HEADER.size
    if count == 0 or start + 4 > len(data):
        return None
    (id_len,) = _U32.unpack_from(data, start)
    first = start + 4 + id_len
    if first + 8 > len(data):
        return None
    _, k = struct.unpack_from("<II", data, first)
    if k == 0:
        return None
    # the first set's frames must fit in what is left, which bounds the candidates
    for dim in range(1, (len(data) - first - 8) // (4 * k) + 1):
        if dim != declared and _skims_exactly(data, start, dim, count):
            try:
                _read_sets(_Cursor(data[start:]), dim, count)
            except FormatError:
                continue
            return dim
    return None


def decode_corpus(data: bytes) -> LabeledCorpus:
    cur = _Cursor(data)
    magic, version, dim, count, tag = cur.unpack(_CORPUS_HEADER, "header")
    _check_magic(magic, CORPUS_MAGIC, version)
    if dim == 0:
        raise CountMismatchError("header declares dim 0")
    try:
        sets = _read_sets(cur, dim, count)
    except TruncatedError as exc:
        other = _payload_dim(data, count, dim)
        if other is not None:
            raise CountMismatchError(f"header declares dim {dim} but the frame payload fits dim {other}") from exc
        raise
    return LabeledCorpus(sets, prng_tag=bytes(tag).rstrip(b"\0").decode("ascii", "replace"))


def write_corpus(path, corpus: LabeledCorpus):
    _write_atomic(path, encode_corpus(corpus))


def read_corpus(path) -> LabeledCorpus:
    with open(path, "rb") as fh:
        return decode_corpus(fh.read())


def corpus_with_tag(sets, tag: str = PRNG_TAG) -> LabeledCorpus:
    return LabeledCorpus(list(sets), prng_tag=tag)


# -- parameters ---------------------------------------------------------------


def encode_params(params: AttentionParams, head: MarginHead) -> bytes:
    if head.dim != params.dim:
        raise ValueError("head and parameter dimensions differ")
    header = _PARAMS_HEADER.pack(PARAMS_MAGIC, VERSION, params.dim, head.num_classes, params.mode.tag)
    body = [np.ascontiguousarray(a, dtype="<f8").tobytes()
            for a in (params.q1, params.b1, params.q2, params.b2, head.class_weights)]
    return header + b"".join(body)


def _decode_params(cur: _Cursor, margin: float, scale: float):
    magic, version, dim, num_classes, mode_tag = cur.unpack(_PARAMS_HEADER, "params header")
    _check_magic(magic, PARAMS_MAGIC, version)
    try:
        mode = Mode.from_tag(mode_tag)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    q1 = cur.floats(dim * dim, "<f8", "Q1").reshape(dim, dim)
    b1 = cur.floats(dim, "<f8", "b1")
    q2 = cur.floats(dim * dim, "<f8", "Q2").reshape(dim, dim)
    b2 = cur.floats(dim, "<f8", "b2")
    w = cur.floats(num_classes * dim, "<f8", "class weights").reshape(num_classes, dim)
    try:
        return AttentionParams(q1, b1, q2, b2, mode), MarginHead(w, margin, scale)
    except ValueError as exc:
        raise FormatError(f"invalid parameter payload: {exc}") from exc


def decode_params(data: bytes, margin: float = 0.5, scale: float = 8.0):
    cur = _Cursor(data)
    out = _decode_params(cur, margin, scale)
    cur.finish()
    return out


def write_params(path, params: AttentionParams, head: MarginHead):
    _write_atomic(path, encode_params(params, head))


def read_params(path, margin: float = 0.5, scale: float = 8.0):
    """Returns ``(AttentionParams, MarginHead)``; margin/scale are not stored in the file."""
    with open(path, "rb") as fh:
        return decode_params(fh.read(), margin, scale)


# -- checkpoints --------------------------------------------------------------


_CKPT_KEYS = {"epoch", "running_loss", "rng_state", "margin", "scale", "frame_level"}


def encode_checkpoint(ckpt) -> bytes:
    meta = {
        "epoch": ckpt.epoch,
        "running_loss": ckpt.running_loss,
        "rng_state": ckpt.rng_state,
        "margin": ckpt.head.margin,
        "scale": ckpt.head.scale,
        "frame_level": ckpt.frame_level,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    shapes = _velocity_shapes(ckpt.params.dim, ckpt.head.num_classes)
    vel = b"".join(
        np.ascontiguousarray(ckpt.velocity.get(name, np.zeros(shape)), dtype="<f8").tobytes()
        for name, shape in shapes
    )
    return _CKPT_HEADER.pack(CKPT_MAGIC, VERSION, len(meta_bytes)) + meta_bytes + encode_params(ckpt.params, ckpt.head) + vel


def _velocity_shapes(dim: int, num_classes: int):
    return [("q1", (dim, dim)), ("b1", (dim,)), ("q2", (dim, dim)), ("b2", (dim,)), ("class_weights", (num_classes, dim))]


def decode_checkpoint(data: bytes):
    from fagg.trainer import Checkpoint

    cur = _Cursor(data)
    magic, version, meta_len = cur.unpack(_CKPT_HEADER, "checkpoint header")
    _check_magic(magic, CKPT_MAGIC, version)
    try:
        meta = json.loads(bytes(cur.take(meta_len, "checkpoint metadata")).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint metadata: {exc}") from exc
    missing = _CKPT_KEYS - set(meta) if isinstance(meta, dict) else _CKPT_KEYS
    if missing:
        raise FormatError(f"checkpoint metadata lacks {sorted(missing)}")
    params, head = _decode_params(cur, meta["margin"], meta["scale"])
    velocity = {}
    for name, shape in _velocity_shapes(params.dim, head.num_classes):
        velocity[name] = cur.floats(int(np.prod(shape)), "<f8", f"{name} momentum").reshape(shape)
        if not np.all(np.isfinite(velocity[name])):
            raise FormatError(f"{name} momentum has non-finite entries")
    cur.finish()
    if params.mode is Mode.LINEAR:
        for name in ("b1", "q2", "b2"):
            velocity.pop(name)
    return Checkpoint(params, head, int(meta["epoch"]), float(meta["running_loss"]), meta["rng_state"],
                      velocity, bool(meta["frame_level"]))


def write_checkpoint(path, ckpt):
    _write_atomic(path, encode_checkpoint(ckpt))


def read_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


# -- text formats -------------------------------------------------------------


def format_pairs(pairs) -> str:
    return "".join(f"{a}\t{b}\t{int(same)}\n" for a, b, same in pairs.pairs)


def parse_pairs(text: str):
    from fagg.evaluation import PairList

    out = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3 or fields[2] not in ("0", "1"):
            raise FormatError(f"pairs line {n}: expected 'id_a<TAB>id_b<TAB>0|1', got {line!r}")
        out.append((fields[0], fields[1], fields[2] == "1"))
    return PairList(out)


def read_pairs(path):
    with open(path, encoding="utf-8") as fh:
        return parse_pairs(fh.read())


def write_pairs(path, pairs):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_pairs(pairs))


def format_history_line(epoch: int, batch: int, loss: float) -> str:
    return f"{epoch}\t{batch}\t{loss:.17g}"


def parse_history(text: str) -> list[tuple[int, int, float]]:
    out = []
    for line in text.splitlines():
        if line.strip():
            e, b, loss = line.split("\t")
            out.append((int(e), int(b), float(loss)))
    return out
