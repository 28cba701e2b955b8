"""Binary checkpoint container for both model kinds.

Layout (all integers little-endian)::

    b"LTTL" | u32 version (=1) | u32 meta_len | meta_len bytes UTF-8 JSON
    u32 tensor_count
    per tensor: u16 name_len | name | u8 frozen | u8 rank | u32 dims[rank]
                | u8 dtype (0 = f32) | payload

The JSON metadata carries the model kind, the config echo, the creation
seed, the vocabulary and (for the gFTT) the schema.  Keys are sorted and
no timestamp is written, so the whole file is canonical.

A ``<path>.hash`` sidecar lists one 64-bit FNV-1a hash per tensor payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .data import Schema
from .errors import (BadMagicError, CheckpointError, HashMismatchError, ModelKindError,
                     PayloadSizeError, TruncatedCheckpointError, UnsupportedVersionError)
from .gftt import GfttConfig, GfttModel
from .minilm import LmConfig, MiniLm
from .tensor import Tensor
from .tokenizer import DEFAULT_MAX_LEN, Vocabulary

MAGIC = b"LTTL"
FORMAT_VERSION = 1
DTYPE_F32 = 0
HASH_SUFFIX = ".hash"

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    prime, mask = _FNV_PRIME, _MASK64
    for byte in data:
        h = ((h ^ byte) * prime) & mask
    return h


def payload_bytes(array: np.ndarray) -> bytes:
    if array.dtype != np.float32:
        raise CheckpointError(f"only float32 tensors can be stored, got {array.dtype}")
    return np.ascontiguousarray(array, dtype="<f4").tobytes()


def tensor_hash(t: Tensor | np.ndarray) -> str:
    """Hex FNV-1a hash of a tensor's little-endian float32 payload."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    return f"{fnv1a64(payload_bytes(data)):016x}"


# -- encoding -------------------------------------------------------------------

def model_metadata(model, seed: int | None = None, extra: Mapping | None = None) -> dict:
    meta: dict = {"kind": model.kind, "config": model.config.to_dict(), "seed": seed}
    vocab = getattr(model, "vocab", None)
    if vocab is not None:
        meta["vocab"] = {"tokens": vocab.tokens, "max_sequence_length": vocab.max_sequence_length}
    schema = getattr(model, "schema", None)
    if schema is not None:
        meta["schema"] = schema.to_dict()
    if extra:
        meta["extra"] = dict(extra)
    return meta


def encode_checkpoint(tensors: Mapping[str, Tensor], metadata: Mapping) -> bytes:
    """Serialize; the metadata gains a ``tensors`` manifest of names and shapes."""
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    metadata = dict(metadata, tensors=[[name, list(t.data.shape)] for name, t in tensors.items()])
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts += [struct.pack("<I", len(meta)), meta, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        shape = t.data.shape
        if len(shape) > 0xFF:
            raise CheckpointError(f"tensor {name} has rank {len(shape)} > 255")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", int(bool(t.frozen)), len(shape)))
        parts.append(struct.pack(f"<{len(shape)}I", *shape))
        parts.append(struct.pack("<B", DTYPE_F32))
        parts.append(payload_bytes(t.data))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(
                f"file ends inside {what} (needs {n} bytes at offset {self.pos}, size {len(self.buf)})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(buf: bytes) -> tuple[dict, dict[str, tuple[np.ndarray, bool]]]:
    """Parse bytes into (metadata, {name: (array, frozen)}); validates fully before returning."""
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I", "format version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version} (supported: {FORMAT_VERSION})")
    (meta_len,) = r.unpack("<I", "metadata length")
    try:
        metadata = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"metadata is not valid JSON: {exc}") from exc
    (count,) = r.unpack("<I", "tensor count")
    manifest = _manifest(metadata, count)
    if manifest is not None:
        expected = r.pos + sum(_record_size(name, dims) for name, dims in manifest)
        if len(buf) < expected:
            raise TruncatedCheckpointError(f"file has {len(buf)} bytes, the tensor manifest needs {expected}")
        if len(buf) > expected:
            raise PayloadSizeError(f"{len(buf) - expected} bytes beyond what the tensor manifest describes")
    tensors: dict[str, tuple[np.ndarray, bool]] = {}
    for i in range(count):
        (name_len,) = r.unpack("<H", f"tensor {i} name length")
        name = r.take(name_len, f"tensor {i} name").decode("utf-8")
        frozen, rank = r.unpack("<BB", f"tensor {name} header")
        dims = r.unpack(f"<{rank}I", f"tensor {name} dims")
        if manifest is not None and (name, list(dims)) != (manifest[i][0], manifest[i][1]):
            raise PayloadSizeError(f"tensor {i} header {name!r} {list(dims)} disagrees with the manifest "
                                   f"entry {manifest[i][0]!r} {manifest[i][1]}")
        (dtype,) = r.unpack("<B", f"tensor {name} dtype")
        if dtype != DTYPE_F32:
            raise CheckpointError(f"tensor {name}: unknown dtype code {dtype}")
        n_bytes = 4 * int(np.prod(dims, dtype=np.int64))
        remaining = len(buf) - r.pos
        if n_bytes > remaining:
            # a shorter tail than the dims demand: either a truncated file or
            # dims that disagree with the payload actually present
            if i == count - 1:
                raise TruncatedCheckpointError(f"tensor {name}: payload needs {n_bytes} bytes, {remaining} left")
            raise PayloadSizeError(f"tensor {name}: dims {dims} need {n_bytes} bytes, only {remaining} remain")
        arr = np.frombuffer(r.take(n_bytes, f"tensor {name} payload"), dtype="<f4").reshape(dims)
        tensors[name] = (arr.astype(np.float32), bool(frozen))
    if r.pos != len(buf):
        raise PayloadSizeError(f"{len(buf) - r.pos} trailing bytes after the last tensor; dims and payload disagree")
    return metadata, tensors


def _record_size(name: str, dims) -> int:
    return 2 + len(name.encode("utf-8")) + 2 + 4 * len(dims) + 1 + 4 * int(np.prod(dims, dtype=np.int64))


def _manifest(metadata, count: int):
    """The ``tensors`` manifest if present and well formed, else None."""
    m = metadata.get("tensors") if isinstance(metadata, dict) else None
    if m is None:
        return None
    try:
        out = [(str(name), [int(d) for d in dims]) for name, dims in m]
    except (TypeError, ValueError):
        raise CheckpointError("malformed tensor manifest in metadata") from None
    if len(out) != count:
        raise PayloadSizeError(f"tensor count {count} disagrees with the manifest ({len(out)} entries)")
    return out


# -- models ---------------------------------------------------------------------

def hash_manifest(tensors: Mapping[str, Tensor]) -> dict[str, str]:
    return {name: tensor_hash(t) for name, t in tensors.items()}


def write_hash_sidecar(path, hashes: Mapping[str, str]) -> Path:
    side = Path(str(path) + HASH_SUFFIX)
    side.write_text("".join(f"{name}\t{h}\n" for name, h in hashes.items()), encoding="utf-8")
    return side


def read_hash_sidecar(path) -> dict[str, str]:
    side = Path(str(path) + HASH_SUFFIX)
    out = {}
    for line in side.read_text(encoding="utf-8").splitlines():
        if line:
            name, _, h = line.rpartition("\t")
            out[name] = h
    return out


def save(model, path, *, seed: int | None = None, extra: Mapping | None = None,
         write_hashes: bool = True) -> None:
    params = model.parameters()
    blob = encode_checkpoint(params, model_metadata(model, seed, extra))
    Path(path).write_bytes(blob)
    if write_hashes:
        write_hash_sidecar(path, hash_manifest(params))


def read_metadata(path) -> dict:
    metadata, _ = decode_checkpoint(Path(path).read_bytes())
    return metadata


def load(path, expected_kind: str | None = None, *, verify_hashes: bool = True):
    """Rebuild a model from ``path``.

    ``expected_kind`` ("mini-lm" or "gftt") guards against loading the
    wrong model type.  When a hash sidecar exists and ``verify_hashes`` is
    set, every payload is checked against it.
    """
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    metadata, tensors = decode_checkpoint(buf)
    kind = metadata.get("kind")
    if expected_kind is not None and kind != expected_kind:
        raise ModelKindError(f"{path} holds a {kind!r} model, expected {expected_kind!r}")
    model = _build(metadata)
    params = model.parameters()
    if set(params) != set(tensors):
        missing = sorted(set(params) - set(tensors))
        unexpected = sorted(set(tensors) - set(params))
        raise CheckpointError(f"tensor set mismatch; missing {missing}, unexpected {unexpected}")
    for name, p in params.items():
        arr, frozen = tensors[name]
        if arr.shape != p.shape:
            raise PayloadSizeError(f"tensor {name}: stored shape {arr.shape}, model expects {p.shape}")
        p.data = arr
        p.frozen = frozen
    side = Path(str(path) + HASH_SUFFIX)
    if verify_hashes and side.exists():
        expected = read_hash_sidecar(path)
        for name, p in params.items():
            if name in expected and expected[name] != tensor_hash(p):
                raise HashMismatchError(f"tensor {name}: payload hash differs from {side.name}")
    model.metadata = metadata
    return model


def _vocab(metadata) -> Vocabulary | None:
    v = metadata.get("vocab")
    if v is None:
        return None
    return Vocabulary(v["tokens"], v.get("max_sequence_length", DEFAULT_MAX_LEN))


def _build(metadata: dict):
    kind = metadata.get("kind")
    seed = metadata.get("seed") or 0
    if kind == MiniLm.kind:
        lm = MiniLm(LmConfig.from_dict(metadata["config"]), seed=seed)
        lm.vocab = _vocab(metadata)
        if "schema" in metadata:
            lm.schema = Schema.from_dict(metadata["schema"])
        return lm
    if kind == GfttModel.kind:
        vocab = _vocab(metadata)
        if vocab is None or "schema" not in metadata:
            raise CheckpointError("gFTT checkpoint lacks vocabulary or schema metadata")
        return GfttModel(GfttConfig.from_dict(metadata["config"]), Schema.from_dict(metadata["schema"]),
                         vocab, seed=seed)
    raise ModelKindError(f"unknown model kind {kind!r}")
