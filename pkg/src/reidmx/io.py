"""Record sets and the on-disk binary formats.

Everything written here is little-endian with a versioned header and is
re-readable by the same release.  Writes go to a temp file in the target
directory followed by an atomic rename, so readers never observe a
partial file.

Embedding file layout (magic ``REMB``, version 1)::

    magic     4 bytes  b"REMB"
    version   u16
    count     u32      number of records
    dim       u32      vector dimensionality
    precision u8       0 = binary32 vectors, 1 = binary16-quantized
    records   count *  [person_id u32 | camera_id u16 | role u8 | dim * f32]

Role codes: 0 = query, 1 = gallery, 2 = train.  A precision flag of 1
promises that every vector element survives a binary16 round trip; the
writer enforces it and the reader verifies it.

Checkpoint layout (magic ``RCKP``, version 1)::

    magic 4 | version u16 | config_hash 32 (sha256) | step u64 | epoch u32
    arch_json   u32 length + utf-8 JSON (layer stack + precision plan)
    params      u32 count, then name/shape/f32 data per parameter
    adam        u64 t, then m and v arrays in parameter order
    bn_state    u32 count, then name + running mean/var per batch-norm
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .half import is_f16_exact

__all__ = [
    "Role",
    "EmbeddingSet",
    "FormatError",
    "EMBED_MAGIC",
    "CKPT_MAGIC",
    "atomic_write_bytes",
    "config_hash",
    "write_embedding_file",
    "read_embedding_file",
    "Checkpoint",
    "write_checkpoint",
    "read_checkpoint",
]

EMBED_MAGIC = b"REMB"
EMBED_VERSION = 1
CKPT_MAGIC = b"RCKP"
CKPT_VERSION = 1


class FormatError(Exception):
    """A file failed structural validation."""


class Role(enum.IntEnum):
    QUERY = 0
    GALLERY = 1
    TRAIN = 2


@dataclass
class EmbeddingSet:
    """Vectors with identity, camera and split labels.

    Serves double duty: synthetic datasets store network *inputs* here,
    and the embedder stores network *outputs* in the same shape.
    """

    vectors: np.ndarray
    person_ids: np.ndarray
    camera_ids: np.ndarray
    roles: np.ndarray

    def __post_init__(self) -> None:
        self.vectors = np.ascontiguousarray(np.asarray(self.vectors, dtype=np.float32))
        self.person_ids = np.asarray(self.person_ids, dtype=np.int64)
        self.camera_ids = np.asarray(self.camera_ids, dtype=np.int64)
        self.roles = np.asarray(self.roles, dtype=np.int64)
        n = self.vectors.shape[0]
        if self.vectors.ndim != 2:
            raise ValueError("vectors must be a 2-D array")
        if not (self.person_ids.shape == self.camera_ids.shape == self.roles.shape == (n,)):
            raise ValueError("label arrays must match the number of vectors")
        if n and (self.person_ids.min() < 0 or self.camera_ids.min() < 0):
            raise ValueError("person and camera ids must be non-negative")
        valid = np.isin(self.roles, [int(r) for r in Role])
        if not valid.all():
            raise ValueError("roles must be 0 (query), 1 (gallery) or 2 (train)")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def with_role(self, role: Role) -> "EmbeddingSet":
        keep = self.roles == int(role)
        return EmbeddingSet(self.vectors[keep], self.person_ids[keep],
                            self.camera_ids[keep], self.roles[keep])

    def take(self, index: np.ndarray) -> "EmbeddingSet":
        return EmbeddingSet(self.vectors[index], self.person_ids[index],
                            self.camera_ids[index], self.roles[index])


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write via a same-directory temp file and an atomic rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def config_hash(config: dict) -> str:
    """Stable sha256 hex digest of a configuration mapping."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def write_embedding_file(path: str, records: EmbeddingSet, precision_flag: int = 0) -> None:
    if precision_flag not in (0, 1):
        raise ValueError("precision flag must be 0 (binary32) or 1 (binary16)")
    if precision_flag == 1 and not is_f16_exact(records.vectors):
        raise ValueError("precision flag 1 requires binary16-representable vectors; "
                         "quantize them before writing")
    n, dim = records.vectors.shape
    if n and (records.person_ids.max() > 0xFFFFFFFF or records.camera_ids.max() > 0xFFFF):
        raise ValueError("person_id must fit u32 and camera_id u16")
    out = bytearray()
    out += EMBED_MAGIC
    out += struct.pack("<HIIB", EMBED_VERSION, n, dim, precision_flag)
    for i in range(n):
        out += struct.pack("<IHB", int(records.person_ids[i]),
                           int(records.camera_ids[i]), int(records.roles[i]))
        out += records.vectors[i].astype("<f4").tobytes()
    atomic_write_bytes(path, bytes(out))


def read_embedding_file(path: str) -> tuple[EmbeddingSet, int]:
    """Read and validate an embedding file; returns (records, precision_flag)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    head = 4 + struct.calcsize("<HIIB")
    if len(blob) < head or blob[:4] != EMBED_MAGIC:
        raise FormatError(f"{path}: not an embedding file (bad magic)")
    version, n, dim, flag = struct.unpack_from("<HIIB", blob, 4)
    if version != EMBED_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if flag not in (0, 1):
        raise FormatError(f"{path}: bad precision flag {flag}")
    rec_size = 4 + 2 + 1 + 4 * dim
    if len(blob) != head + n * rec_size:
        raise FormatError(f"{path}: truncated or oversized "
                          f"(expected {head + n * rec_size} bytes, got {len(blob)})")
    pids = np.empty(n, dtype=np.int64)
    cams = np.empty(n, dtype=np.int64)
    roles = np.empty(n, dtype=np.int64)
    vecs = np.empty((n, dim), dtype=np.float32)
    off = head
    for i in range(n):
        pid, cam, role = struct.unpack_from("<IHB", blob, off)
        off += 7
        if role not in (0, 1, 2):
            raise FormatError(f"{path}: record {i} has invalid role {role}")
        pids[i], cams[i], roles[i] = pid, cam, role
        vecs[i] = np.frombuffer(blob, dtype="<f4", count=dim, offset=off)
        off += 4 * dim
    records = EmbeddingSet(vecs, pids, cams, roles)
    if flag == 1 and not is_f16_exact(records.vectors):
        raise FormatError(f"{path}: precision flag 1 but vectors are not "
                          "binary16-representable")
    return records, flag


@dataclass
class Checkpoint:
    """Deserialized training state."""

    arch: dict
    masters: dict
    adam_t: int
    adam_m: dict
    adam_v: dict
    bn_state: dict
    step: int
    epoch: int
    config_hash_hex: str


def _pack_named_array(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    head = struct.pack("<H", len(nb)) + nb
    a = np.ascontiguousarray(arr, dtype=np.float32)
    head += struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.astype("<f4").tobytes()


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, fmt: str):
        vals = struct.unpack_from(fmt, self.blob, self.off)
        self.off += struct.calcsize(fmt)
        return vals

    def raw(self, nbytes: int) -> bytes:
        if self.off + nbytes > len(self.blob):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.off:self.off + nbytes]
        self.off += nbytes
        return out

    def named_array(self) -> tuple[str, np.ndarray]:
        (nlen,) = self.take("<H")
        name = self.raw(nlen).decode("utf-8")
        (ndim,) = self.take("<B")
        shape = self.take(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(self.raw(4 * count), dtype="<f4").reshape(shape)
        return name, data.astype(np.float32)


def write_checkpoint(path: str, *, arch: dict, masters: dict, adam_t: int,
                     adam_m: dict, adam_v: dict, bn_state: dict, step: int,
                     epoch: int, config_hash_hex: str) -> None:
    out = bytearray()
    out += CKPT_MAGIC
    out += struct.pack("<H", CKPT_VERSION)
    out += bytes.fromhex(config_hash_hex).ljust(32, b"\0")[:32]
    out += struct.pack("<QI", step, epoch)
    arch_blob = json.dumps(arch, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(arch_blob)) + arch_blob
    names = sorted(masters)
    out += struct.pack("<I", len(names))
    for name in names:
        out += _pack_named_array(name, masters[name])
    out += struct.pack("<Q", adam_t)
    for name in names:
        out += _pack_named_array(name, adam_m[name])
    for name in names:
        out += _pack_named_array(name, adam_v[name])
    bn_names = sorted(bn_state)
    out += struct.pack("<I", len(bn_names))
    for name in bn_names:
        mean, var = bn_state[name]
        out += _pack_named_array(name + ".mean", mean)
        out += _pack_named_array(name + ".var", var)
    atomic_write_bytes(path, bytes(out))


def read_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 6 or blob[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    r = _Reader(blob, path)
    r.off = 4
    (version,) = r.take("<H")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    digest = r.raw(32).hex()
    step, epoch = r.take("<QI")
    (alen,) = r.take("<I")
    arch = json.loads(r.raw(alen).decode("utf-8"))
    (nparams,) = r.take("<I")
    masters = dict(r.named_array() for _ in range(nparams))
    (adam_t,) = r.take("<Q")
    adam_m = dict(r.named_array() for _ in range(nparams))
    adam_v = dict(r.named_array() for _ in range(nparams))
    (nbn,) = r.take("<I")
    bn_state = {}
    for _ in range(nbn):
        mname, mean = r.named_array()
        vname, var = r.named_array()
        if not (mname.endswith(".mean") and vname.endswith(".var")):
            raise FormatError(f"{path}: malformed batch-norm block")
        bn_state[mname[:-5]] = (mean, var)
    if r.off != len(blob):
        raise FormatError(f"{path}: {len(blob) - r.off} trailing bytes")
    return Checkpoint(arch=arch, masters=masters, adam_t=adam_t, adam_m=adam_m,
                      adam_v=adam_v, bn_state=bn_state, step=step, epoch=epoch,
                      config_hash_hex=digest)
