"""File formats: FVT1 tensors, model bundles, binary PGM images and JSON manifests.

FVT1 layout (little-endian)::

    b"FVT1" | dtype:u8 (0=float32, 1=float64) | ndim:u8 | 2 zero bytes
    | ndim x u64 dims | row-major payload

A bundle (``FVB1``) stores named FVT1 records plus JSON metadata in one file::

    b"FVB1" | header_len:u64 | header JSON (utf-8) | FVT1 record ...

where the header is ``{"meta": {...}, "tensors": [name, ...]}`` and records
follow in the listed order.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    CorruptHeader,
    DuplicateId,
    FormatError,
    LabelOutOfRange,
    ManifestError,
    MissingPath,
    NonFiniteValue,
    TruncatedPayload,
    UnsupportedFormat,
)

MAGIC = b"FVT1"
BUNDLE_MAGIC = b"FVB1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_HEADER = struct.Struct("<4sBB2s")

TASKS = ("binary", "multiclass", "multilabel")


# ---------------------------------------------------------------------------
# tensors
# ---------------------------------------------------------------------------


def encode_tensor(array, dtype="float64") -> bytes:
    a = np.asarray(array, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("tensor contains non-finite values")
    if dtype in ("float64", "f8", 1):
        code = 1
    elif dtype in ("float32", "f4", 0):
        code = 0
    else:
        raise ValueError(f"unsupported storage dtype {dtype!r}")
    if a.ndim > 255:
        raise ValueError("too many dimensions")
    head = _HEADER.pack(MAGIC, code, a.ndim, b"\x00\x00")
    dims = struct.pack(f"<{a.ndim}Q", *a.shape)
    payload = np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()
    return head + dims + payload


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one FVT1 record starting at ``offset``.

    Returns the tensor as float64 and the offset just past its payload.
    """
    if len(buf) - offset < _HEADER.size:
        if buf[offset:offset + 4] != MAGIC[: len(buf) - offset]:
            raise BadMagic("missing FVT1 magic", offset)
        raise TruncatedPayload("header shorter than 8 bytes", offset)
    magic, code, ndim, reserved = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, found {magic!r}", offset)
    if code not in _DTYPES:
        raise CorruptHeader(f"unknown dtype code {code}", offset + 4)
    if reserved != b"\x00\x00":
        raise CorruptHeader("reserved bytes must be zero", offset + 6)
    pos = offset + _HEADER.size
    if len(buf) - pos < 8 * ndim:
        raise TruncatedPayload("dimension table cut short", pos)
    dims = struct.unpack_from(f"<{ndim}Q", buf, pos)
    if any(n == 0 for n in dims):
        raise CorruptHeader(f"zero-sized dimension in {dims}", pos)
    pos += 8 * ndim
    dt = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    nbytes = count * dt.itemsize
    if len(buf) - pos < nbytes:
        raise TruncatedPayload(
            f"declared {count} elements, only {(len(buf) - pos) // dt.itemsize} present", pos
        )
    data = np.frombuffer(buf, dtype=dt, count=count, offset=pos)
    bad = np.flatnonzero(~np.isfinite(data))
    if bad.size:
        raise NonFiniteValue(f"element {bad[0]} is not finite", pos + int(bad[0]) * dt.itemsize)
    out = data.astype(np.float64).reshape(dims)
    return out, pos + nbytes


def write_tensor(path, array, dtype="float64") -> None:
    Path(path).write_bytes(encode_tensor(array, dtype))


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf, 0)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after payload", end)
    return arr


def write_bundle(path, tensors: dict, meta: dict | None = None) -> None:
    header = json.dumps(
        {"meta": meta or {}, "tensors": list(tensors)}, sort_keys=True, separators=(",", ":")
    ).encode()
    parts = [BUNDLE_MAGIC, struct.pack("<Q", len(header)), header]
    parts.extend(encode_tensor(tensors[name]) for name in tensors)
    Path(path).write_bytes(b"".join(parts))


def read_bundle(path) -> tuple[dict, dict]:
    """Return ``(tensors, meta)`` from a bundle file."""
    buf = Path(path).read_bytes()
    if buf[:4] != BUNDLE_MAGIC:
        raise BadMagic(f"expected {BUNDLE_MAGIC!r}, found {buf[:4]!r}", 0)
    if len(buf) < 12:
        raise TruncatedPayload("bundle header cut short", 4)
    (hlen,) = struct.unpack_from("<Q", buf, 4)
    if len(buf) < 12 + hlen:
        raise TruncatedPayload("bundle JSON header cut short", 12)
    try:
        header = json.loads(buf[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeader(f"bad bundle header: {exc}", 12) from exc
    pos = 12 + hlen
    tensors = {}
    for name in header["tensors"]:
        tensors[name], pos = decode_tensor(buf, pos)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last record", pos)
    return tensors, header["meta"]


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GrayImage:
    """Brightness values of a 2D image ``(height, width)`` or volume ``(depth, height, width)``."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim not in (2, 3):
            raise ValueError(f"image must be 2D or 3D, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("image contains non-finite brightness values")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[-1]

    @property
    def height(self) -> int:
        return self.pixels.shape[-2]

    @property
    def depth(self) -> int | None:
        return self.pixels.shape[0] if self.pixels.ndim == 3 else None


def _pgm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens = []
    pos = 0
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise CorruptHeader("PGM header ended early", pos)
        tokens.append(buf[start:pos])
    return tokens, pos


def read_pgm(path) -> GrayImage:
    buf = Path(path).read_bytes()
    if buf[:2] in (b"P1", b"P2", b"P3", b"P4", b"P6"):
        raise UnsupportedFormat(f"only binary P5 PGM is supported, found {buf[:2]!r}", 0)
    if buf[:2] != b"P5":
        raise UnsupportedFormat(f"not a PGM file (magic {buf[:2]!r})", 0)
    tokens, pos = _pgm_tokens(buf, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise CorruptHeader(f"non-integer PGM header field: {exc}", 2) from exc
    if width <= 0 or height <= 0:
        raise CorruptHeader(f"bad PGM size {width}x{height}", 2)
    if not 0 < maxval <= 65535:
        raise CorruptHeader(f"maxval {maxval} outside 1..65535", 2)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise CorruptHeader("missing whitespace after maxval", pos)
    pos += 1
    dt = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    count = width * height
    if len(buf) - pos < count * dt.itemsize:
        raise CorruptHeader(f"pixel data cut short: need {count * dt.itemsize} bytes", pos)
    raw = np.frombuffer(buf, dtype=dt, count=count, offset=pos)
    return GrayImage(raw.astype(np.float64).reshape(height, width) / maxval)


def write_pgm(path, pixels, maxval: int = 255) -> None:
    """Write brightness values in [0, 1] as a P5 PGM, rounding to ``maxval`` levels."""
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim != 2:
        raise ValueError("PGM holds 2D images only")
    q = np.rint(np.clip(px, 0.0, 1.0) * maxval)
    dt = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    header = f"P5\n{px.shape[1]} {px.shape[0]}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + q.astype(dt).tobytes())


def load_image(path) -> GrayImage:
    """Load a PGM image or an FVT1 tensor holding a 2D image or 3D volume."""
    path = Path(path)
    if path.suffix.lower() in (".fvt", ".fvt1"):
        return GrayImage(read_tensor(path))
    return read_pgm(path)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sample:
    id: str
    labels: tuple
    image_path: Path | None = None
    stage_feature_paths: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DatasetManifest:
    task: str
    num_labels: int
    samples: tuple
    root: Path = Path(".")

    def __len__(self):
        return len(self.samples)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def label_array(self) -> np.ndarray:
        """Class indices ``(n,)`` for binary/multiclass, a 0/1 matrix ``(n, k)`` for multilabel."""
        if self.task == "multilabel":
            return np.array([s.labels for s in self.samples], dtype=np.int64).reshape(-1, self.num_labels)
        return np.array([s.labels[0] for s in self.samples], dtype=np.int64)

    def to_json(self) -> dict:
        def rel(p):
            try:
                return os.path.relpath(p, self.root)
            except ValueError:
                return str(p)

        out = []
        for s in self.samples:
            entry = {"id": s.id}
            if s.image_path is not None:
                entry["image_path"] = rel(s.image_path)
            if s.stage_feature_paths:
                entry["stage_feature_paths"] = {
                    str(k): rel(v) for k, v in sorted(s.stage_feature_paths.items())
                }
            entry["labels"] = list(s.labels) if self.task == "multilabel" else s.labels[0]
            out.append(entry)
        return {"task": self.task, "num_labels": self.num_labels, "samples": out}


def _parse_labels(raw, task, num_labels, sid):
    if task == "multilabel":
        if not isinstance(raw, list) or len(raw) != num_labels:
            raise LabelOutOfRange(f"sample {sid!r}: multilabel needs a 0/1 list of length {num_labels}")
        if any(v not in (0, 1) for v in raw):
            raise LabelOutOfRange(f"sample {sid!r}: multilabel entries must be 0 or 1, got {raw}")
        return tuple(int(v) for v in raw)
    if isinstance(raw, list):
        if len(raw) != 1:
            raise LabelOutOfRange(f"sample {sid!r}: {task} needs exactly one label, got {raw}")
        raw = raw[0]
    if isinstance(raw, bool) or not isinstance(raw, int):
        raise LabelOutOfRange(f"sample {sid!r}: label must be an integer, got {raw!r}")
    upper = 2 if task == "binary" else num_labels
    if not 0 <= raw < upper:
        raise LabelOutOfRange(f"sample {sid!r}: label {raw} outside [0, {upper})")
    return (raw,)


def parse_manifest(doc: dict, root=".", check_paths: bool = True) -> DatasetManifest:
    root = Path(root)
    task = doc.get("task")
    if task not in TASKS:
        raise ManifestError(f"task must be one of {TASKS}, got {task!r}")
    num_labels = int(doc.get("num_labels", 1))
    if num_labels < 1:
        raise ManifestError("num_labels must be positive")
    if task == "binary" and num_labels != 1:
        raise ManifestError("binary manifests have a single label column (num_labels=1)")
    seen = set()
    samples = []
    for entry in doc.get("samples", []):
        sid = str(entry["id"])
        if sid in seen:
            raise DuplicateId(f"duplicate sample id {sid!r}")
        seen.add(sid)
        labels = _parse_labels(entry.get("labels"), task, num_labels, sid)
        image = entry.get("image_path")
        image = root / image if image is not None else None
        stages = {int(k): root / v for k, v in (entry.get("stage_feature_paths") or {}).items()}
        if check_paths:
            for p in ([image] if image is not None else []) + list(stages.values()):
                if not p.exists():
                    raise MissingPath(f"sample {sid!r}: path {p} does not exist")
        samples.append(Sample(sid, labels, image, stages))
    return DatasetManifest(task, num_labels, tuple(samples), root)


def load_manifest(path, check_paths: bool = True) -> DatasetManifest:
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    return parse_manifest(doc, root=path.parent, check_paths=check_paths)


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    moved = DatasetManifest(manifest.task, manifest.num_labels, manifest.samples, path.parent)
    path.write_text(json.dumps(moved.to_json(), indent=1) + "\n")
