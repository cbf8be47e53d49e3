"""Single-file fp16 feature container (``MLSPFS01``).

Layout, all little-endian::

    0   8s   magic "MLSPFS01"
    8   u16  version (1)
    10  u8   kind (0 narrow, 1 wide)
    11  u8   spatial (1 or 5)
    12  u32  b, kernels per spatial cell
    16  u64  image count
    24  u16  augmentations per image (8, or 1 for un-augmented stores)
    26  u32  CRC-32 of the index block
    30  u16  profile name length, then the name (utf-8)
    ...      zero padding to a multiple of 8
    index    count x (u64 image id, u64 byte offset of the image's records)
    ...      zero padding to a multiple of 64 (= header size)
    payload  count x augs x spatial*spatial*b binary16 values

Image ``pos`` (insertion order) starts at ``header_size + pos*augs*record``
where ``record = spatial**2 * b * 2`` bytes.  A sidecar manifest CSV
(``image_id,filename``) maps ids to source files.
"""
import csv
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import kernels
from .pooling import NARROW, SPATIAL, WIDE, MlspFeature

MAGIC = b"MLSPFS01"
VERSION = 1
_FIXED = struct.Struct("<8sHBBIQHIH")
_KIND_CODE = {NARROW: 0, WIDE: 1}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}


class StoreError(ValueError):
    pass


def fp16_encode(values):
    """IEEE binary16 bits of ``values`` (round to nearest even).

    Returns ``(bits, n_overflow)``; magnitudes that would round past the
    largest finite half are clamped to +-65504 and counted.
    """
    return kernels.fp16_encode(values)


def fp16_decode(bits):
    return kernels.fp16_decode(bits)


@dataclass(frozen=True)
class StoreHeader:
    kind: str
    b: int
    augs: int
    profile: str = ""
    count: int = 0

    def __post_init__(self):
        if self.kind not in SPATIAL:
            raise StoreError(f"unknown feature kind {self.kind!r}")
        if self.b < 1:
            raise StoreError(f"b must be positive, got {self.b}")
        if self.augs not in (1, 8):
            raise StoreError(f"augmentations per image must be 8 or 1, got {self.augs}")

    @property
    def spatial(self):
        return SPATIAL[self.kind]

    @property
    def record_values(self):
        return self.spatial * self.spatial * self.b

    @property
    def record_bytes(self):
        return self.record_values * 2

    @property
    def feature_shape(self):
        """Per-record model input shape."""
        return (self.b,) if self.kind == NARROW else (self.spatial, self.spatial, self.b)

    def layout(self):
        """Return ``(index_offset, header_size)`` for this header."""
        name_len = len(self.profile.encode("utf-8"))
        index_offset = _align(_FIXED.size + name_len, 8)
        return index_offset, _align(index_offset + 16 * self.count, 64)

    def payload_bytes(self):
        return self.count * self.augs * self.record_bytes


def _align(n, k):
    return -(-n // k) * k


def _pack_header(header, index_crc):
    name = header.profile.encode("utf-8")
    head = _FIXED.pack(MAGIC, VERSION, _KIND_CODE[header.kind], header.spatial, header.b,
                       header.count, header.augs, index_crc, len(name)) + name
    index_offset, _ = header.layout()
    return head + b"\0" * (index_offset - len(head))


def _parse_header(data):
    if len(data) < _FIXED.size:
        raise StoreError(f"file too short for header ({len(data)} bytes)")
    magic, version, kind, spatial, b, count, augs, crc, name_len = _FIXED.unpack_from(data)
    if magic != MAGIC:
        raise StoreError(f"bad magic {magic!r}")
    if version != VERSION:
        raise StoreError(f"unsupported version {version}")
    if kind not in _CODE_KIND:
        raise StoreError(f"unknown kind code {kind}")
    name = data[_FIXED.size:_FIXED.size + name_len].decode("utf-8", "replace")
    header = StoreHeader(_CODE_KIND[kind], b, augs, name, count)
    if header.spatial != spatial:
        raise StoreError(f"spatial {spatial} inconsistent with kind {header.kind}")
    return header, crc


class StoreWriter:
    """Single-writer builder for a feature store.

    Records stream into ``<path>.payload.tmp``; :meth:`finalize` writes the
    header and index, appends the payload and atomically renames the result
    onto ``path``.
    """

    def __init__(self, path, kind, b, augs=8, profile=""):
        self.path = os.fspath(path)
        self.header = StoreHeader(kind, int(b), int(augs), profile)
        self.ids = []
        self._seen = set()
        self.overflow_count = 0
        self._tmp = self.path + ".payload.tmp"
        self._fh = open(self._tmp, "wb")

    def append(self, image_id, features):
        """Quantize and write one image's augmentation records.

        Either all records are written or none (the payload is truncated
        back on failure).
        """
        image_id = int(image_id)
        if not 0 <= image_id < 2 ** 64:
            raise StoreError(f"image id {image_id} outside u64 range")
        if image_id in self._seen:
            raise StoreError(f"duplicate image id {image_id}")
        features = list(features)
        h = self.header
        if len(features) != h.augs:
            raise StoreError(f"image {image_id}: {len(features)} augmentations, "
                             f"store expects {h.augs}")
        rows = []
        for k, feat in enumerate(features):
            vals = feat.values if isinstance(feat, MlspFeature) else np.asarray(feat)
            kind = feat.kind if isinstance(feat, MlspFeature) else h.kind
            if kind != h.kind or vals.size != h.record_values or (
                    vals.ndim == 3 and vals.shape != (h.spatial, h.spatial, h.b)):
                raise StoreError(f"image {image_id} aug {k}: shape {vals.shape} ({kind}) does "
                                 f"not match store ({h.spatial}, {h.spatial}, {h.b}) ({h.kind})")
            rows.append(vals.reshape(-1))
        bits, n_over = fp16_encode(np.stack(rows))
        payload = bits.astype("<u2").tobytes()
        start = self._fh.tell()
        try:
            self._fh.write(payload)
            self._fh.flush()
        except OSError as exc:
            self._fh.seek(start)
            self._fh.truncate()
            raise StoreError(f"image {image_id}: write failed ({exc})") from exc
        self.overflow_count += n_over
        self.ids.append(image_id)
        self._seen.add(image_id)

    def finalize(self):
        self._fh.close()
        h = StoreHeader(self.header.kind, self.header.b, self.header.augs,
                        self.header.profile, len(self.ids))
        index_offset, header_size = h.layout()
        offsets = header_size + np.arange(len(self.ids), dtype=np.uint64) * np.uint64(
            h.augs * h.record_bytes)
        index = np.empty((len(self.ids), 2), dtype="<u8")
        index[:, 0] = self.ids
        index[:, 1] = offsets
        index_bytes = index.tobytes()
        head = _pack_header(h, zlib.crc32(index_bytes))
        out_tmp = self.path + ".tmp"
        with open(out_tmp, "wb") as out, open(self._tmp, "rb") as src:
            out.write(head)
            out.write(index_bytes)
            out.write(b"\0" * (header_size - index_offset - len(index_bytes)))
            while True:
                chunk = src.read(1 << 24)
                if not chunk:
                    break
                out.write(chunk)
        os.replace(out_tmp, self.path)
        os.remove(self._tmp)
        self.header = h
        return h

    def abort(self):
        if not self._fh.closed:
            self._fh.close()
        for p in (self._tmp, self.path + ".tmp"):
            if os.path.exists(p):
                os.remove(p)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.finalize()
        else:
            self.abort()
        return False


class FeatureStore:
    """Read-only, random-access view of a finalized store (memory mapped)."""

    def __init__(self, path):
        self.path = os.fspath(path)
        with open(self.path, "rb") as fh:
            head = fh.read(_FIXED.size + 65536)
        self.header, crc = _parse_header(head)
        index_offset, self.header_size = self.header.layout()
        n = self.header.count
        size = os.path.getsize(self.path)
        if size < self.header_size + self.header.payload_bytes():
            raise StoreError(f"{self.path}: payload short by "
                             f"{self.header_size + self.header.payload_bytes() - size} bytes")
        index = np.fromfile(self.path, dtype="<u8", count=2 * n, offset=index_offset)
        index = index.reshape(n, 2)
        self.ids = index[:, 0].astype(np.uint64)
        self.offsets = index[:, 1]
        self._pos = {int(i): p for p, i in enumerate(self.ids)}
        if len(self._pos) != n:
            raise StoreError(f"{self.path}: duplicate image ids in index")
        if n:
            self._payload = np.memmap(self.path, dtype="<u2", mode="r", offset=self.header_size,
                                      shape=(n, self.header.augs, self.header.record_values))
        else:
            self._payload = np.zeros((0, self.header.augs, self.header.record_values), "<u2")

    @property
    def augs(self):
        return self.header.augs

    @property
    def kind(self):
        return self.header.kind

    @property
    def feature_shape(self):
        return self.header.feature_shape

    def __len__(self):
        return self.header.count

    def __contains__(self, image_id):
        return int(image_id) in self._pos

    def position(self, image_id):
        try:
            return self._pos[int(image_id)]
        except KeyError:
            raise KeyError(f"image id {image_id} not in store {self.path}") from None

    def offset(self, image_id, aug_index=0):
        pos = self.position(image_id)
        return self.header_size + (pos * self.augs + aug_index) * self.header.record_bytes

    def read(self, image_id, aug_index):
        """Decode one record to an :class:`MlspFeature` (float32)."""
        if not 0 <= aug_index < self.augs:
            raise IndexError(f"augmentation {aug_index} out of range for {self.augs}-aug store")
        bits = np.asarray(self._payload[self.position(image_id), aug_index])
        s, b = self.header.spatial, self.header.b
        return MlspFeature(self.kind, fp16_decode(bits).reshape(s, s, b))

    def read_batch(self, ids, augs):
        """Decode records for parallel sequences of ids and augmentation
        indices into a float32 array of shape ``(n,) + feature_shape``."""
        pos = np.fromiter((self.position(i) for i in ids), dtype=np.int64)
        augs = np.broadcast_to(np.asarray(augs, dtype=np.int64), pos.shape)
        if augs.size and (augs.min() < 0 or augs.max() >= self.augs):
            raise IndexError(f"augmentation index out of range for {self.augs}-aug store")
        bits = self._payload[pos, augs]
        return fp16_decode(bits).reshape((len(pos),) + self.feature_shape)

    def close(self):
        self._payload = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


class InMemoryFeatures:
    """Array-backed feature source with the :class:`FeatureStore` read API.

    ``values`` has shape ``(n_images, augs) + feature_shape`` and keeps its
    dtype (no fp16 quantization).
    """

    def __init__(self, ids, values, kind):
        self.ids = np.asarray(ids, dtype=np.uint64)
        self.values = np.asarray(values)
        self.kind = kind
        self._pos = {int(i): p for p, i in enumerate(self.ids)}
        if len(self._pos) != len(self.ids):
            raise StoreError("duplicate image ids")

    @property
    def augs(self):
        return self.values.shape[1]

    @property
    def feature_shape(self):
        return self.values.shape[2:]

    def __len__(self):
        return len(self.ids)

    def __contains__(self, image_id):
        return int(image_id) in self._pos

    def position(self, image_id):
        return self._pos[int(image_id)]

    def read_batch(self, ids, augs):
        pos = np.fromiter((self._pos[int(i)] for i in ids), dtype=np.int64)
        augs = np.broadcast_to(np.asarray(augs, dtype=np.int64), pos.shape)
        return self.values[pos, augs].astype(np.float32, copy=False)


def store_create(path, header):
    return StoreWriter(path, header.kind, header.b, header.augs, header.profile)


def store_append(writer, image_id, features):
    writer.append(image_id, features)


def store_read(path, image_id, aug_index):
    with FeatureStore(path) as st:
        return st.read(image_id, aug_index)


@dataclass(frozen=True)
class Defect:
    offset: int
    message: str

    def __str__(self):
        return f"@{self.offset}: {self.message}"


def store_validate(path, sample=256):
    """Structural check of a store file; returns a list of :class:`Defect`.

    Verifies magic/version, index checksum, id uniqueness, offset
    monotonicity and values, payload length, and scans up to ``sample``
    evenly spaced records for NaN/inf.
    """
    defects = []
    with open(path, "rb") as fh:
        data = fh.read(_FIXED.size + 65536)
    try:
        header, crc = _parse_header(data)
    except StoreError as exc:
        return [Defect(0, str(exc))]
    index_offset, header_size = header.layout()
    size = os.path.getsize(path)
    n = header.count
    if size < index_offset + 16 * n:
        return [Defect(index_offset, f"index truncated: need {16 * n} bytes, "
                                     f"file ends {size - index_offset} bytes after index start")]
    with open(path, "rb") as fh:
        fh.seek(index_offset)
        raw = fh.read(16 * n)
    if zlib.crc32(raw) != crc:
        defects.append(Defect(index_offset, "index checksum mismatch"))
    index = np.frombuffer(raw, dtype="<u8").reshape(n, 2)
    seen = {}
    stride = header.augs * header.record_bytes
    for p in range(n):
        ident, off = int(index[p, 0]), int(index[p, 1])
        entry = index_offset + 16 * p
        if ident in seen:
            defects.append(Defect(entry, f"duplicate image id {ident} (first at entry {seen[ident]})"))
        else:
            seen[ident] = p
        if p and off <= int(index[p - 1, 1]):
            defects.append(Defect(entry + 8, f"offset {off} not increasing"))
        elif off != header_size + p * stride:
            defects.append(Defect(entry + 8, f"offset {off} != expected {header_size + p * stride}"))
    expected = header_size + header.payload_bytes()
    if size < expected:
        defects.append(Defect(size, f"payload short by {expected - size} bytes"))
        return defects
    if size > expected:
        defects.append(Defect(expected, f"{size - expected} trailing bytes after payload"))
    total = n * header.augs
    if total:
        mm = np.memmap(path, dtype="<u2", mode="r", offset=header_size,
                       shape=(total, header.record_values))
        for r in np.unique(np.linspace(0, total - 1, min(sample, total)).astype(np.int64)):
            bad = (np.asarray(mm[r]) & 0x7C00) == 0x7C00
            if bad.any():
                k = int(np.argmax(bad))
                defects.append(Defect(header_size + int(r) * header.record_bytes + 2 * k,
                                      f"non-finite value in record {int(r)}"))
        del mm
    return defects


def write_manifest(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "filename"])
        for ident, name in rows:
            w.writerow([int(ident), name])


def read_manifest(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or reader.fieldnames[:2] != ["image_id", "filename"]:
            raise ValueError(f"{path}: manifest header must be 'image_id,filename'")
        return [(int(r["image_id"]), r["filename"]) for r in reader]
