"""File formats: binary float32 tensors, named-tensor checkpoints, and the
line-delimited JSON records for tracklets and relation annotations.

Tensor layout (all little-endian)::

    b"OVRD" | u8 version=1 | u8 dtype=0 (float32) | u32 ndim | ndim x u64 dims | payload

Checkpoint layout::

    b"OVCK" | u64 header length | UTF-8 JSON header | concatenated tensor records

The JSON header has a ``meta`` object and an ``index`` mapping each tensor name
to the byte offset of its record (relative to the start of the record block).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .geometry import ROI_FEATURE_DIM, GeometryError, Tracklet

MAGIC = b"OVRD"
VERSION = 1
DTYPE_FLOAT32 = 0
CKPT_MAGIC = b"OVCK"
_HEADER = struct.Struct("<4sBBI")


class TensorFormatError(ValueError):
    pass


class BadMagicError(TensorFormatError):
    pass


class UnsupportedVersionError(TensorFormatError):
    pass


class UnsupportedDtypeError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class RecordError(ValueError):
    """A malformed tracklet/annotation/manifest record."""


def encode_tensor(shape, values) -> bytes:
    shape = [int(s) for s in shape]
    if any(s < 0 for s in shape):
        raise ValueError(f"negative dimension in shape {shape}")
    arr = np.asarray(values, dtype="<f4").reshape(-1)
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise ValueError(f"{arr.size} values do not fill shape {shape}")
    head = _HEADER.pack(MAGIC, VERSION, DTYPE_FLOAT32, len(shape))
    dims = struct.pack(f"<{len(shape)}Q", *shape)
    return head + dims + arr.tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor record at ``offset``; returns (array, end offset)."""
    if len(buf) - offset < _HEADER.size:
        if buf[offset:offset + 4] != MAGIC[: len(buf) - offset]:
            raise BadMagicError("bad magic")
        raise TruncatedPayloadError("truncated header")
    magic, version, dtype, ndim = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    if dtype != DTYPE_FLOAT32:
        raise UnsupportedDtypeError(f"unsupported dtype code {dtype}")
    pos = offset + _HEADER.size
    if len(buf) - pos < 8 * ndim:
        raise TruncatedPayloadError("truncated shape")
    shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
    pos += 8 * ndim
    nbytes = 4 * int(np.prod(shape, dtype=np.int64))
    if len(buf) - pos < nbytes:
        raise TruncatedPayloadError(f"payload needs {nbytes} bytes, {len(buf) - pos} available")
    arr = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape)
    return arr.astype(np.float32), pos + nbytes


def write_tensor(path, shape, values) -> None:
    data = encode_tensor(shape, values)
    with open(path, "wb") as fh:
        fh.write(data)


def read_tensor(path) -> tuple[tuple[int, ...], np.ndarray]:
    """Return ``(shape, values)`` with values as a float32 array of that shape."""
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise TensorFormatError(f"{len(buf) - end} trailing bytes after payload")
    return tuple(arr.shape), arr


# -- checkpoints --------------------------------------------------------------

def write_checkpoint(path, tensors: dict, meta: Optional[dict] = None) -> None:
    """Write named tensors (sorted by name) plus a JSON ``meta`` header."""
    blocks, index, offset = [], {}, 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        rec = encode_tensor(arr.shape, arr)
        index[name] = offset
        offset += len(rec)
        blocks.append(rec)
    header = json.dumps({"index": index, "meta": meta or {}}, sort_keys=True).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<Q", len(header)) + header)
        for rec in blocks:
            fh.write(rec)
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(tensors, meta)``; tensors are widened to float64."""
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint")
    (hlen,) = struct.unpack_from("<Q", buf, 4)
    header = json.loads(buf[12:12 + hlen])
    base = 12 + hlen
    tensors = {}
    for name, off in header["index"].items():
        arr, _ = decode_tensor(buf, base + off)
        tensors[name] = arr.astype(np.float64)
    return tensors, header["meta"]


# -- records ------------------------------------------------------------------

class TensorCache:
    """Loads each referenced tensor file once, relative to a base directory."""

    def __init__(self, base_dir="."):
        self.base_dir = Path(base_dir)
        self._arrays: dict[str, np.ndarray] = {}

    def row(self, ref) -> np.ndarray:
        fname, row = ref
        if fname not in self._arrays:
            _, arr = read_tensor(self.base_dir / fname)
            self._arrays[fname] = arr.reshape(arr.shape[0], -1)
        arr = self._arrays[fname]
        if not 0 <= int(row) < arr.shape[0]:
            raise RecordError(f"row {row} out of range for {fname} ({arr.shape[0]} rows)")
        return arr[int(row)].astype(np.float64)


def _parse_ref(rec, key, lineno):
    ref = rec.get(key)
    if (not isinstance(ref, (list, tuple)) or len(ref) != 2
            or not isinstance(ref[0], str) or not isinstance(ref[1], int)):
        raise RecordError(f"line {lineno}: field '{key}' must be [file, row]")
    return ref


def load_tracklets(path, cache: Optional[TensorCache] = None) -> list[Tracklet]:
    """Parse a tracklet JSONL file; features are resolved through ``cache``.

    Keys: ``id``, ``video``, ``start_frame``, ``boxes``, ``feature_ref`` and the
    optional ``embedding_ref`` for exported visual embeddings.
    """
    path = Path(path)
    cache = cache or TensorCache(path.parent)
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(f"{path.name} line {lineno}: invalid JSON ({exc.msg})") from None
            for key in ("id", "video", "start_frame", "boxes", "feature_ref"):
                if key not in rec:
                    raise RecordError(f"{path.name} line {lineno}: missing field '{key}'")
            boxes = rec["boxes"]
            if not isinstance(boxes, list) or not boxes or any(
                    not isinstance(b, list) or len(b) != 4 for b in boxes):
                raise RecordError(f"{path.name} line {lineno}: field 'boxes' must be a non-empty list of [x1,y1,x2,y2]")
            for k, (x1, y1, x2, y2) in enumerate(boxes):
                if x2 < x1:
                    raise RecordError(f"{path.name} line {lineno}: field 'boxes'[{k}] has x2 < x1")
                if y2 < y1:
                    raise RecordError(f"{path.name} line {lineno}: field 'boxes'[{k}] has y2 < y1")
            feat = cache.row(_parse_ref(rec, "feature_ref", lineno))
            if feat.shape != (ROI_FEATURE_DIM,):
                raise RecordError(
                    f"{path.name} line {lineno}: feature dimension {feat.shape[0]} != {ROI_FEATURE_DIM}")
            emb = None
            if rec.get("embedding_ref") is not None:
                emb = cache.row(_parse_ref(rec, "embedding_ref", lineno))
            try:
                out.append(Tracklet(str(rec["id"]), str(rec["video"]), int(rec["start_frame"]),
                                    np.asarray(boxes, dtype=np.float64), feat, emb))
            except GeometryError as exc:
                raise RecordError(f"{path.name} line {lineno}: {exc}") from None
    return out


@dataclass(frozen=True)
class RelationGT:
    video: str
    sub_id: str
    obj_id: str
    predicate: str
    sub_cls: str
    obj_cls: str

    @property
    def triplet(self) -> tuple[str, str, str]:
        return self.sub_cls, self.predicate, self.obj_cls


@dataclass
class Vocabulary:
    base: list
    novel: list

    def __post_init__(self):
        names = list(self.base) + list(self.novel)
        if len(set(names)) != len(names):
            raise RecordError("duplicate category names in vocabulary")

    @property
    def all(self) -> list:
        return list(self.base) + list(self.novel)

    def is_novel(self, name: str) -> bool:
        return name in set(self.novel)

    def __contains__(self, name) -> bool:
        return name in set(self.base) or name in set(self.novel)


@dataclass
class GroundTruth:
    """Relation instances plus the tracklets they reference.

    Identical triplets are kept as distinct instances (multi-label annotation).
    """

    instances: list = field(default_factory=list)
    tracklets: dict = field(default_factory=dict)  # (video, id) -> Tracklet
    classes: dict = field(default_factory=dict)  # (video, id) -> object class
    by_video: dict = field(default_factory=dict)  # video -> [instance index]

    def add(self, rel: RelationGT) -> None:
        self.by_video.setdefault(rel.video, []).append(len(self.instances))
        self.instances.append(rel)

    def video_instances(self, video: str) -> list:
        return [self.instances[i] for i in self.by_video.get(video, [])]

    def tracklet(self, video: str, tid: str) -> Tracklet:
        return self.tracklets[(video, tid)]

    def merge(self, other: "GroundTruth") -> None:
        for rel in other.instances:
            self.add(rel)
        self.tracklets.update(other.tracklets)
        self.classes.update(other.classes)


def load_annotations(path, objects: Vocabulary, predicates: Vocabulary,
                     tracklets: Iterable[Tracklet]) -> GroundTruth:
    """Parse relation records and resolve them against vocabularies/tracklets.

    Keys: ``video``, ``sub_id``, ``obj_id``, ``predicate``, ``sub_cls``, ``obj_cls``.
    """
    path = Path(path)
    gt = GroundTruth()
    known = {(t.video, t.id): t for t in tracklets}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(f"{path.name} line {lineno}: invalid JSON ({exc.msg})") from None
            for key in ("video", "sub_id", "obj_id", "predicate", "sub_cls", "obj_cls"):
                if key not in rec:
                    raise RecordError(f"{path.name} line {lineno}: missing field '{key}'")
            rel = RelationGT(*(str(rec[k]) for k in
                               ("video", "sub_id", "obj_id", "predicate", "sub_cls", "obj_cls")))
            if rel.predicate not in predicates:
                raise RecordError(f"{path.name} line {lineno}: unknown predicate '{rel.predicate}'")
            for key, cls in (("sub_cls", rel.sub_cls), ("obj_cls", rel.obj_cls)):
                if cls not in objects:
                    raise RecordError(f"{path.name} line {lineno}: unknown object category '{cls}' in '{key}'")
            for key, tid, cls in (("sub_id", rel.sub_id, rel.sub_cls), ("obj_id", rel.obj_id, rel.obj_cls)):
                ref = (rel.video, tid)
                if ref not in known:
                    raise RecordError(f"{path.name} line {lineno}: '{key}' references unknown tracklet {tid!r}")
                prev = gt.classes.setdefault(ref, cls)
                if prev != cls:
                    raise RecordError(f"{path.name} line {lineno}: tracklet {tid!r} labelled both {prev!r} and {cls!r}")
                gt.tracklets[ref] = known[ref]
            gt.add(rel)
    return gt


# -- manifest -----------------------------------------------------------------

@dataclass
class VideoEntry:
    id: str
    split: str
    n_frames: int
    tracklets: Path
    annotations: Path
    detections: Optional[Path] = None


@dataclass
class DatasetManifest:
    root: Path
    objects: Vocabulary
    predicates: Vocabulary
    videos: list
    tensors: list
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list:
        return [v for v in self.videos if v.split == name]


def _vocab(entries, kind) -> Vocabulary:
    base, novel = [], []
    for e in entries:
        if e.get("split") not in ("base", "novel"):
            raise RecordError(f"{kind} category {e.get('name')!r}: split must be 'base' or 'novel'")
        (base if e["split"] == "base" else novel).append(str(e["name"]))
    return Vocabulary(base, novel)


def read_manifest(path) -> DatasetManifest:
    """Read and validate a dataset manifest (paths are relative to it)."""
    path = Path(path)
    doc = json.loads(path.read_text())
    root = path.parent
    objects = _vocab(doc["objects"], "object")
    predicates = _vocab(doc["predicates"], "predicate")
    videos = []
    for v in doc["videos"]:
        det = v.get("detections")
        entry = VideoEntry(str(v["id"]), v.get("split", "test"), int(v["n_frames"]),
                           root / v["tracklets"], root / v["annotations"],
                           root / det if det else None)
        for p in (entry.tracklets, entry.annotations, entry.detections):
            if p is not None and not p.exists():
                raise RecordError(f"manifest references missing file {p}")
        videos.append(entry)
    tensors = [root / t for t in doc.get("tensors", [])]
    for p in tensors:
        if not p.exists():
            raise RecordError(f"manifest references missing file {p}")
    return DatasetManifest(root, objects, predicates, videos, tensors, doc.get("meta", {}))


def write_manifest(path, objects: Vocabulary, predicates: Vocabulary, videos: list,
                   tensors: list, meta: Optional[dict] = None) -> None:
    doc = {
        "objects": [{"name": n, "split": "base"} for n in objects.base]
        + [{"name": n, "split": "novel"} for n in objects.novel],
        "predicates": [{"name": n, "split": "base"} for n in predicates.base]
        + [{"name": n, "split": "novel"} for n in predicates.novel],
        "videos": videos,
        "tensors": tensors,
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


@dataclass
class VideoData:
    id: str
    split: str
    n_frames: int
    gt_tracklets: list
    detections: list
    gt: GroundTruth


@dataclass
class Dataset:
    manifest: DatasetManifest
    videos: list

    @property
    def objects(self) -> Vocabulary:
        return self.manifest.objects

    @property
    def predicates(self) -> Vocabulary:
        return self.manifest.predicates

    def split(self, name: str) -> list:
        return [v for v in self.videos if v.split == name]

    def ground_truth(self, split: str) -> GroundTruth:
        gt = GroundTruth()
        for v in self.split(split):
            gt.merge(v.gt)
        return gt


def load_dataset(manifest_path) -> Dataset:
    manifest = read_manifest(manifest_path)
    cache = TensorCache(manifest.root)
    videos = []
    for entry in manifest.videos:
        tracks = load_tracklets(entry.tracklets, cache)
        dets = load_tracklets(entry.detections, cache) if entry.detections else []
        gt = load_annotations(entry.annotations, manifest.objects, manifest.predicates, tracks)
        videos.append(VideoData(entry.id, entry.split, entry.n_frames, tracks, dets, gt))
    return Dataset(manifest, videos)
