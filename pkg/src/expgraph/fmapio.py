"""Feature-map container I/O, response normalization, and unit->image projection.

Container layout (all integers little-endian):

    offset 0   magic "FMAP0001" (8 ASCII bytes)
    offset 8   u32 header length
    offset 12  UTF-8 JSON header (canonical: sorted keys, separators ",":")
    then       depth*height*width float32 values, filter-major, then row-major

Header fields: layer_id (str), image_id (str), depth/height/width (int),
stride_px (float), offset_px ([float, float]), image_size_px ([int, int],
width then height).  Real-valued fields must be JSON floats (e.g. 8.0, not
8): a container is valid only if its header bytes equal the canonical JSON
re-serialization of their own parse, which makes write(load(f)) == f for
every file load() accepts.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagic,
    HeaderParseError,
    IndexOutOfRange,
    NonFiniteValues,
    PayloadSizeMismatch,
    SchemaError,
)

MAGIC = b"FMAP0001"
_HEADER_OFFSET = 12

_HEADER_KEYS = (
    "depth",
    "height",
    "image_id",
    "image_size_px",
    "layer_id",
    "offset_px",
    "stride_px",
    "width",
)


@dataclass(frozen=True)
class LayerMeta:
    """Geometry of one conv-layer's activation grid.

    stride_px and offset_px map grid coordinates (i, j) to the pixel
    position of the unit's receptive-field center:
    pixel = offset_px + stride_px * (j, i).
    """

    layer_id: str
    depth: int
    height: int
    width: int
    stride_px: float
    offset_px: tuple[float, float]
    image_size_px: tuple[int, int]  # (width, height)

    def __post_init__(self):
        if min(self.depth, self.height, self.width) < 1:
            raise SchemaError(f"layer {self.layer_id}: D,H,W must be >= 1")
        if not (self.stride_px > 0):
            raise SchemaError(f"layer {self.layer_id}: stride_px must be > 0")
        if min(self.image_size_px) < 1:
            raise SchemaError(f"layer {self.layer_id}: image_size_px must be >= 1")

    @property
    def image_diag_px(self) -> float:
        return math.hypot(self.image_size_px[0], self.image_size_px[1])

    @property
    def unit_count(self) -> int:
        return self.depth * self.height * self.width


@dataclass
class FeatureMap:
    """Dense activation tensor of one conv-layer for one image."""

    meta: LayerMeta
    image_id: str
    values: np.ndarray  # (D, H, W) float32

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        expected = (self.meta.depth, self.meta.height, self.meta.width)
        if self.values.shape != expected:
            raise SchemaError(
                f"values shape {self.values.shape} != meta shape {expected}"
            )
        if not np.isfinite(self.values).all():
            raise NonFiniteValues("feature map contains non-finite values")


@dataclass(frozen=True)
class Unit:
    """One feature-map unit with its projected position and entity count."""

    d: int
    i: int
    j: int
    p: tuple[float, float]  # normalized image coordinates in [0,1]^2
    f: float  # normalized response
    mass: float  # activation-entity count, beta * max(f, 0)


@dataclass
class FeatureMapSet:
    """All selected conv-layer maps of one image, ordered bottom-to-top."""

    image_id: str
    maps: list[FeatureMap] = field(default_factory=list)

    def __post_init__(self):
        ids = [fm.meta.layer_id for fm in self.maps]
        if len(set(ids)) != len(ids):
            raise SchemaError(f"duplicate layer_ids in image {self.image_id}: {ids}")

    def layer(self, layer_id: str) -> FeatureMap:
        for fm in self.maps:
            if fm.meta.layer_id == layer_id:
                return fm
        raise KeyError(layer_id)


# ---------------------------------------------------------------------------
# container read/write


def _canonical_header(doc: dict) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _require_int(doc, key, minimum=1):
    v = doc[key]
    if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
        raise HeaderParseError(
            f"header field {key!r} at byte {_HEADER_OFFSET}: expected integer >= {minimum}, got {v!r}"
        )
    return v


def _require_float(doc, key_path, v):
    if not isinstance(v, float):
        raise HeaderParseError(
            f"header field {key_path!r} at byte {_HEADER_OFFSET}: expected JSON float, got {v!r}"
        )
    return v


def dump_fmap_bytes(fm: FeatureMap) -> bytes:
    header = {
        "depth": fm.meta.depth,
        "height": fm.meta.height,
        "image_id": fm.image_id,
        "image_size_px": [int(fm.meta.image_size_px[0]), int(fm.meta.image_size_px[1])],
        "layer_id": fm.meta.layer_id,
        "offset_px": [float(fm.meta.offset_px[0]), float(fm.meta.offset_px[1])],
        "stride_px": float(fm.meta.stride_px),
        "width": fm.meta.width,
    }
    hbytes = _canonical_header(header)
    payload = np.ascontiguousarray(fm.values, dtype="<f4").tobytes()
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + payload


def load_fmap_bytes(buf: bytes) -> FeatureMap:
    if buf[:8] != MAGIC:
        raise BadMagic(f"bad magic at byte 0: {buf[:8]!r}")
    if len(buf) < _HEADER_OFFSET:
        raise HeaderParseError("header length field at byte 8: file truncated")
    (hlen,) = struct.unpack_from("<I", buf, 8)
    hbytes = buf[_HEADER_OFFSET : _HEADER_OFFSET + hlen]
    if len(hbytes) != hlen:
        raise HeaderParseError(
            f"header at byte {_HEADER_OFFSET}: declared {hlen} bytes, file has {len(hbytes)}"
        )
    try:
        doc = json.loads(hbytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderParseError(f"header at byte {_HEADER_OFFSET}: {exc}") from exc
    if not isinstance(doc, dict):
        raise HeaderParseError(f"header at byte {_HEADER_OFFSET}: expected JSON object")
    if _canonical_header(doc) != hbytes:
        raise HeaderParseError(
            f"header at byte {_HEADER_OFFSET}: not in canonical form (sorted keys, compact separators)"
        )
    if set(doc) != set(_HEADER_KEYS):
        missing = set(_HEADER_KEYS) - set(doc)
        extra = set(doc) - set(_HEADER_KEYS)
        raise HeaderParseError(
            f"header at byte {_HEADER_OFFSET}: missing keys {sorted(missing)}, unknown keys {sorted(extra)}"
        )

    depth = _require_int(doc, "depth")
    height = _require_int(doc, "height")
    width = _require_int(doc, "width")
    if not isinstance(doc["layer_id"], str) or not isinstance(doc["image_id"], str):
        raise HeaderParseError(
            f"header at byte {_HEADER_OFFSET}: layer_id and image_id must be strings"
        )
    stride = _require_float(doc, "stride_px", doc["stride_px"])
    if not stride > 0:
        raise HeaderParseError(f"header at byte {_HEADER_OFFSET}: stride_px must be > 0")
    off = doc["offset_px"]
    if not (isinstance(off, list) and len(off) == 2):
        raise HeaderParseError(f"header at byte {_HEADER_OFFSET}: offset_px must be [x, y]")
    ox = _require_float(doc, "offset_px[0]", off[0])
    oy = _require_float(doc, "offset_px[1]", off[1])
    size = doc["image_size_px"]
    if not (isinstance(size, list) and len(size) == 2):
        raise HeaderParseError(
            f"header at byte {_HEADER_OFFSET}: image_size_px must be [width, height]"
        )
    sw = size[0]
    sh = size[1]
    for v in (sw, sh):
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            raise HeaderParseError(
                f"header at byte {_HEADER_OFFSET}: image_size_px entries must be integers >= 1"
            )

    meta = LayerMeta(
        layer_id=doc["layer_id"],
        depth=depth,
        height=height,
        width=width,
        stride_px=stride,
        offset_px=(ox, oy),
        image_size_px=(sw, sh),
    )
    payload_offset = _HEADER_OFFSET + hlen
    payload = buf[payload_offset:]
    expected = meta.unit_count * 4
    if len(payload) != expected:
        raise PayloadSizeMismatch(
            f"payload at byte {payload_offset}: expected {expected} bytes, found {len(payload)}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(depth, height, width)
    if not np.isfinite(values).all():
        raise NonFiniteValues(
            f"payload at byte {payload_offset}: contains non-finite values"
        )
    return FeatureMap(meta=meta, image_id=doc["image_id"], values=values.copy())


def write_fmap(fm: FeatureMap, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_fmap_bytes(fm))


def load_fmap(path) -> FeatureMap:
    with open(path, "rb") as fh:
        return load_fmap_bytes(fh.read())


# ---------------------------------------------------------------------------
# manifest


def write_manifest(entries: list[dict], path) -> None:
    """entries: [{"image_id": str, "layers": [{"layer_id": str, "path": str}]}]"""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(entries, fh, indent=1)
        fh.write("\n")


def load_manifest(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        entries = json.load(fh)
    if not isinstance(entries, list):
        raise SchemaError("manifest must be a JSON array")
    for e in entries:
        if set(e) != {"image_id", "layers"}:
            raise SchemaError(f"manifest entry keys must be image_id/layers, got {sorted(e)}")
        for layer in e["layers"]:
            if set(layer) != {"layer_id", "path"}:
                raise SchemaError("manifest layer entries must have layer_id and path")
    return entries


def load_feature_map_set(entry: dict, base_dir) -> FeatureMapSet:
    maps = []
    for layer in entry["layers"]:
        fm = load_fmap(os.path.join(base_dir, layer["path"]))
        if fm.meta.layer_id != layer["layer_id"]:
            raise SchemaError(
                f"{layer['path']}: header layer_id {fm.meta.layer_id!r} != manifest {layer['layer_id']!r}"
            )
        maps.append(fm)
    return FeatureMapSet(image_id=entry["image_id"], maps=maps)


# ---------------------------------------------------------------------------
# projection and normalization


def project_position(i: int, j: int, meta: LayerMeta) -> tuple[float, float]:
    """Project grid coordinates to normalized image coordinates in [0,1]^2."""
    if not (0 <= i < meta.height and 0 <= j < meta.width):
        raise IndexOutOfRange(
            f"unit ({i},{j}) outside {meta.height}x{meta.width} grid of {meta.layer_id}"
        )
    px = meta.offset_px[0] + meta.stride_px * j
    py = meta.offset_px[1] + meta.stride_px * i
    u = min(max(px / meta.image_size_px[0], 0.0), 1.0)
    v = min(max(py / meta.image_size_px[1], 0.0), 1.0)
    return (u, v)


def grid_positions(meta: LayerMeta) -> np.ndarray:
    """Normalized positions of all H*W units, row-major, shape (H*W, 2)."""
    jj, ii = np.meshgrid(np.arange(meta.width), np.arange(meta.height))
    px = meta.offset_px[0] + meta.stride_px * jj.ravel()
    py = meta.offset_px[1] + meta.stride_px * ii.ravel()
    u = np.clip(px / meta.image_size_px[0], 0.0, 1.0)
    v = np.clip(py / meta.image_size_px[1], 0.0, 1.0)
    return np.stack([u, v], axis=1)


@dataclass
class UnitGrid:
    """Vectorized view of one feature map: per-unit positions and weights.

    positions has shape (H*W, 2); response and mass have shape (D, H*W)
    and hold the normalized response f and the entity count beta*max(f,0).
    """

    meta: LayerMeta
    positions: np.ndarray
    response: np.ndarray
    mass: np.ndarray


def unit_grid(fm: FeatureMap, beta: float = 1.0) -> UnitGrid:
    """Normalize responses by the map's maximum positive activation.

    The divisor is the max over all units of the map (1.0 when the map has
    no positive value), so f <= 1 and mass <= beta for every unit.
    """
    if not beta > 0:
        raise ValueError("beta must be > 0")
    raw = fm.values.reshape(fm.meta.depth, -1).astype(np.float64)
    peak = raw.max() if raw.size and raw.max() > 0 else 1.0
    f = raw / peak
    mass = beta * np.clip(f, 0.0, None)
    return UnitGrid(
        meta=fm.meta,
        positions=grid_positions(fm.meta),
        response=f,
        mass=mass,
    )


def normalize_responses(fm: FeatureMap, beta: float = 1.0) -> list[Unit]:
    """Per-unit view of unit_grid(); convenient for tests and small maps."""
    grid = unit_grid(fm, beta)
    w = fm.meta.width
    units = []
    for d in range(fm.meta.depth):
        for idx in range(fm.meta.height * fm.meta.width):
            units.append(
                Unit(
                    d=d,
                    i=idx // w,
                    j=idx % w,
                    p=(float(grid.positions[idx, 0]), float(grid.positions[idx, 1])),
                    f=float(grid.response[d, idx]),
                    mass=float(grid.mass[d, idx]),
                )
            )
    return units
