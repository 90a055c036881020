"""Writer for the .fmap activation container.

Byte layout: magic "FMAP0001", u32 little-endian header length, canonical
JSON header (sorted keys, compact separators, real-valued fields as JSON
floats), then depth*height*width little-endian float32 values in
filter-major, row-major order.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"FMAP0001"


def dump_fmap_bytes(
    values: np.ndarray,
    *,
    layer_id: str,
    image_id: str,
    stride_px: float,
    offset_px: tuple[float, float],
    image_size_px: tuple[int, int],
) -> bytes:
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 3:
        raise ValueError(f"expected a (D, H, W) tensor, got shape {values.shape}")
    if not np.isfinite(values).all():
        raise ValueError("activation tensor contains non-finite values")
    depth, height, width = values.shape
    header = {
        "depth": int(depth),
        "height": int(height),
        "image_id": str(image_id),
        "image_size_px": [int(image_size_px[0]), int(image_size_px[1])],
        "layer_id": str(layer_id),
        "offset_px": [float(offset_px[0]), float(offset_px[1])],
        "stride_px": float(stride_px),
        "width": int(width),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + values.tobytes()


def write_fmap(path, values, **meta) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_fmap_bytes(values, **meta))


def write_manifest(entries, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(entries, fh, indent=1)
        fh.write("\n")
