"""Interpretability metrics: location instability, top-inference export, heat maps."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from .errors import AllZeroScores, InsufficientSamples
from .graph import NodeId, node_id_str
from .inference import NodeAssignment, top_k_energy

INSTABILITY_PARTS = ("head", "back", "tail")

ROOT_TWO = math.sqrt(2.0)


def location_instability(
    assignments: Mapping[str, NodeAssignment],
    landmarks: Mapping[str, Mapping[str, tuple]],
) -> float:
    """Mean, over head/back/tail, of the std of diagonal-normalized distances
    between a node's inferred positions and each landmark across images.

    Only images with a detected assignment and all three landmarks count;
    at least two are required.  Population variance, no sample correction.
    """
    usable = []
    for image_id in sorted(assignments):
        asg = assignments[image_id]
        lms = landmarks.get(image_id)
        if not asg.detected or lms is None:
            continue
        if any(part not in lms for part in INSTABILITY_PARTS):
            continue
        usable.append((asg, lms))
    if len(usable) < 2:
        raise InsufficientSamples(
            f"need >= 2 detected assignments with landmarks, have {len(usable)}"
        )
    total = 0.0
    for part in INSTABILITY_PARTS:
        dists = np.array(
            [
                math.hypot(asg.p[0] - lms[part][0], asg.p[1] - lms[part][1]) / ROOT_TWO
                for asg, lms in usable
            ]
        )
        total += float(np.sqrt(np.mean((dists - dists.mean()) ** 2)))
    return total / len(INSTABILITY_PARTS)


def node_instability_rows(
    inferences: Mapping[str, Mapping[NodeId, NodeAssignment]],
    landmarks: Mapping[str, Mapping[str, tuple]],
    node_ids,
) -> list[tuple[str, float, int]]:
    """Per-node instability table: (node_id string, value, usable images)."""
    rows = []
    for nid in node_ids:
        per_image = {
            image_id: flat[nid]
            for image_id, flat in inferences.items()
            if nid in flat
        }
        n = sum(
            1
            for image_id, asg in per_image.items()
            if asg.detected
            and image_id in landmarks
            and all(p in landmarks[image_id] for p in INSTABILITY_PARTS)
        )
        if n < 2:
            continue
        rows.append((node_id_str(nid), location_instability(per_image, landmarks), n))
    return rows


def write_instability_csv(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("node_id,value,n_images\n")
        for node_id, value, n in rows:
            fh.write(f"{node_id},{value!r},{n}\n")


def select_top_inferences(
    assignments: Mapping[str, NodeAssignment], ratio: float = 0.3
) -> list[tuple[str, tuple, float]]:
    """Images carrying the given share of a node's inference energy.

    Returns (image_id, position, score) tuples sorted by descending score
    (image_id breaks ties), truncated to the smallest count whose scores
    sum to ratio * total.
    """
    items = sorted(
        assignments.items(), key=lambda kv: (-kv[1].score, kv[0])
    )
    scores = np.array([asg.score for _, asg in items])
    if scores.size == 0 or scores.sum() <= 0:
        raise AllZeroScores("node has no nonzero inference score")
    k = top_k_energy(scores, ratio)
    return [(image_id, asg.p, asg.score) for image_id, asg in items[:k]]


def patches_doc(top: list[tuple[str, tuple, float]], patch_px: int = 70) -> dict:
    """Ranked patch metadata; patch_px is the crop size in pixels."""
    return {
        "patch_px": patch_px,
        "patches": [
            {"image_id": image_id, "p": [p[0], p[1]], "score": score}
            for image_id, p, score in top
        ],
    }


def write_patches(top, path, patch_px: int = 70) -> None:
    import json

    with open(path, "w", encoding="utf-8") as fh:
        json.dump(patches_doc(top, patch_px), fh, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------------------
# heat maps


def render_heatmap(
    assignments: list[NodeAssignment],
    sigma_sq_by_node: Mapping[NodeId, float],
    grid_size: int = 56,
) -> np.ndarray:
    """Spatial density of a layer's strongest inferred patterns.

    Sums score * N(cell center | p, sigma_sq) over the top half (by score)
    of the layer's detected nodes; every node tied with the cutoff score is
    included.  Values are raw densities at cell centers (no cell-area
    factor), so a lone unit-score node peaks at 1/(2*pi*sigma_sq).
    """
    if grid_size < 1:
        raise ValueError("grid_size must be >= 1")
    grid = np.zeros((grid_size, grid_size))
    detected = sorted(
        (a for a in assignments if a.detected), key=lambda a: (-a.score, a.node_id)
    )
    if not detected:
        return grid
    cutoff = detected[math.ceil(len(detected) / 2) - 1].score
    keep = [a for a in detected if a.score >= cutoff]
    centers = (np.arange(grid_size) + 0.5) / grid_size
    uu, vv = np.meshgrid(centers, centers)  # row index = v, column = u
    for asg in keep:
        s2 = sigma_sq_by_node[asg.node_id]
        r2 = (uu - asg.p[0]) ** 2 + (vv - asg.p[1]) ** 2
        grid += asg.score * np.exp(-r2 / (2.0 * s2)) / (2.0 * math.pi * s2)
    return grid


def write_heatmap_pgm(grid: np.ndarray, path, maxval: int = 65535) -> None:
    """ASCII PGM (P2), linearly rescaled so the hottest cell maps to maxval."""
    peak = float(grid.max())
    scale = maxval / peak if peak > 0 else 0.0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"P2\n{grid.shape[1]} {grid.shape[0]}\n{maxval}\n")
        for row in grid:
            fh.write(" ".join(str(int(round(v * scale))) for v in row))
            fh.write("\n")


def write_heatmap_csv(grid: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in grid:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")
