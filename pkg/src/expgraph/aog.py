"""Small And-Or hierarchy for multi-shot semantic part localization.

One semantic part (OR) owns m part templates (AND); each template owns K
pattern nodes retrieved from the explanatory graph (OR over deformation
candidates handled by node inference).  Retrieval ranks nodes by inference
score times a Gaussian proximity to the annotated part center; each kept
pattern stores its displacement to the center and votes at test time.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import NoDetectedPatterns, SchemaError
from .graph import NodeId
from .inference import NodeAssignment

PROXIMITY_BANDWIDTH = 0.1  # ~22 px on a 224-px image, roughly a part's extent

ROOT_TWO = math.sqrt(2.0)


@dataclass(frozen=True)
class PartAnnotation:
    image_id: str
    center: tuple[float, float]
    template_index: int


@dataclass(frozen=True)
class TemplatePattern:
    node_id: NodeId
    delta: tuple[float, float]  # pattern position -> part center
    weight: float


@dataclass
class PartTemplate:
    annotation_image_id: str
    center: tuple[float, float]
    patterns: list[TemplatePattern]


@dataclass
class AOGModel:
    part_name: str
    templates: list[PartTemplate]
    bandwidth: float = PROXIMITY_BANDWIDTH


@dataclass(frozen=True)
class PartLocation:
    p: tuple[float, float]
    template_index: int
    score: float


def pattern_budget(layer_specs, fraction: float = 0.1) -> int:
    """Retrieval count as a share of all patterns in the graph."""
    total = sum(spec.depth * spec.n_per_filter for spec in layer_specs)
    return max(1, round(fraction * total))


def build_aog(
    inferences: Mapping[str, Mapping[NodeId, NodeAssignment]],
    annotations: list[PartAnnotation],
    part_name: str,
    k: int,
    bandwidth: float = PROXIMITY_BANDWIDTH,
) -> AOGModel:
    """Retrieve the K best-supporting patterns for each annotated template.

    inferences maps image_id to that image's flattened node assignments.
    A pattern's retrieval weight is its inference score in the annotated
    image times exp(-|p - center|^2 / (2 * bandwidth^2)).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    templates = []
    for ann in sorted(annotations, key=lambda a: a.template_index):
        flat = inferences.get(ann.image_id)
        if flat is None:
            raise SchemaError(f"no inference results for image {ann.image_id!r}")
        ranked = []
        for nid in sorted(flat):
            asg = flat[nid]
            if not asg.detected or asg.score <= 0:
                continue
            d2 = (asg.p[0] - ann.center[0]) ** 2 + (asg.p[1] - ann.center[1]) ** 2
            w = asg.score * math.exp(-d2 / (2.0 * bandwidth**2))
            if w > 0:
                ranked.append((nid, asg, w))
        if not ranked:
            raise NoDetectedPatterns(
                f"template {ann.template_index}: image {ann.image_id} has no "
                "detected pattern with positive weight"
            )
        ranked.sort(key=lambda t: (-t[2], t[0]))
        if k > len(ranked):
            warnings.warn(
                f"template {ann.template_index}: only {len(ranked)} patterns "
                f"available, k={k} clamped"
            )
        kept = ranked[:k]
        templates.append(
            PartTemplate(
                annotation_image_id=ann.image_id,
                center=ann.center,
                patterns=[
                    TemplatePattern(
                        node_id=nid,
                        delta=(
                            ann.center[0] - asg.p[0],
                            ann.center[1] - asg.p[1],
                        ),
                        weight=w,
                    )
                    for nid, asg, w in kept
                ],
            )
        )
    return AOGModel(part_name=part_name, templates=templates, bandwidth=bandwidth)


def localize_part(
    aog: AOGModel, inference: Mapping[NodeId, NodeAssignment]
) -> PartLocation:
    """Weighted pattern voting; the best-agreeing template wins.

    Each detected pattern votes for center p + delta; a template's
    candidate is the weight-averaged vote and its score the weighted
    Gaussian agreement of votes with the candidate.
    """
    best = None
    for ti, template in enumerate(aog.templates):
        votes, weights = [], []
        for pat in template.patterns:
            asg = inference.get(pat.node_id)
            if asg is None or not asg.detected:
                continue
            votes.append((asg.p[0] + pat.delta[0], asg.p[1] + pat.delta[1]))
            weights.append(pat.weight)
        if not votes:
            continue
        votes = np.asarray(votes)
        weights = np.asarray(weights)
        candidate = (weights @ votes) / weights.sum()
        d2 = ((votes - candidate) ** 2).sum(axis=1)
        score = float(weights @ np.exp(-d2 / (2.0 * aog.bandwidth**2)))
        if best is None or score > best[2]:
            best = ((float(candidate[0]), float(candidate[1])), ti, score)
    if best is None:
        raise NoDetectedPatterns("no template has any detected pattern")
    return PartLocation(p=best[0], template_index=best[1], score=best[2])


def normalized_distance(predicted, truth) -> float:
    """Euclidean error over the diagonal of the unit square."""
    return math.hypot(predicted[0] - truth[0], predicted[1] - truth[1]) / ROOT_TWO


# ---------------------------------------------------------------------------
# serialization


def aog_to_doc(aog: AOGModel) -> dict:
    return {
        "version": 1,
        "part": aog.part_name,
        "bandwidth": aog.bandwidth,
        "templates": [
            {
                "annotation_image": t.annotation_image_id,
                "center": list(t.center),
                "patterns": [
                    {
                        "id": list(p.node_id),
                        "delta": list(p.delta),
                        "weight": p.weight,
                    }
                    for p in t.patterns
                ],
            }
            for t in aog.templates
        ],
    }


def doc_to_aog(doc: dict) -> AOGModel:
    if set(doc) != {"version", "part", "bandwidth", "templates"}:
        raise SchemaError(f"aog document keys {sorted(doc)} unexpected")
    if doc["version"] != 1:
        raise SchemaError(f"unsupported aog version {doc['version']!r}")
    templates = []
    for t in doc["templates"]:
        if set(t) != {"annotation_image", "center", "patterns"}:
            raise SchemaError("bad template keys")
        templates.append(
            PartTemplate(
                annotation_image_id=t["annotation_image"],
                center=(float(t["center"][0]), float(t["center"][1])),
                patterns=[
                    TemplatePattern(
                        node_id=tuple(int(x) for x in p["id"]),
                        delta=(float(p["delta"][0]), float(p["delta"][1])),
                        weight=float(p["weight"]),
                    )
                    for p in t["patterns"]
                ],
            )
        )
    return AOGModel(
        part_name=doc["part"], templates=templates, bandwidth=float(doc["bandwidth"])
    )


def write_aog(aog: AOGModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(aog_to_doc(aog), fh, indent=1)
        fh.write("\n")


def load_aog(path) -> AOGModel:
    with open(path, "r", encoding="utf-8") as fh:
        return doc_to_aog(json.load(fh))
