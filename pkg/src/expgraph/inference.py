"""Pattern-position inference: assign each node to its best feature-map unit.

A node's score at a unit is the unit's activation mass times the node's
compatibility density at the unit's position.  Inference runs top-down so
every layer sees fresh assignments of the layer above.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import em
from .errors import AllZeroScores, LayerMissingInImage
from .fmapio import FeatureMapSet, unit_grid
from .graph import ExplanatoryGraph, NodeId

InferenceResult = dict  # layer_id -> list[NodeAssignment], bottom-to-top


@dataclass(frozen=True)
class NodeAssignment:
    node_id: NodeId
    unit: tuple[int, int, int]  # (d, i, j); (d, -1, -1) when undetected
    p: tuple[float, float]
    score: float
    detected: bool


def assign_node(node, units, upper_nodes, ctx) -> NodeAssignment:
    """Pick the unit maximizing mass * density; ties go to the smallest
    linear (row-major) index.  A silent filter yields detected=False with
    the node's prior position as fallback.
    """
    fu = em._as_filter_units(units)
    d = fu.filter_index
    if not (fu.mass > 0).any():
        return NodeAssignment(
            node_id=node.node_id,
            unit=(d, -1, -1),
            p=(float(node.mu[0]), float(node.mu[1])),
            score=0.0,
            detected=False,
        )
    delta, sst, logc = em._shift_stats(
        node, em._neighbor_arrays(node, upper_nodes, [ctx]), 1
    )
    logdens = em._log_density(fu.positions, node.mu + delta, sst, logc)[0]
    with np.errstate(divide="ignore"):
        logscore = np.where(fu.mass > 0, np.log(fu.mass) + logdens, -np.inf)
    best = int(np.argmax(logscore))
    if fu.grid_index is not None:
        i, j = int(fu.grid_index[best, 0]), int(fu.grid_index[best, 1])
    else:
        i, j = -1, best
    return NodeAssignment(
        node_id=node.node_id,
        unit=(d, i, j),
        p=(float(fu.positions[best, 0]), float(fu.positions[best, 1])),
        score=float(np.exp(logscore[best])),
        detected=True,
    )


def infer_image(graph: ExplanatoryGraph, fmap_set: FeatureMapSet) -> InferenceResult:
    """Assign every node of every layer for one image, top-down."""
    beta = graph.hyperparams.beta
    per_layer: dict[int, list[NodeAssignment]] = {}
    upper_nodes: dict = {}
    upper_ctx: em.ImageContext = em.dummy_context()
    for li in range(graph.top_index, -1, -1):
        layer = graph.layers[li]
        try:
            fm = fmap_set.layer(layer.spec.layer_id)
        except KeyError:
            raise LayerMissingInImage(
                f"image {fmap_set.image_id} has no layer {layer.spec.layer_id!r}"
            ) from None
        grid = unit_grid(fm, beta)
        assignments = []
        ctx: em.ImageContext = {}
        fus = {}
        for node in layer.nodes:
            d = node.node_id[1]
            if d not in fus:
                fus[d] = em.filter_units_from_grid(grid, d)
            asg = assign_node(node, fus[d], upper_nodes, upper_ctx)
            assignments.append(asg)
            ctx[node.node_id] = em.ContextEntry(
                p=asg.p, score=asg.score, detected=asg.detected
            )
        per_layer[li] = assignments
        upper_nodes = {node.node_id: node for node in layer.nodes}
        upper_ctx = ctx
    return {
        graph.layers[li].spec.layer_id: per_layer[li] for li in range(len(graph.layers))
    }


def flatten_inference(result: InferenceResult) -> dict[NodeId, NodeAssignment]:
    out = {}
    for assignments in result.values():
        for asg in assignments:
            out[asg.node_id] = asg
    return out


def top_k_energy(scores, ratio: float) -> int:
    """Smallest count of largest scores whose sum reaches ratio * total."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0 or (s < 0).any():
        raise ValueError("scores must be a non-empty array of nonnegative values")
    if not 0 < ratio <= 1:
        raise ValueError("ratio must be in (0, 1]")
    desc = np.sort(s)[::-1]
    cum = np.cumsum(desc)
    total = cum[-1]
    if total <= 0:
        raise AllZeroScores("all scores are zero")
    idx = int(np.searchsorted(cum, ratio * total, side="left"))
    return min(idx, s.size - 1) + 1


# ---------------------------------------------------------------------------
# serialization


def inference_to_doc(result: InferenceResult) -> list[dict]:
    doc = []
    for assignments in result.values():
        for asg in assignments:
            doc.append(
                {
                    "node_id": list(asg.node_id),
                    "unit": list(asg.unit),
                    "p": [asg.p[0], asg.p[1]],
                    "score": asg.score,
                    "detected": asg.detected,
                }
            )
    return doc


def inference_to_json(result: InferenceResult) -> str:
    return json.dumps(inference_to_doc(result), indent=1) + "\n"


def doc_to_assignments(doc: list[dict]) -> dict[NodeId, NodeAssignment]:
    out = {}
    for entry in doc:
        nid = tuple(int(x) for x in entry["node_id"])
        out[nid] = NodeAssignment(
            node_id=nid,
            unit=tuple(int(x) for x in entry["unit"]),
            p=(float(entry["p"][0]), float(entry["p"][1])),
            score=float(entry["score"]),
            detected=bool(entry["detected"]),
        )
    return out
