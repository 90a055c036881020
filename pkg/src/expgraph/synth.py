"""Planted-graph generator: verifiable ground truth without any CNN.

Samples a layered pattern graph, then renders feature maps from it: each
pattern drops a Gaussian activation bump at its per-image position (prior
position + shared object displacement + per-pattern scatter), and each
filter optionally gains uniformly placed noise peaks.  The recorded truth
lets learning and inference be scored exactly.
"""

from __future__ import annotations

import itertools
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import SeparationUnsatisfiable, ShapeMismatch
from .fmapio import (
    FeatureMap,
    FeatureMapSet,
    LayerMeta,
    grid_positions,
    write_fmap,
    write_manifest,
)
from .graph import (
    DUMMY_EDGE,
    ExplanatoryGraph,
    GraphLayer,
    Hyperparams,
    LayerSpec,
    PatternNode,
    serialize_graph,
)

# Fixed object-anchor points; per-image landmarks are these plus the
# image's global displacement.
LANDMARK_ANCHORS = {"head": (0.3, 0.3), "back": (0.5, 0.5), "tail": (0.7, 0.7)}


@dataclass(frozen=True)
class SynthLayerSpec:
    layer_id: str
    depth: int
    height: int
    width: int
    n_per_filter: int


@dataclass
class SynthSpec:
    layers: list[SynthLayerSpec]  # bottom-to-top
    edges_per_node: int = 2
    sigma_star_range: tuple[float, float] = (0.015, 0.03)
    min_separation: float | None = None  # extra floor on within-filter spacing
    position_margin: float = 0.2  # keeps planted positions off the border
    jitter_std: float = 0.05  # shared per-image object displacement
    pattern_noise_scale: float = 1.0  # scales per-pattern scatter (0 = rigid)
    noise_peaks_per_filter: int = 0
    amp_range: tuple[float, float] = (0.5, 1.0)
    noise_amp_range: tuple[float, float] = (0.2, 0.6)
    stride_px: float = 16.0
    rng_seed: int = 0


@dataclass
class SynthTruth:
    """Per-image ground truth emitted alongside the sampled maps."""

    image_ids: list[str]
    jitter: list[tuple[float, float]]
    positions: list[dict]  # NodeId -> (u, v) per image
    landmarks: dict  # image_id -> part -> (u, v)


@dataclass
class SynthSample:
    fmap_sets: list[FeatureMapSet]
    truth: SynthTruth


def _layer_meta(ls: SynthLayerSpec, spec: SynthSpec) -> LayerMeta:
    stride = float(spec.stride_px)
    return LayerMeta(
        layer_id=ls.layer_id,
        depth=ls.depth,
        height=ls.height,
        width=ls.width,
        stride_px=stride,
        offset_px=(stride / 2.0, stride / 2.0),
        image_size_px=(int(round(stride * ls.width)), int(round(stride * ls.height))),
    )


def gen_planted_graph(spec: SynthSpec) -> ExplanatoryGraph:
    """Sample pattern positions, variances and edges; deterministic in seed.

    Within a filter, positions are rejection-resampled until pairwise
    distances reach max(3 * largest sigma_star, min_separation).
    """
    rng = np.random.default_rng([spec.rng_seed, 1])
    layers = []
    lo, hi = spec.sigma_star_range
    margin = spec.position_margin
    for li, ls in enumerate(spec.layers):
        nodes = []
        for d in range(ls.depth):
            sigmas = rng.uniform(lo, hi, size=ls.n_per_filter)
            sep = 3.0 * float(sigmas.max())
            if spec.min_separation is not None:
                sep = max(sep, spec.min_separation)
            mus = None
            for _ in range(10_000):
                cand = rng.uniform(margin, 1.0 - margin, size=(ls.n_per_filter, 2))
                if ls.n_per_filter == 1:
                    mus = cand
                    break
                dists = np.linalg.norm(cand[:, None, :] - cand[None, :, :], axis=-1)
                np.fill_diagonal(dists, np.inf)
                if dists.min() >= sep:
                    mus = cand
                    break
            if mus is None:
                raise SeparationUnsatisfiable(
                    f"layer {ls.layer_id} filter {d}: cannot place "
                    f"{ls.n_per_filter} patterns {sep} apart"
                )
            for k in range(ls.n_per_filter):
                nodes.append(
                    PatternNode(
                        node_id=(li, d, k),
                        mu=mus[k],
                        sigma_sq=float(sigmas[k] ** 2),
                        edges=(DUMMY_EDGE,),
                    )
                )
        layers.append(
            GraphLayer(
                spec=LayerSpec(ls.layer_id, ls.depth, ls.n_per_filter), nodes=nodes
            )
        )

    for li in range(len(layers) - 1):
        upper_ids = [n.node_id for n in layers[li + 1].nodes]
        m = min(spec.edges_per_node, len(upper_ids))
        for node in layers[li].nodes:
            picks = rng.choice(len(upper_ids), size=m, replace=False)
            node.edges = tuple(sorted(upper_ids[int(p)] for p in picks))

    hp = Hyperparams(
        tau=0.1, neighbor_count=max(1, spec.edges_per_node), iterations=0, beta=1.0
    )
    return ExplanatoryGraph(layers=layers, hyperparams=hp)


def sample_images(
    graph: ExplanatoryGraph, spec: SynthSpec, n_images: int
) -> SynthSample:
    """Render n_images feature-map sets from a planted graph."""
    metas = [_layer_meta(ls, spec) for ls in spec.layers]
    grids = [grid_positions(meta) for meta in metas]

    image_ids = [f"img{ii:04d}" for ii in range(n_images)]
    jitters, positions, landmarks = [], [], {}
    fmap_sets = []
    for ii, image_id in enumerate(image_ids):
        rng = np.random.default_rng([spec.rng_seed, 2, ii])
        t = rng.normal(0.0, spec.jitter_std, size=2)
        jitters.append((float(t[0]), float(t[1])))
        true_pos = {}
        maps = []
        for li, (ls, meta) in enumerate(zip(spec.layers, metas)):
            values = np.zeros((ls.depth, ls.height * ls.width), dtype=np.float64)
            render_sq = (1.0 / max(ls.height, ls.width)) ** 2
            for node in graph.layers[li].nodes:
                d = node.node_id[1]
                scatter = spec.pattern_noise_scale * math.sqrt(node.sigma_sq)
                q = node.mu + t + rng.normal(0.0, 1.0, size=2) * scatter
                amp = rng.uniform(*spec.amp_range)
                r2 = ((grids[li] - q) ** 2).sum(axis=1)
                values[d] += amp * np.exp(-r2 / (2.0 * render_sq))
                true_pos[node.node_id] = (float(q[0]), float(q[1]))
            for d in range(ls.depth):
                for _ in range(spec.noise_peaks_per_filter):
                    qn = rng.uniform(0.0, 1.0, size=2)
                    amp = rng.uniform(*spec.noise_amp_range)
                    r2 = ((grids[li] - qn) ** 2).sum(axis=1)
                    values[d] += amp * np.exp(-r2 / (2.0 * render_sq))
            maps.append(
                FeatureMap(
                    meta=meta,
                    image_id=image_id,
                    values=values.reshape(ls.depth, ls.height, ls.width).astype(
                        np.float32
                    ),
                )
            )
        fmap_sets.append(FeatureMapSet(image_id=image_id, maps=maps))
        positions.append(true_pos)
        landmarks[image_id] = {
            part: (
                min(max(a[0] + t[0], 0.0), 1.0),
                min(max(a[1] + t[1], 0.0), 1.0),
            )
            for part, a in LANDMARK_ANCHORS.items()
        }
    truth = SynthTruth(
        image_ids=image_ids, jitter=jitters, positions=positions, landmarks=landmarks
    )
    return SynthSample(fmap_sets=fmap_sets, truth=truth)


def write_dataset(sample: SynthSample, graph: ExplanatoryGraph, out_dir) -> None:
    """Write manifest.json, per-layer .fmap files, truth.json, landmarks.json."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for fs in sample.fmap_sets:
        layers = []
        for fm in fs.maps:
            rel = f"{fs.image_id}_{fm.meta.layer_id}.fmap"
            write_fmap(fm, os.path.join(out_dir, rel))
            layers.append({"layer_id": fm.meta.layer_id, "path": rel})
        entries.append({"image_id": fs.image_id, "layers": layers})
    write_manifest(entries, os.path.join(out_dir, "manifest.json"))

    truth = sample.truth
    doc = {
        "version": 1,
        "planted_graph": serialize_graph(graph),
        "images": [
            {
                "image_id": image_id,
                "jitter": list(truth.jitter[ii]),
                "positions": [
                    {"id": list(nid), "p": [p[0], p[1]]}
                    for nid, p in sorted(truth.positions[ii].items())
                ],
            }
            for ii, image_id in enumerate(truth.image_ids)
        ],
        "landmarks": {
            image_id: {part: list(p) for part, p in parts.items()}
            for image_id, parts in truth.landmarks.items()
        },
    }
    with open(os.path.join(out_dir, "truth.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    with open(os.path.join(out_dir, "landmarks.json"), "w", encoding="utf-8") as fh:
        json.dump(doc["landmarks"], fh, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------------------
# recovery scoring


@dataclass
class FilterRecovery:
    layer_index: int
    filter_index: int
    pairs: list[tuple[int, int, float]]  # (planted k, learned k, mu error)


@dataclass
class RecoveryReport:
    mean_error: float
    match_rate: float  # fraction of planted patterns within threshold
    threshold: float
    per_filter: list[FilterRecovery] = field(default_factory=list)


def _match_filter(planted_mu, learned_mu, exhaustive_limit: int = 6):
    """Minimum-total-distance pairing; exhaustive up to the limit, greedy above."""
    n = len(planted_mu)
    dists = np.linalg.norm(planted_mu[:, None, :] - learned_mu[None, :, :], axis=-1)
    if n <= exhaustive_limit:
        best, best_cost = None, np.inf
        for perm in itertools.permutations(range(n)):
            cost = sum(dists[a, b] for a, b in enumerate(perm))
            if cost < best_cost:
                best, best_cost = perm, cost
        return [(a, int(best[a]), float(dists[a, best[a]])) for a in range(n)]
    pairs = []
    free_a, free_b = set(range(n)), set(range(n))
    order = np.argsort(dists, axis=None)
    for flat in order:
        a, b = int(flat) // n, int(flat) % n
        if a in free_a and b in free_b:
            pairs.append((a, b, float(dists[a, b])))
            free_a.remove(a)
            free_b.remove(b)
    return sorted(pairs)


def recovery_error(
    planted: ExplanatoryGraph, learned: ExplanatoryGraph, threshold: float = 0.02
) -> RecoveryReport:
    """Per-filter optimal matching between planted and learned positions."""
    if len(planted.layers) != len(learned.layers):
        raise ShapeMismatch("layer counts differ")
    per_filter = []
    errors = []
    hits = 0
    total = 0
    for li, (pl, ll) in enumerate(zip(planted.layers, learned.layers)):
        if (pl.spec.depth, pl.spec.n_per_filter) != (ll.spec.depth, ll.spec.n_per_filter):
            raise ShapeMismatch(
                f"layer {li}: planted {pl.spec} vs learned {ll.spec}"
            )
        for d in range(pl.spec.depth):
            pmu = np.array([n.mu for n in pl.filter_nodes(d)])
            lmu = np.array([n.mu for n in ll.filter_nodes(d)])
            pairs = _match_filter(pmu, lmu)
            per_filter.append(FilterRecovery(li, d, pairs))
            for _, _, err in pairs:
                errors.append(err)
                hits += err < threshold
                total += 1
    return RecoveryReport(
        mean_error=float(np.mean(errors)),
        match_rate=hits / total,
        threshold=threshold,
        per_filter=per_filter,
    )
