"""Top-down layer-by-layer EM learning of the explanatory graph.

Layers are learned from the top conv-layer downward.  The top layer sees
only the dummy context, so each of its patterns fits a plain Gaussian to
its filter's activation mass; every lower layer is conditioned on the
per-image inferred positions of the layer just learned above it.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import em, inference
from .em import ContextEntry, FilterUnits, ImageContext
from .errors import (
    EmptyDataset,
    LayerMissingInImage,
    MissingNeighborInference,
    SchemaError,
)
from .fmapio import FeatureMapSet, UnitGrid, unit_grid
from .graph import (
    DUMMY_EDGE,
    SIGMA_SQ_MIN,
    ExplanatoryGraph,
    GraphLayer,
    Hyperparams,
    LayerSpec,
    PatternNode,
    validate_graph,
)


@dataclass
class LearnConfig:
    tau: float = 0.1  # noise-component density
    neighbor_count: int = 15  # M, upper-layer neighbors per node
    iterations: int = 20  # T, EM iterations per layer
    beta: float = 1.0  # activation-entity scale
    eta: float = 0.05  # gradient-mode step size
    m_step_mode: str = "closed_form"
    pool_size: int = 100  # candidate pool for neighbor selection
    rng_seed: int = 0
    sigma_sq_init: float = 0.0025
    threads: int = 1

    def validate(self) -> None:
        if not (self.tau > 0 and self.neighbor_count >= 1 and self.iterations >= 0):
            raise SchemaError("LearnConfig: need tau > 0, M >= 1, T >= 0")
        if not (self.eta > 0 and self.beta > 0 and self.sigma_sq_init > 0):
            raise SchemaError("LearnConfig: need eta, beta, sigma_sq_init > 0")
        if self.pool_size < self.neighbor_count:
            raise SchemaError("LearnConfig: pool_size must be >= neighbor_count")
        if self.m_step_mode not in ("closed_form", "gradient"):
            raise SchemaError(f"LearnConfig: unknown m_step_mode {self.m_step_mode!r}")
        if self.rng_seed < 0 or self.threads < 1:
            raise SchemaError("LearnConfig: rng_seed must be >= 0, threads >= 1")


@dataclass
class LayerLearnResult:
    nodes: list[PatternNode]
    contexts: list[ImageContext]  # per-image inference of this layer
    log_rows: list[tuple[int, str, float]] = field(default_factory=list)


@dataclass
class LearnResult:
    graph: ExplanatoryGraph
    log_rows: list[tuple[int, str, float]] = field(default_factory=list)


def _init_nodes(layer_index: int, spec: LayerSpec, config: LearnConfig) -> list[PatternNode]:
    rng = np.random.default_rng([config.rng_seed, layer_index])
    nodes = []
    for d in range(spec.depth):
        for k in range(spec.n_per_filter):
            nodes.append(
                PatternNode(
                    node_id=(layer_index, d, k),
                    mu=rng.uniform(0.1, 0.9, size=2),
                    sigma_sq=config.sigma_sq_init,
                    edges=(DUMMY_EDGE,),
                )
            )
    return nodes


def _candidate_pool(top_mass, score_table, upper_ids, pool_size):
    """Upper nodes ranked by co-activation with this node.

    top_mass: per-image peak responsibility mass of the node (n_img,).
    score_table: per-image inference scores of all upper nodes (n_img, n_up).
    Pearson correlation across images, zero where either side is constant.
    """
    vc = top_mass - top_mass.mean()
    sc = score_table - score_table.mean(axis=0)
    vn = math.sqrt(float(vc @ vc))
    sn = np.sqrt((sc * sc).sum(axis=0))
    denom = vn * sn
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(denom > 0, (vc @ sc) / np.where(denom > 0, denom, 1.0), 0.0)
    order = sorted(range(len(upper_ids)), key=lambda jj: (-corr[jj], upper_ids[jj]))
    return [upper_ids[jj] for jj in order[:pool_size]]


def _learn_filter(
    d,
    nodes_d,
    positions,
    grid_index,
    mass_d,
    upper_nodes,
    upper_ctxs,
    score_table,
    upper_ids,
    config,
    is_top,
):
    """One EM iteration for one filter: E step, then per-node updates."""
    n_img = mass_d.shape[0]
    logdens = em._batch_log_densities(nodes_d, upper_nodes, upper_ctxs, positions)
    log_prior = -math.log(len(nodes_d) + 1)
    lognum = np.concatenate(
        [
            logdens + log_prior,
            np.full((1,) + logdens.shape[1:], log_prior + math.log(config.tau)),
        ],
        axis=0,
    )
    shifted = lognum - lognum.max(axis=0, keepdims=True)
    expnum = np.exp(shifted)
    resp = expnum / expnum.sum(axis=0, keepdims=True)  # (K+1, n_img, n_units)

    units_list = None
    for k, node in enumerate(nodes_d):
        rk = resp[k]  # (n_img, n_units)
        rw = rk * mass_d
        s0 = rw.sum(axis=1)
        s1 = rw @ positions
        total = s0.sum()
        nbrs = em._neighbor_arrays(node, upper_nodes, upper_ctxs)
        delta, sst, _ = em._shift_stats(node, nbrs, n_img)
        if total > 0:
            if config.m_step_mode == "closed_form":
                node.mu = (s1 - delta * s0[:, None]).sum(axis=0) / total
            else:
                grad = ((s1 - (node.mu + delta) * s0[:, None]) / sst[:, None]).sum(axis=0)
                node.mu = node.mu + config.eta * grad
            diff = positions[None, :, :] - (node.mu + delta)[:, None, :]
            ss = float((rw * (diff * diff).sum(axis=-1)).sum())
            node.sigma_sq = max(SIGMA_SQ_MIN, ss / (2.0 * total))
        if not is_top:
            if units_list is None:
                units_list = [
                    FilterUnits(d, positions, mass_d[ii], grid_index)
                    for ii in range(n_img)
                ]
            pool = _candidate_pool(
                rw.max(axis=1), score_table, upper_ids, config.pool_size
            )
            node.edges = em.select_neighbors(
                node,
                pool,
                config.neighbor_count,
                units=units_list,
                ctxs=upper_ctxs,
                upper_nodes=upper_nodes,
                peer_nodes=[p for p in nodes_d if p is not node],
                resp=[rk[ii] for ii in range(n_img)],
                tau=config.tau,
                prior_count=len(nodes_d),
            )


def _filter_loglik(nodes_d, positions, mass_d, upper_nodes, upper_ctxs, tau):
    logdens = em._batch_log_densities(nodes_d, upper_nodes, upper_ctxs, positions)
    log_prior = -math.log(len(nodes_d) + 1)
    lognum = np.concatenate(
        [
            logdens + log_prior,
            np.full((1,) + logdens.shape[1:], log_prior + math.log(tau)),
        ],
        axis=0,
    )
    peak = lognum.max(axis=0)
    lse = peak + np.log(np.exp(lognum - peak[None]).sum(axis=0))
    return float((mass_d * lse).sum())


def learn_layer(
    layer_index: int,
    spec: LayerSpec,
    grids: list[UnitGrid],
    upper_nodes,
    upper_ctxs,
    config: LearnConfig,
    *,
    is_top: bool,
) -> LayerLearnResult:
    """Run T EM iterations on one layer, then infer its per-image positions.

    grids holds this layer's UnitGrid for every image; upper_ctxs the
    upper layer's inference results (dummy contexts for the top layer).
    """
    config.validate()
    if not grids:
        raise EmptyDataset("no images")
    n_img = len(grids)
    positions = grids[0].positions
    grid_index = np.stack(
        [
            np.repeat(np.arange(grids[0].meta.height), grids[0].meta.width),
            np.tile(np.arange(grids[0].meta.width), grids[0].meta.height),
        ],
        axis=1,
    )
    mass = np.stack([g.mass for g in grids], axis=1)  # (D, n_img, n_units)
    if upper_ctxs is None:
        upper_ctxs = [em.dummy_context() for _ in range(n_img)]
    upper_nodes = upper_nodes or {}

    upper_ids = sorted(upper_nodes)
    score_table = np.zeros((n_img, len(upper_ids)))
    for ii, ctx in enumerate(upper_ctxs):
        for jj, uid in enumerate(upper_ids):
            entry = ctx.get(uid)
            if entry is None:
                raise MissingNeighborInference(
                    f"upper node {uid} has no inference in image {ii}"
                )
            score_table[ii, jj] = entry.score
    nodes = _init_nodes(layer_index, spec, config)

    log_rows = []
    n = spec.n_per_filter
    filters = list(range(spec.depth))

    def run_filter(d):
        _learn_filter(
            d,
            nodes[d * n : (d + 1) * n],
            positions,
            grid_index,
            mass[d],
            upper_nodes,
            upper_ctxs,
            score_table,
            upper_ids,
            config,
            is_top,
        )

    for it in range(config.iterations):
        if config.threads > 1:
            with ThreadPoolExecutor(max_workers=config.threads) as pool:
                list(pool.map(run_filter, filters))
        else:
            for d in filters:
                run_filter(d)
        loglik = sum(
            _filter_loglik(
                nodes[d * n : (d + 1) * n],
                positions,
                mass[d],
                upper_nodes,
                upper_ctxs,
                config.tau,
            )
            for d in filters
        )
        log_rows.append((it + 1, spec.layer_id, loglik))

    contexts = [dict() for _ in range(n_img)]
    for d in filters:
        fus = [FilterUnits(d, positions, mass[d][ii], grid_index) for ii in range(n_img)]
        for node in nodes[d * n : (d + 1) * n]:
            for ii in range(n_img):
                asg = inference.assign_node(node, fus[ii], upper_nodes, upper_ctxs[ii])
                contexts[ii][node.node_id] = ContextEntry(
                    p=asg.p, score=asg.score, detected=asg.detected
                )
    return LayerLearnResult(nodes=nodes, contexts=contexts, log_rows=log_rows)


def learn_graph(
    fmap_sets: list[FeatureMapSet],
    layer_plan: list[tuple[str, int]],
    config: LearnConfig,
) -> LearnResult:
    """Learn all layers top-down over a dataset.

    layer_plan lists (layer_id, patterns_per_filter) bottom-to-top.
    """
    config.validate()
    if not fmap_sets:
        raise EmptyDataset("no images in dataset")
    n_layers = len(layer_plan)
    if n_layers == 0:
        raise SchemaError("layer plan is empty")

    grids_per_layer: list[list[UnitGrid]] = []
    specs: list[LayerSpec] = []
    for layer_id, n_per_filter in layer_plan:
        grids = []
        for fs in fmap_sets:
            try:
                fm = fs.layer(layer_id)
            except KeyError:
                raise LayerMissingInImage(
                    f"image {fs.image_id} has no layer {layer_id!r}"
                ) from None
            grids.append(unit_grid(fm, config.beta))
        shapes = {(g.meta.depth, g.meta.height, g.meta.width) for g in grids}
        if len(shapes) != 1:
            raise SchemaError(f"layer {layer_id}: inconsistent shapes {shapes}")
        d = grids[0].meta.depth
        specs.append(LayerSpec(layer_id=layer_id, depth=d, n_per_filter=n_per_filter))
        grids_per_layer.append(grids)

    results: dict[int, LayerLearnResult] = {}
    upper_nodes = None
    upper_ctxs = None
    for li in range(n_layers - 1, -1, -1):
        res = learn_layer(
            li,
            specs[li],
            grids_per_layer[li],
            upper_nodes,
            upper_ctxs,
            config,
            is_top=(li == n_layers - 1),
        )
        results[li] = res
        upper_nodes = {node.node_id: node for node in res.nodes}
        upper_ctxs = res.contexts

    layers = [GraphLayer(spec=specs[li], nodes=results[li].nodes) for li in range(n_layers)]
    hp = Hyperparams(
        tau=config.tau,
        neighbor_count=config.neighbor_count,
        iterations=config.iterations,
        beta=config.beta,
    )
    graph = ExplanatoryGraph(layers=layers, hyperparams=hp)
    validate_graph(graph)
    log_rows = []
    for li in range(n_layers - 1, -1, -1):
        log_rows.extend(results[li].log_rows)
    return LearnResult(graph=graph, log_rows=log_rows)


def write_learn_log(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iter,layer,loglik\n")
        for it, layer_id, loglik in rows:
            fh.write(f"{it},{layer_id},{loglik!r}\n")
