"""Explanatory-graph data model and JSON serialization.

A graph is a bottom-to-top list of layers mirroring selected conv-layers.
Each layer holds N patterns per filter; a pattern node carries a prior
position mu in normalized image coordinates, an isotropic variance
sigma_sq, and an edge set pointing at nodes one layer up (or the dummy
marker for top-layer nodes, whose spatial model is then a plain Gaussian
around mu).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DanglingEdge, SchemaError

NodeId = tuple[int, int, int]  # (layer index, filter index, pattern index)

DUMMY_EDGE = "dummy"

SCHEMA_VERSION = 1

# Variance floor in normalized units^2; keeps the Gaussian spatial term
# non-degenerate when a pattern locks onto a single unit.
SIGMA_SQ_MIN = 1e-4


def node_id_str(node_id: NodeId) -> str:
    return "%d:%d:%d" % node_id


def parse_node_id(s: str) -> NodeId:
    parts = s.split(":")
    if len(parts) != 3:
        raise SchemaError(f"bad node id string {s!r}")
    return (int(parts[0]), int(parts[1]), int(parts[2]))


@dataclass
class PatternNode:
    node_id: NodeId
    mu: np.ndarray  # (2,) normalized position
    sigma_sq: float
    edges: tuple  # tuple of NodeId in the next layer up, or (DUMMY_EDGE,)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.edges = tuple(self.edges)

    @property
    def is_dummy_rooted(self) -> bool:
        return self.edges == (DUMMY_EDGE,)


@dataclass(frozen=True)
class LayerSpec:
    layer_id: str
    depth: int  # filter count
    n_per_filter: int  # patterns mined from each filter

    def __post_init__(self):
        if self.depth < 1 or self.n_per_filter < 1:
            raise SchemaError(f"layer {self.layer_id}: depth and n_per_filter must be >= 1")


@dataclass
class GraphLayer:
    spec: LayerSpec
    nodes: list[PatternNode] = field(default_factory=list)

    def filter_nodes(self, d: int) -> list[PatternNode]:
        n = self.spec.n_per_filter
        return self.nodes[d * n : (d + 1) * n]


@dataclass(frozen=True)
class Hyperparams:
    tau: float = 0.1  # density of the noise component
    neighbor_count: int = 15  # M, neighbors per node
    iterations: int = 20  # T, EM iterations
    beta: float = 1.0  # activation-entity scale

    @property
    def lam(self) -> float:
        """Per-neighbor exponent 1/M normalizing the compatibility product."""
        return 1.0 / self.neighbor_count


@dataclass
class ExplanatoryGraph:
    layers: list[GraphLayer]  # bottom-to-top
    hyperparams: Hyperparams = field(default_factory=Hyperparams)

    def __post_init__(self):
        self._index = None

    def _build_index(self):
        self._index = {}
        for layer in self.layers:
            for node in layer.nodes:
                self._index[node.node_id] = node

    def node(self, node_id: NodeId) -> PatternNode:
        if self._index is None or len(self._index) != sum(len(l.nodes) for l in self.layers):
            self._build_index()
        return self._index[node_id]

    def nodes_by_id(self) -> dict[NodeId, PatternNode]:
        self._build_index()
        return dict(self._index)

    @property
    def top_index(self) -> int:
        return len(self.layers) - 1


def validate_graph(g: ExplanatoryGraph) -> None:
    """Structural validation; raises SchemaError or DanglingEdge."""
    if not g.layers:
        raise SchemaError("graph has no layers")
    hp = g.hyperparams
    if hp.tau <= 0 or hp.neighbor_count < 1 or hp.iterations < 0 or hp.beta <= 0:
        raise SchemaError("invalid hyperparameters")
    ids_per_layer = []
    seen = set()
    for li, layer in enumerate(g.layers):
        spec = layer.spec
        expected = spec.depth * spec.n_per_filter
        if len(layer.nodes) != expected:
            raise SchemaError(
                f"layer {spec.layer_id}: expected {expected} nodes, found {len(layer.nodes)}"
            )
        layer_ids = set()
        for pos, node in enumerate(layer.nodes):
            L, d, k = node.node_id
            if node.node_id in seen:
                raise SchemaError(f"duplicate node id {node.node_id}")
            seen.add(node.node_id)
            layer_ids.add(node.node_id)
            if L != li or d != pos // spec.n_per_filter or k != pos % spec.n_per_filter:
                raise SchemaError(
                    f"node {node.node_id} out of place (layer {li}, position {pos})"
                )
            if node.mu.shape != (2,) or not np.isfinite(node.mu).all():
                raise SchemaError(f"node {node.node_id}: bad mu")
            if not (node.sigma_sq >= SIGMA_SQ_MIN):
                raise SchemaError(
                    f"node {node.node_id}: sigma_sq {node.sigma_sq} below floor {SIGMA_SQ_MIN}"
                )
        ids_per_layer.append(layer_ids)

    top = g.top_index
    for li, layer in enumerate(g.layers):
        for node in layer.nodes:
            if node.is_dummy_rooted:
                continue
            if li == top:
                raise SchemaError(
                    f"top-layer node {node.node_id} must be dummy-rooted, has {node.edges}"
                )
            if len(node.edges) != hp.neighbor_count:
                raise SchemaError(
                    f"node {node.node_id}: {len(node.edges)} edges, expected {hp.neighbor_count}"
                )
            if len(set(node.edges)) != len(node.edges):
                raise SchemaError(f"node {node.node_id}: duplicate edges")
            for e in node.edges:
                if not (isinstance(e, tuple) and len(e) == 3):
                    raise SchemaError(f"node {node.node_id}: malformed edge {e!r}")
                if e[0] != li + 1:
                    raise SchemaError(
                        f"node {node.node_id}: edge {e} does not point one layer up"
                    )
                if e not in ids_per_layer[li + 1]:
                    raise DanglingEdge(f"node {node.node_id}: edge {e} does not resolve")


# ---------------------------------------------------------------------------
# serialization


def serialize_graph(g: ExplanatoryGraph) -> dict:
    validate_graph(g)
    hp = g.hyperparams
    doc = {
        "version": SCHEMA_VERSION,
        "hyperparams": {
            "tau": hp.tau,
            "M": hp.neighbor_count,
            "T": hp.iterations,
            "beta": hp.beta,
            "lambda": hp.lam,
        },
        "layers": [],
    }
    for layer in g.layers:
        nodes = []
        for node in layer.nodes:
            edges = [DUMMY_EDGE] if node.is_dummy_rooted else [list(e) for e in node.edges]
            nodes.append(
                {
                    "id": list(node.node_id),
                    "mu": [float(node.mu[0]), float(node.mu[1])],
                    "sigma2": float(node.sigma_sq),
                    "edges": edges,
                }
            )
        doc["layers"].append(
            {
                "layer_id": layer.spec.layer_id,
                "D": layer.spec.depth,
                "N": layer.spec.n_per_filter,
                "nodes": nodes,
            }
        )
    return doc


def _check_keys(obj: dict, required: set, where: str) -> None:
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: expected object")
    if set(obj) != required:
        raise SchemaError(
            f"{where}: keys {sorted(obj)} do not match required {sorted(required)}"
        )


def deserialize_graph(doc) -> ExplanatoryGraph:
    if isinstance(doc, (str, bytes)):
        doc = json.loads(doc)
    _check_keys(doc, {"version", "hyperparams", "layers"}, "graph document")
    if doc["version"] != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema version {doc['version']!r}")
    _check_keys(doc["hyperparams"], {"tau", "M", "T", "beta", "lambda"}, "hyperparams")
    hp_doc = doc["hyperparams"]
    hp = Hyperparams(
        tau=float(hp_doc["tau"]),
        neighbor_count=int(hp_doc["M"]),
        iterations=int(hp_doc["T"]),
        beta=float(hp_doc["beta"]),
    )
    if abs(float(hp_doc["lambda"]) * hp.neighbor_count - 1.0) > 1e-12:
        raise SchemaError("hyperparams: lambda * M != 1")

    layers = []
    for li, ldoc in enumerate(doc["layers"]):
        _check_keys(ldoc, {"layer_id", "D", "N", "nodes"}, f"layer {li}")
        spec = LayerSpec(
            layer_id=str(ldoc["layer_id"]),
            depth=int(ldoc["D"]),
            n_per_filter=int(ldoc["N"]),
        )
        nodes = []
        for ndoc in ldoc["nodes"]:
            _check_keys(ndoc, {"id", "mu", "sigma2", "edges"}, f"node in layer {li}")
            nid = ndoc["id"]
            if not (isinstance(nid, list) and len(nid) == 3):
                raise SchemaError(f"layer {li}: bad node id {nid!r}")
            if ndoc["edges"] == [DUMMY_EDGE]:
                edges = (DUMMY_EDGE,)
            else:
                edges = []
                for e in ndoc["edges"]:
                    if not (isinstance(e, list) and len(e) == 3):
                        raise SchemaError(f"layer {li}: bad edge {e!r}")
                    edges.append((int(e[0]), int(e[1]), int(e[2])))
                edges = tuple(edges)
            nodes.append(
                PatternNode(
                    node_id=(int(nid[0]), int(nid[1]), int(nid[2])),
                    mu=np.array([float(ndoc["mu"][0]), float(ndoc["mu"][1])]),
                    sigma_sq=float(ndoc["sigma2"]),
                    edges=edges,
                )
            )
        layers.append(GraphLayer(spec=spec, nodes=nodes))

    g = ExplanatoryGraph(layers=layers, hyperparams=hp)
    validate_graph(g)
    return g


def graph_to_json(g: ExplanatoryGraph) -> str:
    return json.dumps(serialize_graph(g), indent=1) + "\n"


def write_graph(g: ExplanatoryGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(graph_to_json(g))


def load_graph(path) -> ExplanatoryGraph:
    with open(path, "r", encoding="utf-8") as fh:
        return deserialize_graph(fh.read())
