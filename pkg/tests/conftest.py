import numpy as np
import pytest

from expgraph.em import ContextEntry, FilterUnits
from expgraph.fmapio import FeatureMap, LayerMeta
from expgraph.graph import (
    DUMMY_EDGE,
    ExplanatoryGraph,
    GraphLayer,
    Hyperparams,
    LayerSpec,
    PatternNode,
)


def make_meta(layer_id="conv", depth=1, height=8, width=8, stride=16.0, image=128):
    return LayerMeta(
        layer_id=layer_id,
        depth=depth,
        height=height,
        width=width,
        stride_px=stride,
        offset_px=(stride / 2.0, stride / 2.0),
        image_size_px=(image, image),
    )


def make_fmap(values, image_id="img0", **meta_kw):
    values = np.asarray(values, dtype=np.float32)
    meta = make_meta(depth=values.shape[0], height=values.shape[1], width=values.shape[2], **meta_kw)
    return FeatureMap(meta=meta, image_id=image_id, values=values)


def make_node(node_id=(0, 0, 0), mu=(0.5, 0.5), sigma_sq=0.01, edges=(DUMMY_EDGE,)):
    return PatternNode(node_id=node_id, mu=np.asarray(mu, float), sigma_sq=sigma_sq, edges=edges)


def make_units(positions, mass, d=0):
    positions = np.asarray(positions, dtype=np.float64)
    return FilterUnits(
        filter_index=d,
        positions=positions,
        mass=np.asarray(mass, dtype=np.float64),
        grid_index=np.stack([np.zeros(len(positions), int), np.arange(len(positions))], axis=1),
    )


def grid_units(h=8, w=8, mass=None, d=0):
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    positions = np.stack(
        [(jj.ravel() + 0.5) / w, (ii.ravel() + 0.5) / h], axis=1
    )
    if mass is None:
        mass = np.ones(h * w)
    fu = FilterUnits(
        filter_index=d,
        positions=positions,
        mass=np.asarray(mass, dtype=np.float64).ravel(),
        grid_index=np.stack([ii.ravel(), jj.ravel()], axis=1),
    )
    return fu


def make_ctx(entries):
    """entries: {node_id: (p, score, detected) or (p,)}"""
    ctx = {}
    for nid, spec in entries.items():
        p = spec[0]
        score = spec[1] if len(spec) > 1 else 1.0
        detected = spec[2] if len(spec) > 2 else True
        ctx[nid] = ContextEntry(p=(float(p[0]), float(p[1])), score=score, detected=detected)
    return ctx


def single_layer_graph(nodes_mu, sigma_sq=0.01, layer_id="L0", m=1):
    nodes = [
        make_node((0, 0, k), mu, sigma_sq) for k, mu in enumerate(nodes_mu)
    ]
    layer = GraphLayer(spec=LayerSpec(layer_id, 1, len(nodes)), nodes=nodes)
    return ExplanatoryGraph(layers=[layer], hyperparams=Hyperparams(neighbor_count=m))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
