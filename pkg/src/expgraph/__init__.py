"""expgraph: explanatory-graph learning over dumped CNN feature maps."""

from .em import (
    ContextEntry,
    FilterUnits,
    compatibility_closed,
    compatibility_product,
    dummy_context,
    e_step,
    estimate_sigma,
    filter_log_likelihood,
    m_step_mu,
    select_neighbors,
)
from .fmapio import (
    FeatureMap,
    FeatureMapSet,
    LayerMeta,
    Unit,
    load_fmap,
    normalize_responses,
    project_position,
    unit_grid,
    write_fmap,
)
from .graph import (
    ExplanatoryGraph,
    GraphLayer,
    Hyperparams,
    LayerSpec,
    PatternNode,
    deserialize_graph,
    load_graph,
    serialize_graph,
    validate_graph,
    write_graph,
)
from .inference import NodeAssignment, assign_node, infer_image, top_k_energy
from .learn import LearnConfig, LearnResult, learn_graph, learn_layer
from .metrics import location_instability, render_heatmap, select_top_inferences
from .synth import SynthLayerSpec, SynthSpec, gen_planted_graph, recovery_error, sample_images
from .aog import AOGModel, PartAnnotation, build_aog, localize_part, normalized_distance

__version__ = "0.1.0"
