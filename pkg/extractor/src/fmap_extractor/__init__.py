"""fmap_extractor: dump CNN conv-layer activations into .fmap containers."""

from .container import dump_fmap_bytes, write_fmap, write_manifest
from .extract import (
    DEFAULT_LAYERS,
    ExtractSpec,
    LayerNotFound,
    LayerSelector,
    ModelLoadError,
    extract,
    extract_arrays,
    load_model,
    preprocess,
)

__version__ = "0.1.0"
