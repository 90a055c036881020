"""Hook-based activation dumping for torchvision CNNs and TorchScript models.

Receptive-field stride and offset are declared per layer rather than derived
from the architecture; the defaults below follow the usual half-stride
center convention for the supported backbones.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image

from .container import write_fmap, write_manifest


class ModelLoadError(Exception):
    pass


class LayerNotFound(Exception):
    pass


@dataclass(frozen=True)
class LayerSelector:
    layer_id: str
    module: str  # dotted module path inside the model
    stride_px: float
    offset_px: tuple[float, float]


@dataclass
class ExtractSpec:
    model: str = "vgg16"
    weights: str | None = None  # state_dict path, or pickled module for model="module"
    input_size: int = 224
    layers: list[LayerSelector] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            try:
                self.layers = list(DEFAULT_LAYERS[self.model])
            except KeyError:
                raise ModelLoadError(
                    f"model {self.model!r} has no default layer selectors; declare them"
                ) from None
        for sel in self.layers:
            span = sel.stride_px * 1.0
            # declared geometry must roughly tile the input
            if sel.stride_px <= 0:
                raise ModelLoadError(f"layer {sel.layer_id}: stride_px must be > 0")


# ninth/tenth/twelfth/thirteenth conv activations of VGG-16 (post-ReLU), and
# the last 3x3 conv of each residual stage with 128/256/512-channel output
DEFAULT_LAYERS = {
    "vgg16": [
        LayerSelector("conv9", "features.20", 8.0, (4.0, 4.0)),
        LayerSelector("conv10", "features.22", 8.0, (4.0, 4.0)),
        LayerSelector("conv12", "features.27", 16.0, (8.0, 8.0)),
        LayerSelector("conv13", "features.29", 16.0, (8.0, 8.0)),
    ],
    "resnet50": [
        LayerSelector("stage2", "layer2.3.conv2", 8.0, (4.0, 4.0)),
        LayerSelector("stage3", "layer3.5.conv2", 16.0, (8.0, 8.0)),
        LayerSelector("stage4", "layer4.2.conv2", 32.0, (16.0, 16.0)),
    ],
    "resnet152": [
        LayerSelector("stage2", "layer2.7.conv2", 8.0, (4.0, 4.0)),
        LayerSelector("stage3", "layer3.35.conv2", 16.0, (8.0, 8.0)),
        LayerSelector("stage4", "layer4.2.conv2", 32.0, (16.0, 16.0)),
    ],
}

_IMAGENET_MEAN = torch.tensor([0.485, 0.456, 0.406]).view(3, 1, 1)
_IMAGENET_STD = torch.tensor([0.229, 0.224, 0.225]).view(3, 1, 1)


def load_model(spec: ExtractSpec) -> torch.nn.Module:
    if spec.model == "module":
        # arbitrary encoder saved with torch.save(model); hooks need a real Module
        if not spec.weights:
            raise ModelLoadError("model 'module' requires a weights file")
        try:
            model = torch.load(spec.weights, map_location="cpu", weights_only=False)
        except Exception as exc:
            raise ModelLoadError(f"cannot load module file {spec.weights}: {exc}") from exc
        if not isinstance(model, torch.nn.Module):
            raise ModelLoadError(f"{spec.weights} does not contain a torch module")
    else:
        import torchvision.models

        try:
            builder = getattr(torchvision.models, spec.model)
        except AttributeError:
            raise ModelLoadError(f"unknown model {spec.model!r}") from None
        model = builder(weights=None)
        if spec.weights:
            try:
                state = torch.load(spec.weights, map_location="cpu", weights_only=True)
            except Exception as exc:
                raise ModelLoadError(f"cannot load checkpoint {spec.weights}: {exc}") from exc
            model.load_state_dict(state)
    model.eval()
    return model


def preprocess(image: Image.Image, input_size: int) -> torch.Tensor:
    """Resize the short side to input_size, center-crop, normalize."""
    image = image.convert("RGB")
    w, h = image.size
    scale = input_size / min(w, h)
    image = image.resize((max(input_size, round(w * scale)), max(input_size, round(h * scale))), Image.BILINEAR)
    w, h = image.size
    left = (w - input_size) // 2
    top = (h - input_size) // 2
    image = image.crop((left, top, left + input_size, top + input_size))
    x = torch.from_numpy(np.asarray(image, dtype=np.float32) / 255.0).permute(2, 0, 1)
    return (x - _IMAGENET_MEAN) / _IMAGENET_STD


def _resolve_modules(model, selectors):
    named = dict(model.named_modules())
    resolved = []
    for sel in selectors:
        if sel.module not in named:
            raise LayerNotFound(f"module {sel.module!r} not found for layer {sel.layer_id}")
        resolved.append((sel, named[sel.module]))
    return resolved


def extract_arrays(model, spec: ExtractSpec, image: Image.Image) -> dict[str, np.ndarray]:
    """Run one image through the model, returning {layer_id: (D,H,W) array}."""
    captured: dict[str, np.ndarray] = {}
    hooks = []
    try:
        for sel, module in _resolve_modules(model, spec.layers):
            def make_hook(layer_id):
                def hook(_mod, _inp, out):
                    captured[layer_id] = out.detach()[0].clone().cpu().numpy()
                return hook

            hooks.append(module.register_forward_hook(make_hook(sel.layer_id)))
        x = preprocess(image, spec.input_size).unsqueeze(0)
        with torch.no_grad():
            model(x)
    finally:
        for h in hooks:
            h.remove()
    missing = [sel.layer_id for sel in spec.layers if sel.layer_id not in captured]
    if missing:
        raise LayerNotFound(f"declared modules never fired for layers {missing}")
    return captured


def extract(spec: ExtractSpec, image_paths, out_dir) -> list[dict]:
    """Dump every (image, layer) activation and write the manifest last.

    Returns the manifest entries.  Thread count is pinned to keep payload
    bytes reproducible run to run.
    """
    os.makedirs(out_dir, exist_ok=True)
    old_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        model = load_model(spec)
        entries = []
        for path in image_paths:
            image_id = os.path.splitext(os.path.basename(path))[0]
            with Image.open(path) as img:
                arrays = extract_arrays(model, spec, img)
            layers = []
            for sel in spec.layers:
                rel = f"{image_id}_{sel.layer_id}.fmap"
                write_fmap(
                    os.path.join(out_dir, rel),
                    arrays[sel.layer_id],
                    layer_id=sel.layer_id,
                    image_id=image_id,
                    stride_px=sel.stride_px,
                    offset_px=sel.offset_px,
                    image_size_px=(spec.input_size, spec.input_size),
                )
                layers.append({"layer_id": sel.layer_id, "path": rel})
            entries.append({"image_id": image_id, "layers": layers})
        write_manifest(entries, os.path.join(out_dir, "manifest.json"))
        return entries
    finally:
        torch.set_num_threads(old_threads)
