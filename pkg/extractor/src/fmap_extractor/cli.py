"""Command line for dumping CNN activations into .fmap containers."""

from __future__ import annotations

import argparse
import json
import os
import sys

from .extract import ExtractSpec, LayerSelector, ModelLoadError, LayerNotFound, extract

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


def load_spec(path, model_override=None) -> ExtractSpec:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    allowed = {"model", "weights", "input_size", "layers"}
    unknown = set(doc) - allowed
    if unknown:
        raise ModelLoadError(f"{path}: unknown keys {sorted(unknown)}")
    layers = []
    for ldoc in doc.get("layers", []):
        if set(ldoc) != {"layer_id", "module", "stride_px", "offset_px"}:
            raise ModelLoadError(f"{path}: bad layer selector {ldoc}")
        layers.append(
            LayerSelector(
                layer_id=str(ldoc["layer_id"]),
                module=str(ldoc["module"]),
                stride_px=float(ldoc["stride_px"]),
                offset_px=(float(ldoc["offset_px"][0]), float(ldoc["offset_px"][1])),
            )
        )
    return ExtractSpec(
        model=model_override or doc.get("model", "vgg16"),
        weights=doc.get("weights"),
        input_size=int(doc.get("input_size", 224)),
        layers=layers,
    )


def collect_images(path) -> list[str]:
    if os.path.isfile(path):
        return [path]
    files = [
        os.path.join(path, name)
        for name in sorted(os.listdir(path))
        if name.lower().endswith(IMAGE_EXTENSIONS)
    ]
    if not files:
        raise ModelLoadError(f"no images found under {path}")
    return files


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fmap-extract",
        description="Dump conv-layer activations into .fmap containers.",
    )
    parser.add_argument("command", choices=["extract"])
    parser.add_argument("--model", default=None, help="override the spec's model name")
    parser.add_argument("--spec", required=True)
    parser.add_argument("--images", required=True, help="image file or directory")
    parser.add_argument("--out", required=True)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        spec = load_spec(args.spec, args.model)
        entries = extract(spec, collect_images(args.images), args.out)
    except (ModelLoadError, LayerNotFound, OSError, json.JSONDecodeError) as exc:
        print(
            json.dumps({"error": type(exc).__name__, "context": str(exc)}),
            file=sys.stderr,
        )
        return 1
    print(f"wrote {sum(len(e['layers']) for e in entries)} feature maps -> {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
