"""Command-line pipeline: synthesize, learn, infer, measure, localize.

All outputs are deterministic functions of the inputs and the seed; no
subcommand modifies its inputs.  Runtime failures print one JSON line
{"error": <class>, "context": <message>} to stderr and exit 1; usage
errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

from . import aog as aogmod
from . import inference as infmod
from . import metrics, synth
from .errors import ExpGraphError, SchemaError
from .graph import load_graph, write_graph
from .fmapio import load_feature_map_set, load_manifest
from .learn import LearnConfig, learn_graph, write_learn_log


def _read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _check_keys(doc, allowed, required, where):
    if not isinstance(doc, dict):
        raise SchemaError(f"{where}: expected a JSON object")
    unknown = set(doc) - allowed
    if unknown:
        raise SchemaError(f"{where}: unknown keys {sorted(unknown)}")
    missing = required - set(doc)
    if missing:
        raise SchemaError(f"{where}: missing keys {sorted(missing)}")


# ---------------------------------------------------------------------------
# config files


_SYNTH_KEYS = {
    "layers",
    "n_images",
    "edges_per_node",
    "sigma_star_range",
    "min_separation",
    "jitter_std",
    "pattern_noise_scale",
    "noise_peaks_per_filter",
    "amp_range",
    "noise_amp_range",
    "stride_px",
    "rng_seed",
}


def _load_synth_spec(path, seed_override=None):
    doc = _read_json(path)
    _check_keys(doc, _SYNTH_KEYS, {"layers", "n_images"}, path)
    layers = []
    for ldoc in doc["layers"]:
        _check_keys(
            ldoc,
            {"layer_id", "depth", "height", "width", "n_per_filter"},
            {"layer_id", "depth", "height", "width", "n_per_filter"},
            f"{path} layer entry",
        )
        layers.append(
            synth.SynthLayerSpec(
                layer_id=str(ldoc["layer_id"]),
                depth=int(ldoc["depth"]),
                height=int(ldoc["height"]),
                width=int(ldoc["width"]),
                n_per_filter=int(ldoc["n_per_filter"]),
            )
        )
    spec = synth.SynthSpec(layers=layers)
    for key in _SYNTH_KEYS - {"layers", "n_images"}:
        if key in doc and doc[key] is not None:
            value = doc[key]
            if key in ("sigma_star_range", "amp_range", "noise_amp_range"):
                value = (float(value[0]), float(value[1]))
            setattr(spec, key, value)
    if seed_override is not None:
        spec.rng_seed = seed_override
    return spec, int(doc["n_images"])


_LEARN_KEYS = {
    "tau",
    "M",
    "T",
    "beta",
    "eta",
    "m_step_mode",
    "candidate_pool_size",
    "sigma_sq_init",
    "rng_seed",
    "layers",
}


def _load_learn_config(path, seed_override=None, threads=1):
    doc = _read_json(path)
    _check_keys(doc, _LEARN_KEYS, {"layers"}, path)
    config = LearnConfig(threads=threads)
    if "tau" in doc:
        config.tau = float(doc["tau"])
    if "M" in doc:
        config.neighbor_count = int(doc["M"])
    if "T" in doc:
        config.iterations = int(doc["T"])
    if "beta" in doc:
        config.beta = float(doc["beta"])
    if "eta" in doc:
        config.eta = float(doc["eta"])
    if "m_step_mode" in doc:
        config.m_step_mode = str(doc["m_step_mode"])
    if "candidate_pool_size" in doc:
        config.pool_size = int(doc["candidate_pool_size"])
    if "sigma_sq_init" in doc:
        config.sigma_sq_init = float(doc["sigma_sq_init"])
    if "rng_seed" in doc:
        config.rng_seed = int(doc["rng_seed"])
    if seed_override is not None:
        config.rng_seed = seed_override
    plan = []
    for ldoc in doc["layers"]:
        _check_keys(
            ldoc, {"layer_id", "n_per_filter"}, {"layer_id", "n_per_filter"}, path
        )
        plan.append((str(ldoc["layer_id"]), int(ldoc["n_per_filter"])))
    config.validate()
    return config, plan


def default_learn_config_doc(plan, config: LearnConfig) -> dict:
    return {
        "tau": config.tau,
        "M": config.neighbor_count,
        "T": config.iterations,
        "beta": config.beta,
        "eta": config.eta,
        "m_step_mode": config.m_step_mode,
        "candidate_pool_size": config.pool_size,
        "sigma_sq_init": config.sigma_sq_init,
        "rng_seed": config.rng_seed,
        "layers": [{"layer_id": lid, "n_per_filter": n} for lid, n in plan],
    }


def _load_dataset(manifest_path):
    entries = load_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    return [load_feature_map_set(e, base) for e in entries]


def _load_inferences(dir_path):
    """image_id -> flattened {node_id: NodeAssignment} from *.inference.json."""
    out = {}
    for name in sorted(os.listdir(dir_path)):
        if not name.endswith(".inference.json"):
            continue
        image_id = name[: -len(".inference.json")]
        out[image_id] = infmod.doc_to_assignments(_read_json(os.path.join(dir_path, name)))
    if not out:
        raise SchemaError(f"no *.inference.json files in {dir_path}")
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_synthetic(args) -> int:
    spec, n_images = _load_synth_spec(args.spec, args.seed)
    graph = synth.gen_planted_graph(spec)
    sample = synth.sample_images(graph, spec, n_images)
    synth.write_dataset(sample, graph, args.out)
    config = LearnConfig(
        neighbor_count=max(1, spec.edges_per_node), rng_seed=spec.rng_seed
    )
    plan = [(ls.layer_id, ls.n_per_filter) for ls in spec.layers]
    with open(os.path.join(args.out, "layers.json"), "w", encoding="utf-8") as fh:
        json.dump(default_learn_config_doc(plan, config), fh, indent=1)
        fh.write("\n")
    print(f"wrote {n_images} images x {len(spec.layers)} layers to {args.out}")
    return 0


def cmd_learn(args) -> int:
    config, plan = _load_learn_config(args.layers, args.seed, args.threads)
    fmap_sets = _load_dataset(args.manifest)
    result = learn_graph(fmap_sets, plan, config)
    write_graph(result.graph, args.out)
    if args.log:
        write_learn_log(result.log_rows, args.log)
    print(f"learned {sum(len(l.nodes) for l in result.graph.layers)} nodes -> {args.out}")
    return 0


def cmd_infer(args) -> int:
    graph = load_graph(args.graph)
    fmap_sets = _load_dataset(args.manifest)
    os.makedirs(args.out, exist_ok=True)

    def run(fs):
        result = infmod.infer_image(graph, fs)
        path = os.path.join(args.out, f"{fs.image_id}.inference.json")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(infmod.inference_to_json(result))

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            list(pool.map(run, fmap_sets))
    else:
        for fs in fmap_sets:
            run(fs)
    print(f"inferred {len(fmap_sets)} images -> {args.out}")
    return 0


def cmd_instability(args) -> int:
    graph = load_graph(args.graph)
    inferences = _load_inferences(args.inferences)
    landmarks = _read_json(args.landmarks)
    node_ids = [node.node_id for layer in graph.layers for node in layer.nodes]
    rows = metrics.node_instability_rows(inferences, landmarks, node_ids)
    metrics.write_instability_csv(rows, args.out)
    print(f"instability for {len(rows)} nodes -> {args.out}")
    return 0


def cmd_heatmap(args) -> int:
    graph = load_graph(args.graph)
    inferences = _load_inferences(args.inferences)
    if args.image not in inferences:
        raise SchemaError(f"no inference results for image {args.image!r}")
    layer_ids = [layer.spec.layer_id for layer in graph.layers]
    if args.layer not in layer_ids:
        raise SchemaError(f"graph has no layer {args.layer!r}")
    li = layer_ids.index(args.layer)
    flat = inferences[args.image]
    assignments = [asg for nid, asg in sorted(flat.items()) if nid[0] == li]
    sigma = {n.node_id: n.sigma_sq for n in graph.layers[li].nodes}
    grid = metrics.render_heatmap(assignments, sigma, args.grid)
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.join(args.out, f"{args.image}_{args.layer}")
    metrics.write_heatmap_pgm(grid, stem + ".pgm")
    metrics.write_heatmap_csv(grid, stem + ".csv")
    print(f"heat map -> {stem}.pgm/.csv")
    return 0


def cmd_aog_build(args) -> int:
    graph = load_graph(args.graph)
    inferences = _load_inferences(args.inferences)
    doc = _read_json(args.annotations)
    _check_keys(doc, {"part", "templates"}, {"part", "templates"}, args.annotations)
    annotations = []
    for ti, tdoc in enumerate(doc["templates"]):
        _check_keys(tdoc, {"image_id", "center"}, {"image_id", "center"}, args.annotations)
        annotations.append(
            aogmod.PartAnnotation(
                image_id=str(tdoc["image_id"]),
                center=(float(tdoc["center"][0]), float(tdoc["center"][1])),
                template_index=ti,
            )
        )
    if args.k is not None:
        k = args.k
    else:
        k = aogmod.pattern_budget(
            [layer.spec for layer in graph.layers], args.k_fraction
        )
    model = aogmod.build_aog(inferences, annotations, doc["part"], k)
    aogmod.write_aog(model, args.out)
    print(f"AOG with {len(model.templates)} templates, k={k} -> {args.out}")
    return 0


def cmd_aog_localize(args) -> int:
    model = aogmod.load_aog(args.aog)
    inferences = _load_inferences(args.inferences)
    truth = _read_json(args.truth) if args.truth else {}
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("image_id,part,u,v,template,score,norm_dist\n")
        for image_id in sorted(inferences):
            try:
                loc = aogmod.localize_part(model, inferences[image_id])
            except ExpGraphError:
                continue
            nd = ""
            if image_id in truth:
                nd = repr(aogmod.normalized_distance(loc.p, truth[image_id]))
            fh.write(
                f"{image_id},{model.part_name},{loc.p[0]!r},{loc.p[1]!r},"
                f"{loc.template_index},{loc.score!r},{nd}\n"
            )
    print(f"localization -> {args.out}")
    return 0


def cmd_validate(args) -> int:
    load_graph(args.graph)
    print("ok")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="expgraph",
        description="Learn and query an explanatory graph over dumped CNN feature maps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="sample a planted dataset")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("learn", help="learn a graph from a dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--layers", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("infer", help="infer pattern positions for every image")
    p.add_argument("--graph", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("instability", help="per-node location instability")
    p.add_argument("--graph", required=True)
    p.add_argument("--inferences", required=True)
    p.add_argument("--landmarks", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_instability)

    p = sub.add_parser("heatmap", help="render a layer's pattern heat map")
    p.add_argument("--graph", required=True)
    p.add_argument("--inferences", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--layer", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", type=int, default=56)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("aog-build", help="build a part localizer from annotations")
    p.add_argument("--graph", required=True)
    p.add_argument("--inferences", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--k-fraction", type=float, default=0.1)
    p.set_defaults(func=cmd_aog_build)

    p = sub.add_parser("aog-localize", help="localize the part on test images")
    p.add_argument("--aog", required=True)
    p.add_argument("--inferences", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--truth", default=None)
    p.set_defaults(func=cmd_aog_localize)

    p = sub.add_parser("validate", help="validate a graph.json")
    p.add_argument("graph")
    p.set_defaults(func=cmd_validate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ExpGraphError, OSError, json.JSONDecodeError) as exc:
        print(
            json.dumps({"error": type(exc).__name__, "context": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
