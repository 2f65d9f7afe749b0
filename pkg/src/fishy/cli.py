"""Command-line front end: generate, train-encoder, embed, train-flow, fit-combiner, score, evaluate, report.

Every flag can also come from a JSON file given with ``--config``; keys are
flag names with underscores, either at top level or under a section named
after the subcommand. Explicit flags win over the file. Failures print a JSON
object ``{"error": CODE, "message": ...}`` on stderr and exit non-zero.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .aggregation import LogisticCombiner, LogisticConfig, fit_logistic_combiner
from .encoder import TAPS, ToyTrainConfig, encode_all, load_encoder, make_encoder, predict, save_encoder, train_toy
from .errors import ConfigError, ContractViolation, FishyError
from .flow import FlowTrainConfig, flow_mean_nll, flow_train, load_flow, save_flow
from .knn import EmbeddingSet, KnnConfig
from .metrics import (
    BinaryEvalAccumulator,
    accumulate_parallel,
    confusion_matrix,
    miou,
    pavpu_from_acc,
    pr_curve,
    report_csv,
    summarize,
    write_report,
)
from .numerics import atomic_write, derive_rng, load_tensor, resize_bilinear, save_tensor
from .pipeline import METHODS, Scorer, tap_class_sets
from .synth import (
    SynthConfig,
    generate_dataset,
    load_assets,
    load_backgrounds,
    load_dataset_split,
    make_assets,
    make_backgrounds,
)

log = logging.getLogger("fishy")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MISSING_INPUT = 2
EXIT_MISSING_MODEL = 3
EXIT_UNKNOWN_METHOD = 4
EXIT_SHAPE_MISMATCH = 5


class CliError(Exception):
    def __init__(self, code: str, message: str, status: int):
        super().__init__(message)
        self.code = code
        self.status = status


def _missing_input(what: str, path) -> CliError:
    return CliError("MISSING_INPUT", f"{what} not found: {path}", EXIT_MISSING_INPUT)


def _missing_model(what: str) -> CliError:
    return CliError("MISSING_MODEL", f"{what} is required for this method", EXIT_MISSING_MODEL)


def _require_dir(path, what: str) -> Path:
    if path is None or not Path(path).is_dir():
        raise _missing_input(what, path)
    return Path(path)


def _require_file(path, what: str, model: bool = False) -> Path:
    if path is None or not Path(path).is_file():
        raise _missing_model(what) if model else _missing_input(what, path)
    return Path(path)


def _write_json(path, payload) -> None:
    atomic_write(path, (json.dumps(payload, sort_keys=True, indent=1) + "\n").encode("utf-8"))


def _load_dataset(root, split: str):
    root = _require_dir(root, "dataset directory")
    if not (root / "manifest.json").is_file():
        raise _missing_input("dataset manifest", root / "manifest.json")
    items = list(load_dataset_split(root, split))
    if not items:
        raise CliError("MISSING_INPUT", f"split {split!r} of {root} is empty", EXIT_MISSING_INPUT)
    return items


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    overrides = {
        k: getattr(args, k)
        for k in ("n_train", "n_validation", "n_test", "target_prevalence", "height", "width")
        if getattr(args, k) is not None
    }
    base = args.dataset if isinstance(args.dataset, dict) else {}
    cfg = SynthConfig.from_dict({**base, **overrides})
    if args.backgrounds in (None, "procedural"):
        backgrounds = make_backgrounds(max(cfg.n_validation, cfg.n_test), cfg, args.seed)
        train_bgs = make_backgrounds(cfg.n_train, cfg, args.seed, "train-backgrounds")
    else:
        backgrounds = load_backgrounds(_require_dir(args.backgrounds, "background directory"), cfg.depth_near, cfg.depth_far)
        train_bgs = []
        if args.train_backgrounds:
            train_bgs = load_backgrounds(_require_dir(args.train_backgrounds, "training background directory"))
        if not backgrounds:
            raise _missing_input("background images", args.backgrounds)
    if args.assets in (None, "procedural"):
        assets = make_assets(cfg, args.seed)
    else:
        assets = load_assets(_require_dir(args.assets, "asset directory"))
    manifest, _ = generate_dataset(backgrounds, assets, cfg, args.seed, args.out, train_bgs)
    n_images = sum(1 for r in manifest.records if r["split"] != "train")
    total = manifest.ood_pixel_count + manifest.id_pixel_count
    prevalence = manifest.ood_pixel_count / total if total else 0.0
    print(
        f"generated {n_images} evaluation images: ood_pixels={manifest.ood_pixel_count} "
        f"id_pixels={manifest.id_pixel_count} ignored_pixels={manifest.ignored_pixel_count} "
        f"prevalence={prevalence:.6f}"
    )
    return EXIT_OK


def cmd_train_encoder(args) -> int:
    items = _load_dataset(args.dataset, args.split)
    enc = make_encoder(3, dropout_rate=args.dropout, seed=args.seed, void_class=args.void_class)
    cfg = ToyTrainConfig(iterations=args.iterations, seed=args.seed, loss=args.loss, learning_rate=args.learning_rate)
    enc = train_toy(enc, [(im, sem) for _, im, _, sem in items], cfg)
    save_encoder(enc, args.out)
    last = enc.train_history[-1] if enc.train_history else float("nan")
    print(f"trained encoder on {len(items)} images: final loss {last:.4f}")
    return EXIT_OK


def cmd_embed(args) -> int:
    enc = load_encoder(_require_file(args.encoder, "encoder", model=True))
    items = _load_dataset(args.dataset, args.split)
    layers = args.layer or ["s1"]
    for layer in layers:
        if layer not in TAPS:
            raise ConfigError(f"unknown layer id {layer!r}")
    out = Path(args.out)
    images = np.stack([im for _, im, _, _ in items])
    semantic = np.stack([sem for _, _, _, sem in items])
    taps, _ = encode_all(enc, images)
    for layer in layers:
        t = taps[layer]
        save_tensor(out / f"{layer}.fbt", t.reshape(-1, t.shape[-1]))
        sets = tap_class_sets(semantic, layer, t.shape[1:3])
        _write_json(out / f"{layer}_classes.json", {"layer": layer, "class_sets": [sorted(s) for s in sets]})
        print(f"{layer}: {t.shape[0] * t.shape[1] * t.shape[2]} vectors of width {t.shape[-1]}")
    return EXIT_OK


def cmd_train_flow(args) -> int:
    emb = load_tensor(_require_file(args.embeddings, "embedding tensor"))
    cfg = FlowTrainConfig(
        iterations=args.iterations,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        seed=args.seed,
        steps=args.steps,
    )
    model, curve = flow_train(emb, cfg)
    mean_nll = flow_mean_nll(model, emb)
    layer = args.layer or Path(args.embeddings).stem
    save_flow(model, args.out, {"layer": layer, "train_mean_nll": mean_nll, "curve": curve})
    print(f"trained flow for {layer}: train mean NLL {mean_nll:.4f}")
    return EXIT_OK


def _load_flows(paths) -> dict:
    flows = {}
    for p in paths or []:
        model, meta = load_flow(_require_file(p, "flow model", model=True))
        flows[meta.get("layer", Path(p).stem)] = (model, float(meta["train_mean_nll"]))
    return flows


def _scorer(args, method: str) -> Scorer:
    if method == "random":
        return Scorer(None, seed=args.seed)
    enc = load_encoder(_require_file(args.encoder, "encoder", model=True))
    scorer = Scorer(
        enc,
        knn=KnnConfig(args.k, args.kernel_orientation),
        knn_layer=args.knn_layer,
        mc_samples=args.mc_samples,
        preprocess_epsilon=args.epsilon,
        seed=args.seed,
    )
    if method.startswith("learned_density"):
        if not args.flow:
            raise _missing_model("a trained flow (--flow)")
        scorer.flows = _load_flows(args.flow)
    if method == "learned_density_logistic":
        scorer.combiner = LogisticCombiner.load(_require_file(args.combiner, "combiner (--combiner)", model=True))
        if list(scorer.combiner.layer_ids) and list(scorer.combiner.layer_ids) != list(scorer.flows):
            scorer.flows = {k: scorer.flows[k] for k in scorer.combiner.layer_ids if k in scorer.flows}
    if method.startswith("knn"):
        emb_arg = args.embeddings
        if emb_arg and Path(emb_arg).is_dir():
            emb_arg = Path(emb_arg) / f"{args.knn_layer}.fbt"
        emb_path = _require_file(emb_arg, "reference embeddings (--embeddings)", model=True)
        vecs = load_tensor(emb_path)
        sets = None
        cls_path = emb_path.with_name(f"{emb_path.stem}_classes.json")
        if cls_path.is_file():
            sets = json.loads(cls_path.read_text(encoding="utf-8"))["class_sets"]
        if method == "knn_relative_density" and sets is None:
            raise _missing_model("per-embedding class sets")
        ref = EmbeddingSet(vecs, sets)
        scorer.knn_reference = ref.subsample(args.reference_size, derive_rng(args.seed, "knn-reference"))
    if method == "void_class":
        scorer.void_encoder = load_encoder(_require_file(args.void_encoder, "void-class encoder", model=True))
    if method == "dirichlet_entropy":
        scorer.dirichlet_encoder = load_encoder(
            _require_file(args.dirichlet_encoder, "prior-network encoder", model=True)
        )
    return scorer


def cmd_score(args) -> int:
    if args.method not in METHODS:
        raise CliError("UNKNOWN_METHOD", f"unknown method {args.method!r}; choose from {list(METHODS)}", EXIT_UNKNOWN_METHOD)
    items = _load_dataset(args.dataset, args.split)
    scorer = _scorer(args, args.method)
    out = Path(args.out)

    def run(i):
        return scorer.score(args.method, items[i][1], items[i][0]["index"])

    with ThreadPoolExecutor(max_workers=max(args.jobs, 1)) as pool:
        maps = list(pool.map(run, range(len(items))))
    files = []
    for (rec, _, _, _), m in zip(items, maps):
        name = f"{rec['index']:04d}.fbt"
        save_tensor(out / name, m)
        files.append(name)
    params = {"seed": args.seed, "split": args.split}
    if args.method.startswith("knn"):
        params.update({"k": args.k, "layer": args.knn_layer, "kernel_orientation": args.kernel_orientation,
                       "reference_size": len(scorer.knn_reference)})
    if args.method.startswith("learned_density"):
        params.update({"layers": list(scorer.flows), "epsilon": args.epsilon})
    if args.method.startswith("mc_"):
        params["mc_samples"] = args.mc_samples
    _write_json(out / "scoring.json", {"method": args.method, "params": params, "files": files,
                                       "dataset": str(Path(args.dataset).resolve())})
    print(f"scored {len(files)} images with {args.method}")
    return EXIT_OK


def cmd_fit_combiner(args) -> int:
    items = _load_dataset(args.dataset, args.split)
    if not args.flow:
        raise _missing_model("a trained flow (--flow)")
    scorer = Scorer(load_encoder(_require_file(args.encoder, "encoder", model=True)), flows=_load_flows(args.flow))
    feats = np.concatenate([scorer.layer_features(im) for _, im, _, _ in items])
    labels = np.concatenate([mask.reshape(-1) for _, _, mask, _ in items])
    comb = fit_logistic_combiner(feats, labels, LogisticConfig(args.learning_rate, args.iterations, args.seed), list(scorer.flows))
    comb.save(args.out)
    print(f"combiner weights {comb.weights.tolist()} bias {comb.bias:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    items = _load_dataset(args.dataset, args.split)
    score_dir = _require_dir(args.scores, "score directory")
    meta_path = score_dir / "scoring.json"
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.is_file() else {"method": score_dir.name}
    pairs = []
    for rec, image, mask, _ in items:
        p = score_dir / f"{rec['index']:04d}.fbt"
        if not p.is_file():
            raise _missing_input("score file", p)
        s = load_tensor(p)
        if s.shape != mask.shape:
            raise CliError("SHAPE_MISMATCH", f"{p.name}: scores {s.shape} vs mask {mask.shape}", EXIT_SHAPE_MISMATCH)
        pairs.append((s, mask))
    if args.backend == "histogram":
        lo = min(float(s.min()) for s, _ in pairs)
        hi = max(float(s.max()) for s, _ in pairs)
        if hi <= lo:
            hi = lo + 1.0
        template = BinaryEvalAccumulator("histogram", args.bins, (lo, hi))
    else:
        template = BinaryEvalAccumulator("exact")
    acc = accumulate_parallel(template, pairs, args.jobs)
    summary = summarize(acc)
    row = {"method": meta["method"], "dataset": args.dataset_name or Path(args.dataset).name, **summary}
    if args.encoder:
        enc = load_encoder(_require_file(args.encoder, "encoder", model=True))
        mis = template.empty_like()
        cm = np.zeros((enc.n_classes, enc.n_classes), dtype=np.int64)
        for (s, _), (_, image, _, sem) in zip(pairs, items):
            pred = np.argmax(resize_bilinear(predict(enc, image)[..., : enc.n_classes], sem.shape), axis=-1)
            wrong = np.where(sem == 255, 255, (pred != sem).astype(np.uint8))
            mis.add(s, wrong)
            cm += confusion_matrix(pred, sem, enc.n_classes)
        row["PAvPU@t*"] = pavpu_from_acc(mis, summary["threshold_maxJ"])
        row["mIoU"] = miou(cm)
    stem = Path(args.out_prefix)
    write_report(f"{stem}.csv", f"{stem}.curves.json", [row], {row["method"]: pr_curve(acc)})
    _write_json(f"{stem}.result.json", row)
    keys = ("AP", "FPR@95TPR", "maxJ", "PAvPU@t*", "mIoU")
    print(" ".join(f"{k}={row[k]:.6f}" for k in keys if k in row and row[k] is not None))
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for p in args.inputs:
        rows.append(json.loads(_require_file(p, "evaluation result").read_text(encoding="utf-8")))
    text = report_csv(rows)
    if args.out:
        atomic_write(args.out, text.encode("utf-8"))
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", help="JSON file with defaults for any flag")
    p.add_argument("--seed", type=int, help="master seed (default 0)")


# flag defaults; applied after the config file so that the file can override them
DEFAULTS = {
    "seed": 0,
    "split": None,
    "jobs": 1,
    "iterations": None,
    "learning_rate": None,
    "k": 20,
    "kernel_orientation": "similarity-increasing",
    "knn_layer": "s1",
    "reference_size": 10000,
    "mc_samples": 8,
    "epsilon": 0.0,
    "backend": "exact",
    "bins": 2**16,
    "batch_size": 256,
    "steps": 32,
    "dropout": 0.2,
    "loss": "ce",
}

SPLIT_DEFAULTS = {"train-encoder": "train", "embed": "train", "fit-combiner": "validation", "score": "test", "evaluate": "test"}
ITERATION_DEFAULTS = {"train-encoder": 300, "train-flow": 5000, "fit-combiner": 500}
LR_DEFAULTS = {"train-encoder": 1e-2, "train-flow": 1e-4, "fit-combiner": 0.1}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fishy", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize an OoD dataset")
    _add_common(p)
    p.add_argument("--out", help="output directory")
    p.add_argument("--backgrounds", help="background directory or 'procedural' (default)")
    p.add_argument("--train-backgrounds", help="clean training scenes (with --backgrounds)")
    p.add_argument("--assets", help="RGBA asset directory or 'procedural' (default)")
    for name, typ in (("n-train", int), ("n-validation", int), ("n-test", int), ("height", int), ("width", int),
                      ("target-prevalence", float)):
        p.add_argument(f"--{name}", type=typ)
    p.set_defaults(func=cmd_generate, dataset=None)

    p = sub.add_parser("train-encoder", help="train the toy segmentation encoder")
    _add_common(p)
    p.add_argument("--dataset")
    p.add_argument("--split")
    p.add_argument("--out")
    p.add_argument("--iterations", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--loss", choices=["ce", "prior_network"])
    p.add_argument("--dropout", type=float)
    p.add_argument("--void-class", action="store_true", default=None)
    p.set_defaults(func=cmd_train_encoder)

    p = sub.add_parser("embed", help="extract tap embeddings")
    _add_common(p)
    p.add_argument("--dataset")
    p.add_argument("--split")
    p.add_argument("--encoder")
    p.add_argument("--layer", action="append", choices=list(TAPS))
    p.add_argument("--out")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("train-flow", help="fit a flow to an embedding tensor")
    _add_common(p)
    p.add_argument("--embeddings")
    p.add_argument("--layer")
    p.add_argument("--out")
    p.add_argument("--iterations", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_train_flow)

    p = sub.add_parser("fit-combiner", help="fit the logistic layer combiner")
    _add_common(p)
    p.add_argument("--dataset")
    p.add_argument("--split")
    p.add_argument("--encoder")
    p.add_argument("--flow", action="append")
    p.add_argument("--out")
    p.add_argument("--iterations", type=int)
    p.add_argument("--learning-rate", type=float)
    p.set_defaults(func=cmd_fit_combiner)

    p = sub.add_parser("score", help="write per-image anomaly score maps")
    _add_common(p)
    p.add_argument("--dataset")
    p.add_argument("--split")
    p.add_argument("--method")
    p.add_argument("--encoder")
    p.add_argument("--flow", action="append")
    p.add_argument("--combiner")
    p.add_argument("--embeddings", help="reference embedding tensor, or the embed output directory")
    p.add_argument("--void-encoder")
    p.add_argument("--dirichlet-encoder")
    p.add_argument("--k", type=int)
    p.add_argument("--kernel-orientation", choices=["similarity-increasing", "as-printed"])
    p.add_argument("--knn-layer", choices=list(TAPS))
    p.add_argument("--reference-size", type=int)
    p.add_argument("--mc-samples", type=int)
    p.add_argument("--epsilon", type=float, help="input preprocessing step in 8-bit intensity levels (0 = off)")
    p.add_argument("--jobs", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("evaluate", help="compute metrics for a score directory")
    _add_common(p)
    p.add_argument("--dataset")
    p.add_argument("--split")
    p.add_argument("--scores")
    p.add_argument("--encoder", help="enables PAvPU and mIoU")
    p.add_argument("--backend", choices=["exact", "histogram"])
    p.add_argument("--bins", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--dataset-name")
    p.add_argument("--out-prefix")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="merge *.result.json files from evaluate into one CSV table")
    _add_common(p)
    p.add_argument("--inputs", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


REQUIRED = {
    "generate": ("out",),
    "train-encoder": ("dataset", "out"),
    "embed": ("dataset", "encoder", "out"),
    "train-flow": ("embeddings", "out"),
    "fit-combiner": ("dataset", "encoder", "out"),
    "score": ("dataset", "method", "out"),
    "evaluate": ("dataset", "scores", "out_prefix"),
    "report": ("inputs",),
}


def resolve_args(args: argparse.Namespace) -> argparse.Namespace:
    """Merge flags over the config file over built-in defaults; validate before any output is touched."""
    file_cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise _missing_input("config file", path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        file_cfg = {k: v for k, v in raw.items() if not isinstance(v, dict) or k == "dataset"}
        file_cfg.update(raw.get(args.command, {}))
    file_cfg = {k.replace("-", "_"): v for k, v in file_cfg.items()}
    for key, value in vars(args).items():
        if value is None and key in file_cfg:
            setattr(args, key, file_cfg[key])
    if args.command == "generate" and "dataset" in file_cfg:
        args.dataset = file_cfg["dataset"]
    defaults = dict(DEFAULTS)
    defaults["split"] = SPLIT_DEFAULTS.get(args.command)
    defaults["iterations"] = ITERATION_DEFAULTS.get(args.command)
    defaults["learning_rate"] = LR_DEFAULTS.get(args.command)
    defaults["void_class"] = False
    for key, value in defaults.items():
        if hasattr(args, key) and getattr(args, key) is None:
            setattr(args, key, value)
    missing = [k for k in REQUIRED[args.command] if getattr(args, k, None) in (None, [])]
    if missing:
        raise ConfigError(f"missing required setting(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return args


def _fail(code: str, message: str, status: int) -> int:
    sys.stderr.write(json.dumps({"error": code, "message": message}, sort_keys=True) + "\n")
    return status


def main(argv=None) -> int:
    level = os.environ.get("FISHY_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        args = resolve_args(args)
        return args.func(args)
    except CliError as exc:
        return _fail(exc.code, str(exc), exc.status)
    except ContractViolation as exc:
        if "missing model artifact" in str(exc):
            return _fail("MISSING_MODEL", str(exc), EXIT_MISSING_MODEL)
        return _fail(exc.code, str(exc), EXIT_ERROR)
    except FishyError as exc:
        return _fail(exc.code, str(exc), EXIT_ERROR)
    except FileNotFoundError as exc:
        return _fail("MISSING_INPUT", str(exc), EXIT_MISSING_INPUT)


if __name__ == "__main__":
    sys.exit(main())
