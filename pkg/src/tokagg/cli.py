"""Command-line surface tying the pipeline together.

Subcommands cover the whole desk-scale loop: synth -> train -> extract ->
index -> search -> eval, plus gradcheck, inspect, and bench. Every
command accepts --seed and produces byte-identical outputs for identical
seeds. Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import formats
from .aggregation import FeatureMap, attention_entropy, lfsa_forward, tokenize, tokenize_learned
from .errors import ConfigurationError, DataError, TokaggError
from .refinement import (
    ModelConfig,
    TokenizerMode,
    multiscale_descriptor,
    refine_stack,
)
from .retrieval import DescriptorIndex, Protocol, bench, evaluate_map, search_topk
from .training import SyntheticDatasetSpec, grad_check_full_model, synth_generate, train

DESK_MODEL = {
    "channels": 16,
    "token_count": 4,
    "descriptor_dim": 32,
    "block_count": 2,
    "head_count": 2,
    "dropout_p": 0.3,
    "scales": [1.0],
}

DESK_TRAIN = {
    "max_steps": 500,
    "batch_size": 16,
    "base_lr": 0.01,
    "weight_decay": 1e-4,
    "momentum": 0.9,
    "margin": 0.2,
    "loss_scale": 32.0,
    "clip_norm": 10.0,
}


def worker_count() -> int:
    """Worker cap from TOKEN_AGG_THREADS, defaulting to machine parallelism."""
    raw = os.environ.get("TOKEN_AGG_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError as exc:
            raise ConfigurationError(f"TOKEN_AGG_THREADS must be an integer, got {raw!r}") from exc
    return os.cpu_count() or 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    payload = formats._load_json(path)
    if not isinstance(payload, dict):
        raise DataError(f"{path}: config must be a JSON object")
    return payload


def _model_config(config: dict) -> ModelConfig:
    fields = dict(DESK_MODEL)
    fields.update(config.get("model", {}))
    return ModelConfig.from_dict(fields)


def _dataset_spec(config: dict, seed: int | None) -> SyntheticDatasetSpec:
    fields = dict(config.get("dataset", {}))
    if seed is not None:
        fields["seed"] = seed
    return SyntheticDatasetSpec.from_dict(fields)


def _train_settings(config: dict) -> dict:
    settings = dict(DESK_TRAIN)
    settings.update(config.get("train", {}))
    return settings


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    spec = _dataset_spec(_load_config(args.config), args.seed)
    corpus = synth_generate(spec)
    out = Path(args.out)
    for split, items in (("train", corpus.train), ("database", corpus.database),
                         ("queries", corpus.queries)):
        split_dir = out / split
        split_dir.mkdir(parents=True, exist_ok=True)
        manifest = []
        for item in items:
            rel = f"{split}/{item.item_id}.tkfm"
            formats.write_tkfm(out / rel, item.values)
            manifest.append({"id": item.item_id, "label": item.label, "scales": [rel]})
        formats.write_manifest(out / f"{split}_manifest.json", manifest)
    formats.write_ground_truth(out / "ground_truth.json", corpus.ground_truth)
    with open(out / "dataset_spec.json", "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"wrote {len(corpus.train)} train / {len(corpus.database)} database / "
          f"{len(corpus.queries)} query maps to {out}")
    return 0


def _load_labeled_manifest(manifest_path: Path):
    from .training import LabeledMap

    payload = formats.read_manifest(manifest_path)
    base = manifest_path.parent
    items = []
    for entry in payload["items"]:
        if "label" not in entry:
            raise DataError(f"{manifest_path}: item {entry['id']} has no label")
        values = formats.read_tkfm(base / entry["scales"][0])
        items.append(LabeledMap(entry["id"], int(entry["label"]), values))
    return items


def _cmd_train(args) -> int:
    config = _load_config(args.config)
    model_config = _model_config(config)
    settings = _train_settings(config)
    corpus = _load_labeled_manifest(Path(args.data) / "train_manifest.json")
    num_classes = max(item.label for item in corpus) + 1
    seed = args.seed if args.seed is not None else 0
    result = train(
        corpus, model_config, num_classes,
        max_steps=int(settings["max_steps"]),
        batch_size=int(settings["batch_size"]),
        base_lr=float(settings["base_lr"]),
        weight_decay=float(settings["weight_decay"]),
        momentum=float(settings["momentum"]),
        margin=float(settings["margin"]),
        loss_scale=float(settings["loss_scale"]),
        clip_norm=float(settings["clip_norm"]) if settings.get("clip_norm") else None,
        seed=seed,
        log=print,
    )
    formats.write_tkck(args.out, result.params, extra={
        "seed": seed,
        "num_classes": num_classes,
        "final_train_loss": result.epoch_losses[-1] if result.epoch_losses else None,
    })
    print(f"wrote checkpoint {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    config = _model_config(_load_config(args.config))
    seed = args.seed if args.seed is not None else 0
    report = grad_check_full_model(config, seed=seed)
    worst = max(report.values())
    for name in sorted(report):
        print(f"{name:28s} max rel err {report[name]:.3e}")
    print(f"overall max rel err {worst:.3e} (tolerance {args.tol:g})")
    return 0 if worst < args.tol else 2


def _scale_maps(entry: dict, base: Path) -> list[FeatureMap]:
    return [FeatureMap.from_array(formats.read_tkfm(base / rel)) for rel in entry["scales"]]


def _cmd_extract(args) -> int:
    params, _ = formats.read_tkck(args.model)
    manifest_path = Path(args.features)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    payload = formats.read_manifest(manifest_path)
    base = manifest_path.parent
    entries = sorted(payload["items"], key=lambda e: e["id"])

    def descriptor(entry: dict) -> np.ndarray:
        return multiscale_descriptor(_scale_maps(entry, base), params)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        rows = list(pool.map(descriptor, entries))
    ids = [entry["id"] for entry in entries]
    formats.write_tkgd(args.out, ids, np.array(rows, dtype=np.float32))
    print(f"wrote {len(ids)} descriptors ({params.config.descriptor_dim}-d) to {args.out}")
    return 0


def _cmd_index(args) -> int:
    ids, matrix = formats.read_tkgd(args.descriptors)
    index = DescriptorIndex.build(ids, matrix)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(args.descriptors, out / "descriptors.tkgd")
    meta = {
        "mode": "exact",
        "descriptors": "descriptors.tkgd",
        "count": index.count,
        "dim": index.dim,
    }
    if args.pq is not None:
        seed = args.seed if args.seed is not None else 0
        index = index.with_pq(args.pq, seed=seed)
        formats.write_tkpq(out / "codebook.tkpq", index.codebook)
        formats.write_tkpc(out / "codes.tkpc", index.codes)
        meta.update({
            "mode": "pq",
            "subvector_dim": args.pq,
            "codebook": "codebook.tkpq",
            "codes": "codes.tkpc",
        })
    with open(out / "index.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"indexed {index.count} descriptors ({meta['mode']}) into {out}")
    return 0


def _load_index(path: str) -> DescriptorIndex:
    root = Path(path)
    meta = formats._load_json(root / "index.json")
    ids, matrix = formats.read_tkgd(root / meta["descriptors"])
    index = DescriptorIndex.build(ids, matrix)
    if meta.get("mode") == "pq":
        codebook = formats.read_tkpq(root / meta["codebook"])
        codes = formats.read_tkpc(root / meta["codes"])
        if codes.shape != (index.count, codebook.num_subquantizers):
            raise DataError(f"{path}: code table shape {codes.shape} inconsistent with index")
        index = DescriptorIndex(index.ids, index.matrix, codebook, codes)
    return index


def _cmd_search(args) -> int:
    index = _load_index(args.index)
    query_ids, queries = formats.read_tkgd(args.queries)
    k = min(args.k, index.count)
    rankings = []
    for qid, row in zip(query_ids, queries):
        ranking = search_topk(index, row.astype(np.float64), k)
        ranking.query_id = qid
        rankings.append(ranking)
    formats.write_rankings_tsv(args.out, rankings)
    print(f"wrote rankings for {len(rankings)} queries to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    rankings = formats.read_rankings_tsv(args.rankings)
    ground_truth = formats.read_ground_truth(args.gt)
    value = evaluate_map(rankings, ground_truth, Protocol(args.protocol))
    print(f"mAP ({args.protocol}): {value:.6f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump({"protocol": args.protocol, "map": value}, fh, sort_keys=True, indent=2)
            fh.write("\n")
    return 0


def _cmd_inspect(args) -> int:
    params, _ = formats.read_tkck(args.model)
    manifest_path = Path(args.features)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    payload = formats.read_manifest(manifest_path)
    entries = {entry["id"]: entry for entry in payload["items"]}
    if args.id not in entries:
        raise DataError(f"item {args.id!r} not in {manifest_path}")
    fmap = _scale_maps(entries[args.id], manifest_path.parent)[0]

    contextual = lfsa_forward(fmap, params.lfsa) if params.lfsa is not None else fmap
    if params.config.tokenizer_mode is TokenizerMode.LEARNED:
        tok_maps, tokens = tokenize_learned(contextual, params.tokenizer)
    else:
        tok_maps, tokens = tokenize(contextual, params.tokenizer)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    formats.write_tkfm(out / "tokenizer_attention.tkfm", tok_maps.values.data)

    lines = ["token  stage      entropy"]
    for i, value in enumerate(attention_entropy(tok_maps)):
        lines.append(f"{i:5d}  tokenizer  {value:.6f}")
    if params.blocks:
        collected: list = []
        refine_stack(tokens, contextual, params.blocks, maps_out=collected)
        refined = collected[-1]
        formats.write_tkfm(out / "refined_attention.tkfm", refined.values.data)
        for i, value in enumerate(attention_entropy(refined)):
            lines.append(f"{i:5d}  refined    {value:.6f}")
    (out / "entropy.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote attention maps and entropy table to {out}")
    return 0


def _cmd_bench(args) -> int:
    index = _load_index(args.index)
    _, queries = formats.read_tkgd(args.queries)
    report = bench(index, queries.astype(np.float64), k=args.k)
    for line in report.lines():
        print(line)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")
    return 0


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="tokagg", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    def command(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=None, help="seed for all randomness")
        p.set_defaults(fn=fn)
        return p

    p = command("synth", _cmd_synth, "generate a synthetic feature-map corpus")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)

    p = command("train", _cmd_train, "train on a synthetic corpus directory")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = command("gradcheck", _cmd_gradcheck, "finite-difference check of the full model")
    p.add_argument("--config", default=None)
    p.add_argument("--tol", type=float, default=1e-4)

    p = command("extract", _cmd_extract, "extract multi-scale global descriptors")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True, help="manifest file or directory")
    p.add_argument("--out", required=True)

    p = command("index", _cmd_index, "build a search index, optionally PQ-compressed")
    p.add_argument("--descriptors", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pq", type=int, choices=(1, 8), default=None,
                   help="compress with 1- or 8-dim subquantizers")

    p = command("search", _cmd_search, "rank database items for each query")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--out", required=True)

    p = command("eval", _cmd_eval, "mean average precision of a ranking file")
    p.add_argument("--rankings", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--protocol", choices=("medium", "hard"), required=True)
    p.add_argument("--out", default=None)

    p = command("inspect", _cmd_inspect, "dump attention maps and entropies for one item")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--id", required=True)
    p.add_argument("--out", required=True)

    p = command("bench", _cmd_bench, "latency and memory report for an index")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out", default=None)

    return parser


def cli_dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    if getattr(args, "fn", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.fn(args)
    except (TokaggError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_dispatch())
