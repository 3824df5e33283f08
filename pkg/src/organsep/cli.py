"""Command-line entry point: ``organsep <subcommand> [options]``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .cost import EncoderCostConfig, config_row, reference_rows, render_table
from .data import CropStore, pair_key
from .evaluation import (
    Embedder,
    FindingTask,
    build_organwise_tasks,
    evaluate_findingwise,
    evaluate_organwise,
    items_to_json,
    write_results,
)
from .model import DualEncoder, ModelConfig, load_into, parameter_count, preset, read_checkpoint, save_checkpoint
from .pipeline import HttpLlmClient, PairConfig, SplitError, build_pairs, read_manifest, validate_patient_disjoint, write_manifest
from .synthetic import SyntheticConfig, generate_corpus
from .training import MaeDecoder, MetricsLog, NonFiniteLossError, TrainConfig, run_contrastive, run_mae
from .volume import VolumeFormatError, load_mask, load_volume

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("organsep")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
CONFIG_SECTIONS = ("model", "synthetic", "pairs", "mae", "contrastive", "eval")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ------------------------------------------------------------------ config


def load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file {path} not found")
    raw = p.read_bytes()
    try:
        cfg = tomllib.loads(raw.decode("utf-8")) if p.suffix == ".toml" else json.loads(raw)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"cannot parse {path}: {exc}") from exc
    unknown = set(cfg) - set(CONFIG_SECTIONS)
    if unknown:
        raise UsageError(f"unknown config sections {sorted(unknown)}; expected {list(CONFIG_SECTIONS)}")
    return cfg


def model_config(args, cfg: dict) -> ModelConfig:
    try:
        return preset(args.preset, **cfg.get("model", {}))
    except (TypeError, ValueError, KeyError) as exc:
        raise UsageError(f"bad model config: {exc}") from exc


def train_config(stage: str, args, cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict({"stage": stage, "seed": args.seed, **cfg.get(stage, {})})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad {stage} config: {exc}") from exc


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def tree_digest(path: str | Path) -> str:
    """Content hash of a file, or of a directory's files and their relative paths."""
    root = Path(path)
    if root.is_file():
        return file_digest(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file() and q.name != "run.json"):
        h.update(p.relative_to(root).as_posix().encode() + b"\0" + file_digest(p).encode() + b"\n")
    return h.hexdigest()


def write_run(out: Path, args, resolved: dict, inputs: dict[str, str | Path | None]) -> None:
    meta = {
        "subcommand": args.command,
        "seed": args.seed,
        "version": __version__,
        "threads": args.threads,
        "config": resolved,
        "inputs": {k: {"path": str(v), "sha256": tree_digest(v)} for k, v in sorted(inputs.items()) if v is not None},
    }
    (out / "run.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _require_out(args) -> Path:
    if args.out is None:
        raise UsageError(f"{args.command} requires --out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_file(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing --{what}")
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} {p} does not exist")
    return p


# ------------------------------------------------------------ subcommands


def cmd_gen_synthetic(args, cfg) -> int:
    out = _require_out(args)
    params = {"seed": args.seed, **cfg.get("synthetic", {})}
    if args.cases is not None:
        params["n_cases"] = args.cases
    try:
        syn = SyntheticConfig(**params)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad synthetic config: {exc}") from exc
    summary = generate_corpus(out, syn)
    write_run(out, args, {"synthetic": summary["config"]}, {})
    print(json.dumps(summary, sort_keys=True))
    return 0


def _llm_client():
    if os.environ.get("LLM_ENDPOINT"):
        return HttpLlmClient(os.environ["LLM_ENDPOINT"], os.environ.get("LLM_MODEL"))
    return None


def cmd_build_pairs(args, cfg) -> int:
    out = _require_out(args)
    corpus = _require_file(args.corpus, "corpus")
    params = {"seed": args.seed, "threads": args.threads, **cfg.get("pairs", {})}
    if args.no_augment:
        params["augment"] = False
    try:
        pc = PairConfig(**params)
    except TypeError as exc:
        raise UsageError(f"bad pairs config: {exc}") from exc
    result = build_pairs(corpus, pc, _llm_client())
    write_manifest(out / "pairs.jsonl", result.pairs)
    (out / "stats.json").write_text(json.dumps(result.stats, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    write_run(out, args, {"pairs": asdict(pc)}, {"corpus": corpus})
    n = len(result.pairs)
    print(f"{n} pairs written to {out / 'pairs.jsonl'}")
    return 0


def _train_records(manifest: Path, split: str) -> list[dict]:
    records = read_manifest(manifest)
    validate_patient_disjoint(records)
    return [r for r in records if r["split"] == split]


def _load_init(model: DualEncoder, path: Path | None, decoder: MaeDecoder | None = None) -> None:
    if path is None:
        return
    meta, tensors = read_checkpoint(path)
    if replace(ModelConfig.from_json(meta["model"]), dtype=model.config.dtype) != model.config:
        raise DataError(f"checkpoint {path} was trained with a different model config")
    load_into(model, tensors, "model")
    if decoder is not None and any(k.startswith("decoder.") for k in tensors):
        load_into(decoder, tensors, "decoder")


def _fit_input_norm(model: DualEncoder, store: CropStore, keys, init) -> None:
    """Fresh models take their input statistics from the training crops; --init keeps the stored ones."""
    if init is None and model.config.input_norm:
        model.image.fit_input_norm(store.windows(k) for k in keys)


def cmd_pretrain_mae(args, cfg) -> int:
    out = _require_out(args)
    corpus = _require_file(args.corpus, "corpus")
    manifest = _require_file(args.manifest, "manifest")
    mcfg = model_config(args, cfg)
    tcfg = train_config("mae", args, cfg)
    train = _train_records(manifest, "train")
    keys = sorted({pair_key(r) for r in train})
    if not keys:
        raise DataError("manifest has no training pairs")
    evals = sorted({pair_key(r) for r in _train_records(manifest, "valid")}) or keys
    eval_keys = [evals[i] for i in np.random.default_rng([args.seed, 97]).permutation(len(evals))[: args.eval_batch]]

    store = CropStore(corpus, mcfg)
    store.prefetch(keys + eval_keys)
    model = DualEncoder(mcfg, seed=args.seed)
    decoder = MaeDecoder(mcfg, seed=args.seed + 1).to(mcfg.torch_dtype)
    _load_init(model, Path(args.init) if args.init else None, decoder)
    _fit_input_norm(model, store, keys, args.init)
    eval_tokens = torch.stack([store.windows(k)[0] for k in eval_keys])
    data_rng = np.random.default_rng([args.seed, 211])

    def tokens_for(idx):
        return torch.stack([store.train_tokens(keys[i], data_rng) for i in idx])

    metrics = MetricsLog(str(out / "metrics.jsonl"))
    (out / "metrics.jsonl").write_text("")
    t0 = time.perf_counter()
    result = run_mae(model, decoder, tokens_for, len(keys), tcfg, metrics, eval_tokens)
    log.info("mae: %d steps in %.1fs", result["steps"], time.perf_counter() - t0)
    curve = result["eval_curve"]
    summary = {
        "items": len(keys),
        "eval_items": len(eval_keys),
        "steps": result["steps"],
        "eval_curve": curve,
        "initial_loss": curve[0],
        "final_loss": curve[-1],
        "reduction": 1 - curve[-1] / curve[0],
    }
    (out / "mae.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    save_checkpoint(out / "checkpoint", {"model": model, "decoder": decoder}, {"model": mcfg.to_json(), "seed": args.seed, "stage": "mae"})
    write_run(out, args, {"model": mcfg.to_json(), "mae": tcfg.to_json()}, {"corpus": corpus, "manifest": manifest, "init": args.init})
    print(f"mae eval loss {curve[0]:.6g} -> {curve[-1]:.6g} ({100 * summary['reduction']:.1f}% reduction)")
    return 0


def cmd_train_clip(args, cfg) -> int:
    out = _require_out(args)
    corpus = _require_file(args.corpus, "corpus")
    manifest = _require_file(args.manifest, "manifest")
    mcfg = model_config(args, cfg)
    tcfg = train_config("contrastive", args, cfg)
    train = _train_records(manifest, "train")
    if len(train) < 2:
        raise DataError("contrastive training needs at least two training pairs")
    store = CropStore(corpus, mcfg)
    keys = sorted({pair_key(r) for r in train})
    store.prefetch(keys)
    model = DualEncoder(mcfg, seed=args.seed)
    _load_init(model, Path(args.init) if args.init else None)
    _fit_input_norm(model, store, keys, args.init)

    def batch_for(idx, rng):
        toks = torch.stack([store.train_tokens(pair_key(train[i]), rng) for i in idx])
        return toks, [train[i]["text"] for i in idx]

    metrics = MetricsLog(str(out / "metrics.jsonl"))
    (out / "metrics.jsonl").write_text("")
    t0 = time.perf_counter()
    result = run_contrastive(model, batch_for, len(train), tcfg, metrics)
    log.info("contrastive: %d steps in %.1fs", result["steps"], time.perf_counter() - t0)
    save_checkpoint(out / "checkpoint", {"model": model}, {"model": mcfg.to_json(), "seed": args.seed, "stage": "contrastive"})
    write_run(out, args, {"model": mcfg.to_json(), "contrastive": tcfg.to_json()}, {"corpus": corpus, "manifest": manifest, "init": args.init})
    losses = [r["loss"] for r in metrics.rows]
    print(f"contrastive loss {losses[0]:.4f} -> {losses[-1]:.4f} over {result['steps']} steps")
    return 0


def _eval_setup(args, cfg):
    out = _require_out(args)
    corpus = _require_file(args.corpus, "corpus")
    ckpt = _require_file(args.checkpoint, "checkpoint")
    meta, tensors = read_checkpoint(ckpt)
    mcfg = ModelConfig.from_json(meta["model"])
    if "dtype" in cfg.get("model", {}):
        mcfg = replace(mcfg, dtype=cfg["model"]["dtype"])
    model = DualEncoder(mcfg, seed=meta.get("seed", 0))
    load_into(model, tensors, "model")
    ecfg = {"aggregation": "mean", "split": "test", **cfg.get("eval", {})}
    if args.aggregation:
        ecfg["aggregation"] = args.aggregation
    if args.split:
        ecfg["split"] = args.split
    if ecfg["aggregation"] not in ("mean", "max"):
        raise UsageError("aggregation must be mean or max")
    return out, corpus, ckpt, model, Embedder(model, CropStore(corpus, mcfg)), ecfg


def cmd_eval_organ(args, cfg) -> int:
    manifest = _require_file(args.manifest, "manifest")
    out, corpus, ckpt, model, embedder, ecfg = _eval_setup(args, cfg)
    records = read_manifest(manifest)
    validate_patient_disjoint(records)
    records = [r for r in records if r["split"] == ecfg["split"]]
    items = build_organwise_tasks(records, np.random.default_rng([args.seed, 61]))
    if not items:
        raise DataError(f"no organ-wise items in split {ecfg['split']!r}")
    results = evaluate_organwise(embedder, items, ecfg["aggregation"])
    results["split"] = ecfg["split"]
    write_results(out, "organ", results)
    (out / "organ_items.json").write_text(json.dumps(items_to_json(items), indent=1) + "\n", encoding="utf-8")
    write_run(out, args, {"eval": ecfg}, {"corpus": corpus, "manifest": manifest, "checkpoint": ckpt})
    print(f"organ-wise macro F1 {results['macro_f1']:.4f} over {results['n']} items")
    return 0


def _split_cases(corpus: Path, split: str) -> set[str] | None:
    path = corpus / "splits.json"
    if not path.exists():
        return None
    patients = set(json.loads(path.read_text(encoding="utf-8")).get(split, []))
    cases = set()
    for d in sorted(p for p in corpus.iterdir() if p.is_dir()):
        meta = d / "case.json"
        pid = json.loads(meta.read_text(encoding="utf-8")).get("patient_id", d.name) if meta.exists() else d.name
        if pid in patients:
            cases.add(d.name)
    return cases


def cmd_eval_finding(args, cfg) -> int:
    out, corpus, ckpt, model, embedder, ecfg = _eval_setup(args, cfg)
    tasks_path = _require_file(args.tasks or corpus / "finding_tasks.json", "tasks")
    labels_path = _require_file(args.labels or corpus / "finding_labels.jsonl", "labels")
    tasks = [FindingTask.from_json(t) for t in json.loads(tasks_path.read_text(encoding="utf-8"))]
    labels = [json.loads(ln) for ln in labels_path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    keep = _split_cases(corpus, ecfg["split"])
    if keep is not None:
        labels = [r for r in labels if r["case_id"] in keep]
    if not labels:
        raise DataError(f"no finding labels in split {ecfg['split']!r}")
    results = evaluate_findingwise(embedder, tasks, labels, ecfg["aggregation"])
    results["split"] = ecfg["split"]
    write_results(out, "finding", results)
    write_run(out, args, {"eval": ecfg}, {"corpus": corpus, "checkpoint": ckpt, "tasks": tasks_path, "labels": labels_path})
    print(f"finding-wise mean AUROC {results['mean_auroc']:.4f} over {len(results['per_finding'])} findings")
    return 0


def cmd_flops(args, cfg) -> int:
    mcfg = model_config(args, cfg)
    cost = EncoderCostConfig.from_model(mcfg)
    row = config_row(cost, crop_dims=mcfg.crop, convention=args.convention)
    rows = (reference_rows() if args.reference else []) + [row]
    text = render_table(rows, args.format)
    sys.stdout.write(text)
    params = parameter_count(mcfg)
    print(f"tokens {cost.tokens}, image-tower parameters {params['image']:,}, total {params['total']:,}")
    if args.out:
        out = _require_out(args)
        (out / f"flops.{'csv' if args.format == 'csv' else 'md'}").write_text(text, encoding="utf-8")
        write_run(out, args, {"model": mcfg.to_json(), "convention": args.convention}, {})
    return 0


def _inspect(path: Path) -> dict:
    if path.is_dir() and (path / "checkpoint.json").exists():
        meta, tensors = read_checkpoint(path)
        return {"kind": "checkpoint", "meta": meta, "tensors": len(tensors), "values": int(sum(t.size for t in tensors.values()))}
    if path.is_dir():
        cases = sorted(p.name for p in path.iterdir() if p.is_dir() and (p / "report.txt").exists())
        return {"kind": "corpus", "cases": len(cases), "splits": (path / "splits.json").exists()}
    if path.suffix == ".jsonl":
        records = read_manifest(path)
        validate_patient_disjoint(records)
        by = {}
        for r in records:
            key = f"{r['split']}/{r['polarity']}/{r['source']}"
            by[key] = by.get(key, 0) + 1
        return {"kind": "manifest", "pairs": len(records), "counts": dict(sorted(by.items())), "patient_disjoint": True}
    if path.suffix == ".vvol":
        try:
            mask = load_mask(path)
            return {"kind": "mask", "dims": list(mask.dims), "organs": sorted(mask.present_organs())}
        except VolumeFormatError:
            vol = load_volume(path)
            v = vol.voxels
            return {"kind": "volume", "dims": list(vol.dims), "min": int(v.min()), "max": int(v.max()), "mean": float(v.mean())}
    raise UsageError(f"do not know how to inspect {path}")


def cmd_inspect(args, cfg) -> int:
    path = _require_file(args.path, "path")
    print(json.dumps(_inspect(path), indent=1, sort_keys=True))
    return 0


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "build-pairs": cmd_build_pairs,
    "pretrain-mae": cmd_pretrain_mae,
    "train-clip": cmd_train_clip,
    "eval-organ": cmd_eval_organ,
    "eval-finding": cmd_eval_finding,
    "flops": cmd_flops,
    "inspect": cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON or TOML file with sections " + ", ".join(CONFIG_SECTIONS))
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output directory; nothing is written elsewhere")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--preset", choices=("desk", "paper"), default="desk")
    common.add_argument("--log-level", default="WARNING")

    parser = _Parser(prog="organsep", description="Organ-level volume-text pairs, pretraining and zero-shot evaluation.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-synthetic", parents=[common], help="write a synthetic corpus")
    p.add_argument("--cases", type=int)

    p = sub.add_parser("build-pairs", parents=[common], help="build the organ-level pair manifest")
    p.add_argument("--corpus")
    p.add_argument("--no-augment", action="store_true")

    for name, help_ in (("pretrain-mae", "masked-reconstruction pretraining"), ("train-clip", "contrastive training")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--corpus")
        p.add_argument("--manifest")
        p.add_argument("--init", help="checkpoint directory to start from")
        if name == "pretrain-mae":
            p.add_argument("--eval-batch", type=int, default=16)

    for name in ("eval-organ", "eval-finding"):
        p = sub.add_parser(name, parents=[common], help=f"zero-shot {name[5:]}-wise evaluation")
        p.add_argument("--corpus")
        p.add_argument("--checkpoint")
        p.add_argument("--split")
        p.add_argument("--aggregation", choices=("mean", "max"))
        if name == "eval-organ":
            p.add_argument("--manifest")
        else:
            p.add_argument("--tasks")
            p.add_argument("--labels")

    p = sub.add_parser("flops", parents=[common], help="compute-cost table row")
    p.add_argument("--convention", choices=("mac", "2mac"), default="mac")
    p.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    p.add_argument("--reference", action="store_true", help="include the published comparison rows")

    p = sub.add_parser("inspect", parents=[common], help="summarize a manifest, checkpoint, corpus or volume")
    p.add_argument("path")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"organsep: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("organsep: error: --threads must be positive", file=sys.stderr)
        return EXIT_USAGE
    torch.set_num_threads(args.threads)
    try:
        cfg = load_config_file(args.config)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"organsep: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"organsep: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, SplitError, VolumeFormatError, OSError, KeyError, ValueError) as exc:
        print(f"organsep: data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())
