"""Command-line pipelines: synth -> ingest -> split -> train -> evaluate -> recommend.

Exit codes: 0 success, 1 usage error (bad flags, missing files), 2 data error
(schema violations, malformed corpora/checkpoints), 3 numeric failure. All
logging goes to stderr; outputs go only to caller-named paths, with stable JSON
key order so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import metrics as metrics_mod
from . import recommend as rec_mod
from . import synth as synth_mod
from . import training as train_mod
from .errors import ModelRankError, NumericsError
from .params import ModelConfig

_USAGE_EXIT = 1
_DATA_EXIT = 2
_NUMERIC_EXIT = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"usage error: {message}", file=sys.stderr)
        raise SystemExit(_USAGE_EXIT)


def _log(args, message: str) -> None:
    if not getattr(args, "quiet", False):
        print(message, file=sys.stderr)


def _read_text(path: str) -> str:
    p = Path(path)
    if not p.exists():
        print(f"usage error: file not found: {path}", file=sys.stderr)
        raise SystemExit(_USAGE_EXIT)
    return p.read_text(encoding="utf-8")


def _load_corpus(path: str) -> corpus_mod.Corpus:
    text = _read_text(path)
    try:
        return corpus_mod.Corpus.from_json(text)
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"data error: cannot parse corpus {path}: {exc}", file=sys.stderr)
        raise SystemExit(_DATA_EXIT)


def _load_checkpoint(path: str) -> train_mod.Checkpoint:
    if not Path(path).exists():
        print(f"usage error: file not found: {path}", file=sys.stderr)
        raise SystemExit(_USAGE_EXIT)
    return train_mod.load_checkpoint(path)


def _write(path: str, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_ingest(args) -> int:
    registry = corpus_mod.MetricRegistry()
    if args.metrics_config:
        registry = corpus_mod.MetricRegistry.from_config(_read_text(args.metrics_config))
    corpus = corpus_mod.ingest(
        _read_text(args.records),
        _read_text(args.models) if args.models else None,
        _read_text(args.datasets) if args.datasets else None,
        registry,
    )
    _write(args.out, corpus.to_json())
    rep = corpus.report
    _log(args, f"ingested {corpus.n_records} records, {corpus.n_groups} groups, "
               f"{len(corpus.catalog.models)} models, {len(corpus.catalog.datasets)} datasets "
               f"(stubbed {rep.stubbed_models} models / {rep.stubbed_datasets} datasets, "
               f"{len(rep.line_errors)} bad lines)")
    for stream, ln, msg in rep.line_errors[:20]:
        _log(args, f"  bad line {stream}:{ln}: {msg}")
    return 0


def _cmd_split(args) -> int:
    corpus = _load_corpus(args.corpus)
    holdout_keys = None
    if args.holdout_keys:
        holdout_keys = [line.strip() for line in _read_text(args.holdout_keys).splitlines()
                        if line.strip()]
    mode = args.mode.replace("-", "_").replace("holdout_", "holdout_")
    mode = {"mask": "mask_entries"}.get(mode, mode)
    spec = corpus_mod.SplitSpec(mode=mode, fraction=args.fraction, seed=args.seed,
                                holdout_keys=holdout_keys)
    splits = corpus_mod.split(corpus, spec)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, part in splits.items():
        _write(out_dir / f"{name}.json", part.to_json())
        _log(args, f"{name}: {part.n_records} records, {part.n_groups} groups")
    return 0


def _cmd_train(args) -> int:
    splits = {
        "train": _load_corpus(args.train),
        "val": _load_corpus(args.val) if args.val else None,
    }
    config = train_mod.TrainConfig()
    if args.config:
        config = train_mod.TrainConfig.from_config_text(_read_text(args.config))
    if args.seed is not None:
        config.seed = args.seed
    if args.max_epochs is not None:
        config.max_epochs = args.max_epochs
    ckpt = train_mod.train(splits, config, ModelConfig())
    train_mod.save_checkpoint(ckpt, args.out)
    if args.log:
        lines = [json.dumps(h, sort_keys=True) for h in ckpt.history]
        _write(args.log, "\n".join(lines) + ("\n" if lines else ""))
    _log(args, f"trained to epoch {ckpt.epoch} "
               f"(best val tau_w {ckpt.best_val_tau_w if ckpt.best_val_tau_w is not None else 'n/a'})")
    return 0


def _cmd_evaluate(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    corpus = _load_corpus(args.test)
    ks = [int(k) for k in args.k.split(",") if k]
    report = metrics_mod.evaluate(ckpt, corpus, ks)
    _write(args.out, report.to_json())
    _log(args, report.to_table())
    return 0


def _cmd_recommend(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    description = _read_text(args.dataset_desc)
    cold_models = None
    if args.candidates:
        cold_models = _parse_models_jsonl(_read_text(args.candidates))
    recs = rec_mod.recommend_top_k(ckpt, description, args.task, args.metric,
                                   k=args.top_k, cold_models=cold_models)
    payload = [{"model": r.model_key, "score": r.score, "z_hat": r.z_hat} for r in recs]
    _write(args.out, json.dumps(payload, sort_keys=True, indent=2))
    _log(args, f"ranked {len(recs)} candidates")
    return 0


def _cmd_replace_pool(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    description = _read_text(args.dataset_desc)
    pool = _parse_pool_jsonl(_read_text(args.pool))
    catalog = _parse_pool_jsonl(_read_text(args.catalog))
    pairs = rec_mod.replace_pool(ckpt, pool, description, args.task, args.metric, catalog)
    payload = [{
        "original": {"model": p.original.model_key, "scale": p.original.scale},
        "selected": {"model": p.selected.model_key, "scale": p.selected.scale},
        "kept_original": p.kept_original,
        "original_rank": p.original_rank,
        "selected_rank": p.selected_rank,
    } for p in pairs]
    _write(args.out, json.dumps(payload, sort_keys=True, indent=2))
    _log(args, f"replaced {sum(not p.kept_original for p in pairs)}/{len(pairs)} slots")
    return 0


def _cmd_probe_prior(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    report = rec_mod.probe_prior(ckpt)
    _write(args.out, report.to_json())
    _log(args, f"size spearman {report.size_spearman:.3f}, "
               f"family eta^2 {report.family_eta_squared:.3f}")
    return 0


def _cmd_advantage(args) -> int:
    corpus = _load_corpus(args.corpus)
    grouping = {"size": "size_bucket", "family": "family"}[args.by]
    adv = rec_mod.standardized_advantage(corpus, grouping)
    _write(args.out, json.dumps({str(k): v for k, v in adv.items()}, sort_keys=True, indent=2))
    _log(args, f"{len(adv)} bins")
    return 0


def _cmd_synth(args) -> int:
    config = synth_mod.SynthConfig()
    if args.config:
        config = synth_mod.SynthConfig.from_dict(corpus_mod.parse_kv_config(_read_text(args.config)))
    if args.seed is not None:
        config.seed = args.seed
    try:
        config.validate()
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return _DATA_EXIT
    records, models, datasets, truth = synth_mod.generate_streams(config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write(out_dir / "records.jsonl", records + "\n")
    _write(out_dir / "models.jsonl", models + "\n")
    _write(out_dir / "datasets.jsonl", datasets + "\n")
    _write(out_dir / "planted_truth.json", truth.to_json())
    _log(args, f"wrote {records.count(chr(10)) + 1} records for {config.n_models} models "
               f"x {config.n_datasets} datasets to {out_dir}")
    return 0


def _parse_models_jsonl(text: str) -> list[corpus_mod.ModelMeta]:
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        out.append(corpus_mod.ModelMeta(
            corpus_mod.normalize_key(str(obj["key"])), str(obj.get("name", obj["key"])),
            str(obj.get("description", "")), obj.get("params"),
            corpus_mod.normalize_key(str(obj["family"])) if obj.get("family") else None))
    return out


def _parse_pool_jsonl(text: str) -> list[rec_mod.PoolEntry]:
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        out.append(rec_mod.PoolEntry(corpus_mod.normalize_key(str(obj["model"])),
                                     int(obj["scale"]), str(obj.get("availability", ""))))
    return out


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="modelrank", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("ingest", help="build a corpus from JSONL streams")
    p.add_argument("--records", required=True)
    p.add_argument("--models")
    p.add_argument("--datasets")
    p.add_argument("--metrics-config", dest="metrics_config")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=_cmd_ingest)

    p = sub.add_parser("split", help="carve a corpus into train/val/test")
    p.add_argument("--corpus", required=True)
    p.add_argument("--mode", required=True,
                   choices=["mask", "mask_entries", "holdout-datasets", "holdout-models",
                            "holdout_datasets", "holdout_models"])
    p.add_argument("--fraction", type=float, default=None)
    p.add_argument("--holdout-keys", dest="holdout_keys")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    common(p)
    p.set_defaults(fn=_cmd_split, seed=0)

    p = sub.add_parser("train", help="train a ranking checkpoint")
    p.add_argument("--train", required=True)
    p.add_argument("--val")
    p.add_argument("--config")
    p.add_argument("--max-epochs", dest="max_epochs", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    common(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("evaluate", help="compute ranking metrics on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--k", default="1,10,30,50")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("recommend", help="rank candidates for a described dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset-desc", dest="dataset_desc", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--metric", required=True)
    p.add_argument("--top-k", dest="top_k", type=int, required=True)
    p.add_argument("--candidates")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=_cmd_recommend)

    p = sub.add_parser("replace-pool", help="swap a routing pool for recommended peers")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--dataset-desc", dest="dataset_desc", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--metric", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=_cmd_replace_pool)

    p = sub.add_parser("probe-prior", help="probe learned size/family trends")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=_cmd_probe_prior)

    p = sub.add_parser("advantage", help="empirical standardized advantage per bin")
    p.add_argument("--corpus", required=True)
    p.add_argument("--by", choices=["size", "family"], required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=_cmd_advantage)

    p = sub.add_parser("synth", help="generate a synthetic ecosystem")
    p.add_argument("--config")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    common(p)
    p.set_defaults(fn=_cmd_synth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return _NUMERIC_EXIT
    except (ModelRankError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return _DATA_EXIT
    except FileNotFoundError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return _USAGE_EXIT


if __name__ == "__main__":
    sys.exit(main())
