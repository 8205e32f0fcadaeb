"""Command-line entry point.

Settings are layered: built-in defaults, then the ``--config`` file (YAML or
JSON), then command-line flags.  Exit codes: 0 success, 1 usage error,
2 data or validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import html
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from fedar import autograd as ag
from fedar.akr import DEFAULT_GAMMA, DEFAULT_TOP_K, KeywordError, build_attention_index, keyword_table
from fedar.corpus import (Corpus, CorpusError, CorpusSchema, build_vocabulary, generate_synthetic_corpus,
                          load_corpus, load_pretrained_embeddings, random_embeddings,
                          save_corpus, split_dataset, SyntheticSpec)
from fedar.io import atomic_write_text, sig, write_jsonl
from fedar.lead import (METHODS, AudienceSpec, IneligibleAudience, baseline_scores, lead_report,
                        rank_and_select, spawn_audiences)
from fedar.model import CheckpointError, ModelConfig, load_checkpoint, save_checkpoint
from fedar.presets import planted_spec
from fedar.training import TrainConfig, TrainingDiverged, evaluate, train

logger = logging.getLogger("fedar")

OUT_ENV = "FEDAR_OUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("synth-data", "train", "eval", "predict", "keywords", "uncertainty", "attn-export")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# ---------------------------------------------------------------- config


@dataclass
class RunConfig:
    """Merged settings for one invocation."""

    seed: int = 42
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    audience: dict = field(default_factory=dict)
    akr: dict = field(default_factory=lambda: {"gamma": DEFAULT_GAMMA, "top_k": DEFAULT_TOP_K})
    corpus: dict = field(default_factory=lambda: {"rating_max": None, "split_ratios": [0.8, 0.1, 0.1]})
    synthetic: dict | None = None
    paths: dict = field(default_factory=lambda: {"corpus": None, "embeddings": None,
                                                 "checkpoint": None, "out": None})
    threads: int = 1

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"config file not found: {path}")
        try:
            text = path.read_text(encoding="utf-8")
            obj = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise DataError(f"{path}: cannot parse config ({exc})") from None
        return cls.from_dict(obj or {}, source=str(path))

    @classmethod
    def from_dict(cls, obj: dict, source: str = "config") -> "RunConfig":
        cfg = cls()
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise DataError(f"{source}: unknown keys {sorted(unknown)}")
        sub_keys = {
            "model": {f.name for f in fields(ModelConfig)} - {"num_aspects", "num_classes"},
            "train": {f.name for f in fields(TrainConfig)},
            "audience": {f.name for f in fields(AudienceSpec)},
            "akr": {"gamma", "top_k"},
            "corpus": {"rating_min", "rating_max", "split_ratios", "aspect_names"},
            "paths": {"corpus", "embeddings", "checkpoint", "out"},
        }
        for name, value in obj.items():
            if name in sub_keys:
                if not isinstance(value, dict):
                    raise DataError(f"{source}: '{name}' must be a mapping")
                bad = set(value) - sub_keys[name]
                if bad:
                    raise DataError(f"{source}: unknown keys in '{name}': {sorted(bad)}")
                getattr(cfg, name).update(value)
            else:
                setattr(cfg, name, value)
        return cfg

    def model_config(self, num_aspects: int, num_classes: int) -> ModelConfig:
        return ModelConfig.from_dict({**self.model, "num_aspects": num_aspects, "num_classes": num_classes})

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict({"seed": self.seed, **self.train})

    def audience_spec(self) -> AudienceSpec:
        return AudienceSpec.from_dict({"seed": self.seed, **self.audience})


def _merge_flags(cfg: RunConfig, args) -> RunConfig:
    for key in ("corpus", "embeddings", "checkpoint", "out"):
        value = getattr(args, key, None)
        if value is not None:
            cfg.paths[key] = value
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    for flag, switch in (("no_or", "use_overall_rating"), ("no_da", "use_deliberation"),
                         ("no_fe", "use_feature_enrichment")):
        if getattr(args, flag, False):
            cfg.model[switch] = False
    if getattr(args, "gamma", None) is not None:
        cfg.akr["gamma"] = args.gamma
    if getattr(args, "top_k", None) is not None:
        cfg.akr["top_k"] = args.top_k
    return cfg


def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run config; flags override its values")
    common.add_argument("--corpus", help="JSON-lines corpus file")
    common.add_argument("--embeddings", help="GloVe-style text vectors")
    common.add_argument("--checkpoint", help="checkpoint directory")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./fedar-out)")
    common.add_argument("--seed", type=int, default=None, help="seed for every random path (default 42)")
    common.add_argument("--threads", type=int, default=None, help="worker cap for audience scoring")
    common.add_argument("--aspect", help="aspect name or index (default: all aspects)")
    common.add_argument("--verbose", "-v", action="store_true")

    parser = _Parser(prog="fedar", description=__doc__.split("\n\n")[0],
                     epilog="Precedence: command-line flag > config file > built-in default.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    sub.add_parser("synth-data", parents=[common], help="generate a planted-keyword corpus")

    p = sub.add_parser("train", parents=[common], help="train and keep the best dev checkpoint")
    p.add_argument("--no-or", action="store_true", help="drop the overall-rating input")
    p.add_argument("--no-da", action="store_true", help="drop deliberate attention")
    p.add_argument("--no-fe", action="store_true", help="drop feature enrichment")

    p = sub.add_parser("eval", parents=[common], help="ACC/MSE per aspect on dev and test splits")
    p.add_argument("--split", choices=("train", "dev", "test", "all"), default=None)

    sub.add_parser("predict", parents=[common], help="labels, probabilities and attention per review")

    p = sub.add_parser("keywords", parents=[common], help="attention-ranked keyword tables")
    p.add_argument("--mode", choices=("aspect", "opinion"), default="aspect")
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--top-k", type=int, default=None)

    p = sub.add_parser("uncertainty", parents=[common], help="rank reviews by uncertainty")
    p.add_argument("--method", choices=METHODS, default="lead")
    p.add_argument("--top-frac", type=float, default=0.05)

    sub.add_parser("attn-export", parents=[common], help="per-token attention as JSON lines and HTML")
    return parser


# ---------------------------------------------------------------- helpers


def _out_dir(cfg: RunConfig) -> Path:
    return Path(cfg.paths.get("out") or os.environ.get(OUT_ENV) or "fedar-out")


def _require(cfg: RunConfig, *keys: str) -> None:
    for key in keys:
        value = cfg.paths.get(key)
        if not value:
            raise UsageError(f"--{key} is required for this command")
        path = Path(value)
        if key == "checkpoint":
            if not (path / "manifest.json").is_file():
                raise DataError(f"checkpoint not found: {path}")
        elif not path.is_file():
            raise DataError(f"{key} file not found: {path}")


def _load(cfg: RunConfig, num_classes: int | None = None, aspect_names=None) -> Corpus:
    c = cfg.corpus
    rating_min = int(c.get("rating_min", 1))
    rating_max = c.get("rating_max")
    aspect_names = c.get("aspect_names") or aspect_names
    if rating_max is None and num_classes is not None:
        rating_max = rating_min + num_classes - 1
    schema = CorpusSchema(rating_min=rating_min, rating_max=10 ** 9 if rating_max is None else int(rating_max),
                          aspect_names=tuple(aspect_names) if aspect_names else None)
    corpus = load_corpus(cfg.paths["corpus"], schema)
    if rating_max is None:
        top = max(max([*r.aspect_labels, r.overall_rating or 0]) for r in corpus.reviews)
        corpus = replace(corpus, num_classes=top + 1)
    return corpus


def _with_splits(corpus: Corpus, cfg: RunConfig) -> Corpus:
    return split_dataset(corpus, tuple(cfg.corpus.get("split_ratios", (0.8, 0.1, 0.1))), cfg.seed)


def _eval_reviews(corpus: Corpus, split: str | None = "test"):
    if split == "all":
        return list(corpus.reviews), "all"
    if split and corpus.split(split):
        return corpus.split(split), split
    if any(r.split is not None for r in corpus.reviews):
        for name in ("test", "dev", "train"):
            if corpus.split(name):
                return corpus.split(name), name
    return list(corpus.reviews), "all"


def _aspects(arg: str | None, names: Sequence[str]) -> list[int]:
    if arg is None:
        return list(range(len(names)))
    if arg in names:
        return [list(names).index(arg)]
    if arg.isdigit() and int(arg) < len(names):
        return [int(arg)]
    raise DataError(f"unknown aspect {arg!r}; choose from {list(names)}")


def _checkpoint(cfg: RunConfig):
    model, manifest = load_checkpoint(cfg.paths["checkpoint"])
    if model.vocab is None:
        raise DataError("checkpoint has no vocabulary")
    extra = manifest.get("extra", {})
    if "rating_min" in extra.get("corpus", {}):
        cfg.corpus.setdefault("rating_min", extra["corpus"]["rating_min"])
    return model, manifest, extra.get("aspect_names")


def _header(command: str, cfg: RunConfig, **extra) -> dict:
    return {"command": command, "seed": cfg.seed, **extra}


# ---------------------------------------------------------------- commands


def cmd_synth_data(cfg: RunConfig, args) -> int:
    if cfg.synthetic is not None:
        spec = SyntheticSpec.from_dict(cfg.synthetic)
    else:
        spec = planted_spec()
    corpus = _with_splits(generate_synthetic_corpus(spec, cfg.seed), cfg)
    out = _out_dir(cfg)
    save_corpus(corpus, out / "corpus.jsonl")
    atomic_write_text(out / "synthetic_spec.yaml", yaml.safe_dump(spec.to_dict(), sort_keys=True))
    print(json.dumps({"reviews": len(corpus), "splits": {s: len(corpus.split(s)) for s in ("train", "dev", "test")},
                      "path": str(out / "corpus.jsonl")}))
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    _require(cfg, "corpus")
    if cfg.paths.get("embeddings"):
        _require(cfg, "embeddings")
    corpus = _load(cfg)
    if not corpus.split("train") or not corpus.split("dev"):
        corpus = _with_splits(corpus, cfg)
    mcfg = cfg.model_config(corpus.num_aspects, corpus.num_classes)
    tcfg = cfg.train_config()
    vocab = build_vocabulary(corpus.split("train"))
    if cfg.paths.get("embeddings"):
        emb = load_pretrained_embeddings(cfg.paths["embeddings"], vocab, cfg.seed)
        if emb.matrix.shape[1] != mcfg.d_emb:
            raise DataError(f"embedding width {emb.matrix.shape[1]} != model d_emb {mcfg.d_emb}")
    else:
        emb = random_embeddings(vocab, mcfg.d_emb, cfg.seed)

    out = _out_dir(cfg)
    records = []

    def on_epoch(rec):
        records.append(rec.to_dict())
        write_jsonl(out / "metrics.jsonl", records, _header("train", cfg, train=tcfg.to_dict(), model=mcfg.to_dict()))

    result = train(corpus, mcfg, tcfg, vocab=vocab, embeddings=emb, on_epoch=on_epoch)
    save_checkpoint(result.model, out / "checkpoint", cfg.seed, extra={
        "best_epoch": result.best_epoch,
        "best_dev_accuracy": result.best_dev_accuracy,
        "aspect_names": list(corpus.aspect_names),
        "corpus": {"rating_min": corpus.rating_min},
        "train": tcfg.to_dict(),
    })
    print(json.dumps({"best_epoch": result.best_epoch, "best_dev_accuracy": result.best_dev_accuracy,
                      "checkpoint": str(out / "checkpoint")}))
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    _require(cfg, "corpus", "checkpoint")
    model, manifest, names = _checkpoint(cfg)
    corpus = _load(cfg, model.config.num_classes, names)
    splits = [args.split] if args.split else [s for s in ("dev", "test") if corpus.split(s)] or ["all"]
    report = {}
    for s in splits:
        reviews = list(corpus.reviews) if s == "all" else corpus.split(s)
        if not reviews:
            raise DataError(f"split {s!r} is empty")
        report[s] = evaluate(model, reviews, corpus.rating_min).to_dict()
    out = _out_dir(cfg)
    payload = {"header": _header("eval", cfg, checkpoint=str(cfg.paths["checkpoint"]),
                                 aspects=list(corpus.aspect_names)), "metrics": report}
    atomic_write_text(out / "eval.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_predict(cfg: RunConfig, args) -> int:
    _require(cfg, "corpus", "checkpoint")
    model, _, names = _checkpoint(cfg)
    corpus = _load(cfg, model.config.num_classes, names)
    labels, traces = model.predict(list(corpus.reviews))
    records = [{
        "id": t.review_id,
        "labels": (labels[i] + corpus.rating_min).tolist(),
        "probs": [[sig(float(p)) for p in pk] for pk in t.probs],
        "attention": [[sig(float(a)) for a in t.accumulated(k)] for k in range(model.config.num_aspects)],
    } for i, t in enumerate(traces)]
    out = _out_dir(cfg)
    write_jsonl(out / "predictions.jsonl", records,
                _header("predict", cfg, aspects=list(corpus.aspect_names), rating_min=corpus.rating_min))
    print(json.dumps({"reviews": len(records), "path": str(out / "predictions.jsonl")}))
    return EXIT_OK


def cmd_keywords(cfg: RunConfig, args) -> int:
    _require(cfg, "corpus", "checkpoint")
    gamma, top_k = float(cfg.akr["gamma"]), int(cfg.akr["top_k"])
    if gamma <= 0 or top_k < 1:
        raise DataError("gamma must be positive and top-k at least 1")
    model, _, names = _checkpoint(cfg)
    corpus = _load(cfg, model.config.num_classes, names)
    reviews, split = _eval_reviews(corpus)
    aspects = _aspects(args.aspect, corpus.aspect_names)
    index = build_attention_index(model, reviews, split)
    table = keyword_table(index, args.mode, gamma, top_k, corpus.aspect_names, corpus.num_classes, aspects)
    out = _out_dir(cfg)
    header = _header("keywords", cfg, mode=args.mode, gamma=gamma, top_k=top_k, split=split,
                     pos_filtered=table.pos_filtered, deliberation=index.deliberation)
    write_jsonl(out / f"keywords_{args.mode}.jsonl", table.records(corpus.rating_min), header)
    for (k, label), entries in sorted(table.entries.items(), key=lambda kv: (kv[0][0], kv[0][1] or 0)):
        tag = corpus.aspect_names[k] + ("" if label is None else f" = {label + corpus.rating_min}")
        print(f"{tag}: {' '.join(e.word for e in entries[:10]) or '(no words pass the POS filter)'}")
    return EXIT_OK


def cmd_uncertainty(cfg: RunConfig, args) -> int:
    _require(cfg, "corpus", "checkpoint")
    if not 0 < args.top_frac <= 1:
        raise UsageError("--top-frac must lie in (0, 1]")
    spec = cfg.audience_spec()
    if args.method == "lead":
        spec.check()
    model, _, names = _checkpoint(cfg)
    corpus = _load(cfg, model.config.num_classes, names)
    reviews, split = _eval_reviews(corpus)
    if args.method == "lead":
        train_reviews = corpus.split("train") if spec.kind == "continued-training" else None
        if spec.kind == "continued-training" and not train_reviews:
            raise DataError("continued-training audiences need a train split in the corpus")
        audiences = spawn_audiences(model, spec, train_reviews)
        report = lead_report(model, audiences, reviews, zeta=spec.zeta, threads=cfg.threads)
        header = _header("uncertainty", cfg, method="lead", split=split, **{
            "kind": spec.kind, "audiences": spec.count, "rate": spec.rate, "lr": spec.lr,
            "batch_budget": spec.batch_budget, "lambda": report.lam, "eta": report.eta, "zeta": report.zeta})
    else:
        report = baseline_scores(args.method, model, reviews, seed=cfg.seed)
        header = _header("uncertainty", cfg, method=args.method, split=split,
                         **{"lambda": report.lam, "eta": report.eta})
    selected = rank_and_select(report.review_ids, report.log_score, args.top_frac)
    out = _out_dir(cfg)
    write_jsonl(out / f"uncertainty_{args.method}.jsonl", report.records(corpus.rating_min), header)
    atomic_write_text(out / f"selected_{args.method}.txt", "\n".join(selected) + "\n")
    print(json.dumps({"method": args.method, "top_frac": args.top_frac, "selected": selected}))
    return EXIT_OK


def attention_records(traces, aspects: Sequence[int], aspect_names: Sequence[str]) -> list[dict]:
    """One record per (review, aspect) with per-token alpha_G, alpha_D and their average."""
    rows = []
    for t in traces:
        for k in aspects:
            acc = t.accumulated(k)
            rows.append({
                "id": t.review_id,
                "aspect": aspect_names[k],
                "tokens": list(t.tokens),
                "alpha_g": [float(a) for a in t.alpha_g[k]],
                "alpha_d": None if t.alpha_d[k] is None else [float(a) for a in t.alpha_d[k]],
                "accumulated": [float(a) for a in acc],
            })
    return rows


def attention_html(rows: Sequence[dict], title: str = "Attention weights") -> str:
    """Standalone page shading each token by its accumulated weight."""
    parts = [
        "<!DOCTYPE html>", '<html lang="en"><head><meta charset="utf-8">',
        f"<title>{html.escape(title)}</title>",
        "<style>body{font-family:sans-serif;margin:2em}.r{margin:.6em 0}"
        ".t{padding:1px 3px;margin:1px;border-radius:3px;display:inline-block}"
        ".m{color:#666;font-size:.85em;margin-right:.5em}</style>",
        "</head><body>", f"<h1>{html.escape(title)}</h1>",
    ]
    for row in rows:
        spans = []
        for tok, w in zip(row["tokens"], row["accumulated"]):
            spans.append(f'<span class="t" title="{w:.4f}" data-weight="{w!r}" '
                         f'style="background:rgba(220,40,40,{min(max(w, 0.0), 1.0):.4f})">{html.escape(tok)}</span>')
        parts.append(f'<div class="r"><span class="m">{html.escape(row["id"])} / '
                     f'{html.escape(row["aspect"])}</span>{"".join(spans)}</div>')
    parts.append("</body></html>")
    return "\n".join(parts) + "\n"


def cmd_attn_export(cfg: RunConfig, args) -> int:
    _require(cfg, "corpus", "checkpoint")
    model, _, names = _checkpoint(cfg)
    corpus = _load(cfg, model.config.num_classes, names)
    aspects = _aspects(args.aspect, corpus.aspect_names)
    reviews, split = _eval_reviews(corpus)
    _, traces = model.predict(reviews)
    rows = attention_records(traces, aspects, corpus.aspect_names)
    out = _out_dir(cfg)
    write_jsonl(out / "attention.jsonl", rows, _header("attn-export", cfg, split=split))
    atomic_write_text(out / "attention.html", attention_html(rows))
    print(json.dumps({"records": len(rows), "jsonl": str(out / "attention.jsonl"),
                      "html": str(out / "attention.html")}))
    return EXIT_OK


HANDLERS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "keywords": cmd_keywords,
    "uncertainty": cmd_uncertainty,
    "attn-export": cmd_attn_export,
}


def dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
        cfg = _merge_flags(cfg, args)
        if cfg.threads < 1:
            raise UsageError("--threads must be at least 1")
        return HANDLERS[args.command](cfg, args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ag.NumericError, TrainingDiverged) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CorpusError, CheckpointError, IneligibleAudience, KeywordError,
            FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(dispatch())
