"""Command-line entry point.

Every command reads an optional ``--config`` JSON file; flags given on the
command line take precedence over it. Exit status is 0 on success, 1 when
the inputs fail validation and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

from threadpoolctl import threadpool_limits

from . import __version__
from .actlm import ActLmConfig, load_model, majority_baseline, masked_accuracy, save_model, train_act_lm
from .assessment import AssessmentConfig, fuse_metrics, score_corpus, write_scores
from .benchmark import run_benchmark, write_report
from .data import (
    CorpusError,
    Dialogue,
    Segment,
    Utterance,
    dialogue_from_record,
    dump_corpus,
    dump_embeddings,
    load_corpus,
    load_embeddings,
    validate_dialogue,
)
from .desk import corpus_embeddings, desk_corpus, rated_corpus
from .features import build_tfidf, write_feature_csv
from .retrieval import INDEX_FORMAT_VERSION, build_index, load_index, save_index
from .segment import segment_utterance
from .tagger import TaggerParams, load_tagger, save_tagger, tag_corpus, tagger_accuracy, train_tagger

log = logging.getLogger("actflow")


class UsageError(Exception):
    pass


# -- configuration ---------------------------------------------------------------


@dataclass
class RunConfig:
    paths: dict[str, str] = field(default_factory=dict)
    actlm: ActLmConfig = field(default_factory=ActLmConfig)
    assessment: AssessmentConfig = field(default_factory=AssessmentConfig)
    tagger: TaggerParams = field(default_factory=TaggerParams)
    seed: int = 0
    workers: int = 1

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {path}: {e}") from None
        unknown = set(raw) - {"paths", "actlm", "assessment", "tagger", "seed", "workers"}
        if unknown:
            raise UsageError(f"unknown config sections: {sorted(unknown)}")
        try:
            return cls(
                paths={k: str(v) for k, v in raw.get("paths", {}).items()},
                actlm=ActLmConfig.from_dict(raw.get("actlm", {})),
                assessment=AssessmentConfig(**raw.get("assessment", {})),
                tagger=TaggerParams(**raw.get("tagger", {})),
                seed=int(raw.get("seed", 0)),
                workers=int(raw.get("workers", 1)),
            )
        except (TypeError, ValueError) as e:
            raise UsageError(f"invalid config {path}: {e}") from None


def _path(args, cfg: RunConfig, key: str, required: bool = True) -> Path | None:
    value = getattr(args, key, None) or cfg.paths.get(key)
    if value is None:
        if required:
            raise UsageError(f"missing --{key.replace('_', '-')} (or paths.{key} in the config)")
        return None
    return Path(value)


def _input(args, cfg, key) -> Path:
    p = _path(args, cfg, key)
    if not p.exists():
        raise UsageError(f"{key}: {p} does not exist")
    return p


def _output(args, cfg, key, inputs: Sequence[Path | None] = ()) -> Path:
    p = _path(args, cfg, key)
    for src in inputs:
        if src is not None and src.exists() and p.exists() and p.resolve() == src.resolve():
            raise UsageError(f"refusing to overwrite input file {src}")
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _pick(flag_value: Any, config_value: Any) -> Any:
    return config_value if flag_value is None else flag_value


def _seed(args, cfg: RunConfig) -> int:
    return _pick(args.seed, cfg.seed)


def _workers(args, cfg: RunConfig) -> int:
    return max(1, _pick(getattr(args, "workers", None), cfg.workers))


def _kv(**items) -> str:
    return " ".join(f"{k}={v}" for k, v in items.items())


# -- commands ----------------------------------------------------------------------


def cmd_validate(args, cfg: RunConfig) -> int:
    path = _input(args, cfg, "corpus")
    problems: list[str] = []
    seen: dict[str, int] = {}
    count = 0
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            count += 1
            try:
                d = dialogue_from_record(json.loads(line))
            except (json.JSONDecodeError, CorpusError, ValueError, TypeError, AttributeError, KeyError) as e:
                problems.append(f"line {lineno}: {e}")
                continue
            problems += [f"line {lineno}: {p}" for p in validate_dialogue(d)]
            if d.id in seen:
                problems.append(f"line {lineno}: duplicate id {d.id!r} (first on line {seen[d.id]})")
            seen.setdefault(d.id, lineno)
    if count == 0:
        problems.append("empty corpus")
    report = {"path": str(path), "dialogues": count, "violations": problems}
    print(json.dumps(report, indent=2))
    log.info("stage=validate %s", _kv(dialogues=count, violations=len(problems)))
    return 1 if problems else 0


def cmd_segment(args, cfg: RunConfig) -> int:
    src = _input(args, cfg, "input")
    dst = _output(args, cfg, "output", [src])
    dialogues = []
    with src.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                turns = rec["turns"]
                utts = []
                for i, t in enumerate(turns):
                    speaker, text = (t["speaker"], t["text"]) if isinstance(t, dict) else (i % 2, t)
                    utts.append(Utterance(speaker, tuple(Segment(s) for s in segment_utterance(text))))
                d = Dialogue(str(rec["id"]), tuple(utts), rec.get("rating"))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise CorpusError(f"{src}:{lineno}: {e}") from None
            problems = validate_dialogue(d)
            if problems:
                raise CorpusError(f"{src}:{lineno}: " + "; ".join(problems))
            dialogues.append(d)
    if not dialogues:
        raise CorpusError(f"{src}: empty input")
    dump_corpus(dialogues, dst)
    log.info("stage=segment %s", _kv(dialogues=len(dialogues), output=dst))
    return 0


def _actlm_config(args, cfg: RunConfig) -> ActLmConfig:
    overrides = {
        "num_layers": args.layers,
        "num_heads": args.heads,
        "hidden_dim": args.hidden,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
        "max_seq_len": args.max_seq_len,
        "mask_prob": args.mask_prob,
        "seed": args.seed,
    }
    d = asdict(cfg.actlm)
    if args.hidden is not None and args.ffn is None:
        d["ffn_dim"] = 0
    if args.ffn is not None:
        d["ffn_dim"] = args.ffn
    if args.no_truncate:
        d["truncate"] = False
    d.update({k: v for k, v in overrides.items() if v is not None})
    return ActLmConfig.from_dict(d)


def cmd_train_actlm(args, cfg: RunConfig) -> int:
    corpus = load_corpus(_input(args, cfg, "corpus"))
    out = _output(args, cfg, "model")
    acfg = _actlm_config(args, cfg)
    log.info("stage=train-actlm %s", _kv(dialogues=len(corpus), layers=acfg.num_layers, hidden=acfg.hidden_dim, epochs=acfg.epochs, seed=acfg.seed))
    model = train_act_lm(corpus, acfg)
    save_model(model, out)
    log.info("stage=train-actlm %s", _kv(output=out, final_loss=f"{model.loss_history[-1]:.5f}" if model.loss_history else "n/a"))
    return 0


def cmd_eval_actlm(args, cfg: RunConfig) -> int:
    model = load_model(_input(args, cfg, "model"))
    corpus = load_corpus(_input(args, cfg, "corpus"))
    mask_prob = _pick(args.mask_prob, model.config.mask_prob)
    acc = masked_accuracy(model, corpus, mask_prob, _seed(args, cfg))
    base = majority_baseline(corpus)
    print(json.dumps({"masked_accuracy": acc, "majority_baseline": base, "gain": acc - base}))
    return 0


def cmd_train_tagger(args, cfg: RunConfig) -> int:
    corpus = load_corpus(_input(args, cfg, "corpus"))
    out = _output(args, cfg, "tagger")
    p = cfg.tagger
    params = TaggerParams(
        dim=_pick(args.dim, p.dim),
        epochs=_pick(args.epochs, p.epochs),
        learning_rate=_pick(args.lr, p.learning_rate),
        l2=p.l2,
        seed=_seed(args, cfg),
    )
    model = train_tagger(corpus, params)
    save_tagger(model, out)
    log.info("stage=train-tagger %s", _kv(train_accuracy=f"{tagger_accuracy(model, corpus):.4f}", output=out))
    return 0


def cmd_tag(args, cfg: RunConfig) -> int:
    model = load_tagger(_input(args, cfg, "tagger"))
    src = _input(args, cfg, "corpus")
    dst = _output(args, cfg, "output", [src])
    tagged = tag_corpus(model, load_corpus(src), overwrite=args.overwrite)
    dump_corpus(tagged, dst)
    log.info("stage=tag %s", _kv(dialogues=len(tagged), output=dst))
    return 0


def cmd_build_index(args, cfg: RunConfig) -> int:
    corpus = load_corpus(_input(args, cfg, "corpus"))
    embeddings = load_embeddings(_input(args, cfg, "embeddings"))
    model = load_model(_input(args, cfg, "model"))
    h = _pick(args.h, cfg.assessment.h)
    out = _path(args, cfg, "index_dir")
    index = build_index(corpus, model, build_tfidf(corpus), embeddings, h, workers=_workers(args, cfg))
    save_index(index, out)
    log.info("stage=build-index %s", _kv(entries=len(index), h=h, vocab=index.vocab.size, output=out))
    return 0


_VARIANT_FLAGS = {"full": "full", "seg": "seg_only", "consensus-bertscore": "consensus_bertscore"}


def _assessment_config(args, cfg: RunConfig, index_h: int) -> AssessmentConfig:
    a = asdict(cfg.assessment)
    for key, flag in (("w", args.w), ("ka", args.ka), ("kc", args.kc)):
        if flag is not None:
            a[key] = flag
    if args.exclude_self:
        a["exclude_self"] = True
    if args.normalize_f_act:
        a["normalize_f_act"] = True
    a["h"] = index_h
    return AssessmentConfig(**a)


def cmd_score(args, cfg: RunConfig) -> int:
    index = load_index(_input(args, cfg, "index_dir"))
    src = _input(args, cfg, "corpus")
    corpus = load_corpus(src, role="evaluation")
    embeddings = load_embeddings(_input(args, cfg, "embeddings"))
    ref_path = _path(args, cfg, "reference_embeddings", required=False)
    refs = load_embeddings(ref_path) if ref_path else None
    out = _output(args, cfg, "output", [src])
    acfg = _assessment_config(args, cfg, index.h)
    variant = _VARIANT_FLAGS[args.variant]
    results = score_corpus(corpus, embeddings, index, acfg, variant, workers=_workers(args, cfg), reference_embeddings=refs)
    write_scores(results, out)
    log.info("stage=score %s", _kv(dialogues=len(results), variant=variant, w=acfg.w, ka=acfg.ka, kc=acfg.kc, output=out))
    return 0


def load_score_map(path: Path) -> dict[str, float]:
    """Read ``id -> value`` from scores JSONL, a corpus JSONL, a JSON map or a two-column CSV."""
    out: dict[str, float] = {}
    suffix = path.suffix.lower()
    if suffix == ".json":
        raw = json.loads(path.read_text(encoding="utf-8"))
        return {str(k): float(v) for k, v in raw.items() if v is not None}
    if suffix == ".csv":
        with path.open(encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
        start = 1 if rows and not _is_number(rows[0][1]) else 0
        return {r[0]: float(r[1]) for r in rows[start:] if len(r) >= 2 and r[1] != ""}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            did = rec.get("dialogue_id", rec.get("id"))
            value = rec["score"] if "score" in rec else rec.get("rating")
            if did is None:
                raise CorpusError(f"{path}:{lineno}: record without id")
            if value is not None:
                out[str(did)] = float(value)
    return out


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def _named_path(spec: str) -> tuple[str, Path]:
    if "=" in spec:
        name, p = spec.split("=", 1)
        return name, Path(p)
    return Path(spec).stem, Path(spec)


def cmd_benchmark(args, cfg: RunConfig) -> int:
    human = load_score_map(_input(args, cfg, "ratings"))
    if not args.metric:
        raise UsageError("benchmark needs at least one --metric NAME=PATH")
    scores = {}
    for spec in args.metric:
        name, p = _named_path(spec)
        if not p.exists():
            raise UsageError(f"metric file {p} does not exist")
        scores[name] = load_score_map(p)
    report = run_benchmark(scores, human, dataset=args.dataset, alpha=args.alpha)
    write_report(report, args.csv, args.table)
    sys.stdout.write(report.to_table())
    log.info("stage=benchmark %s", _kv(metrics=len(scores), rated=len(human), dataset=args.dataset))
    return 0


def cmd_fuse(args, cfg: RunConfig) -> int:
    (name_a, pa), (name_b, pb) = _named_path(args.a), _named_path(args.b)
    for p in (pa, pb):
        if not p.exists():
            raise UsageError(f"score file {p} does not exist")
    out = _output(args, cfg, "output", [pa, pb])
    fused = fuse_metrics(load_score_map(pa), load_score_map(pb), mode=args.mode)
    label = f"fused-{args.mode}({name_a},{name_b})"
    with out.open("w", encoding="utf-8", newline="\n") as fh:
        for did, v in fused.items():
            fh.write(json.dumps({"dialogue_id": did, "variant": label, "score": v}) + "\n")
    log.info("stage=fuse %s", _kv(dialogues=len(fused), mode=args.mode, output=out))
    return 0


def cmd_export_features(args, cfg: RunConfig) -> int:
    index = load_index(_input(args, cfg, "index_dir"))
    out = _output(args, cfg, "output")
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    bad = set(kinds) - {"act", "tfidf", "content"}
    if bad:
        raise UsageError(f"unknown feature kinds: {sorted(bad)}")
    feats = {did: index.features(did) for did in index.ids}
    corpus_path = _path(args, cfg, "corpus", required=False)
    if corpus_path is not None:
        corpus = load_corpus(corpus_path, role="evaluation")
        embeddings = load_embeddings(_input(args, cfg, "embeddings"))
        for d in corpus:
            feats[f"query:{d.id}"] = index.query_features(d, embeddings[d.id])

    def rows():
        for did, f in feats.items():
            for kind in kinds:
                vec = {"act": f.act, "content": f.content, "tfidf": f.tfidf.to_dense() if kind == "tfidf" else None}[kind]
                yield did, kind, vec

    write_feature_csv(rows(), out)
    log.info("stage=export-features %s", _kv(rows=len(feats) * len(kinds), output=out))
    return 0


def cmd_make_desk(args, cfg: RunConfig) -> int:
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = _seed(args, cfg)
    retrieval = desk_corpus(args.n, seed=seed)
    evaluation = rated_corpus(args.n_eval, seed=seed + 1)
    dump_corpus(retrieval, out / "retrieval.jsonl")
    dump_corpus(evaluation, out / "evaluation.jsonl")
    dump_embeddings(corpus_embeddings(retrieval, args.dim, seed).values(), out / "retrieval_embeddings.jsonl")
    dump_embeddings(corpus_embeddings(evaluation, args.dim, seed).values(), out / "evaluation_embeddings.jsonl")
    log.info("stage=make-desk %s", _kv(retrieval=len(retrieval), evaluation=len(evaluation), output=out))
    return 0


# -- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="actflow", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"actflow {__version__} (index format {INDEX_FORMAT_VERSION})")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, default=1, help="BLAS thread limit (default 1)")
    common.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=func)
        return p

    p = add("validate", cmd_validate, "lint a dialogues.jsonl corpus")
    p.add_argument("--corpus")

    p = add("segment", cmd_segment, "split raw turns into segments")
    p.add_argument("--input")
    p.add_argument("--output")

    p = add("train-actlm", cmd_train_actlm, "train the masked act model")
    p.add_argument("--corpus")
    p.add_argument("--model")
    for flag, typ in (("--layers", int), ("--heads", int), ("--hidden", int), ("--ffn", int), ("--epochs", int),
                      ("--batch-size", int), ("--lr", float), ("--max-seq-len", int), ("--mask-prob", float)):
        p.add_argument(flag, type=typ)
    p.add_argument("--no-truncate", action="store_true")

    p = add("eval-actlm", cmd_eval_actlm, "masked accuracy against the majority baseline")
    p.add_argument("--model")
    p.add_argument("--corpus")
    p.add_argument("--mask-prob", type=float)

    p = add("train-tagger", cmd_train_tagger, "train the baseline act tagger")
    p.add_argument("--corpus")
    p.add_argument("--tagger")
    p.add_argument("--dim", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)

    p = add("tag", cmd_tag, "fill missing act labels")
    p.add_argument("--tagger")
    p.add_argument("--corpus")
    p.add_argument("--output")
    p.add_argument("--overwrite", action="store_true", help="relabel segments that already have an act")

    p = add("build-index", cmd_build_index, "build the pseudo-reference index")
    p.add_argument("--corpus")
    p.add_argument("--embeddings")
    p.add_argument("--model")
    p.add_argument("--index-dir", dest="index_dir")
    p.add_argument("--h", type=int)
    p.add_argument("--workers", type=int)

    p = add("score", cmd_score, "score dialogues against the index")
    p.add_argument("--index-dir", dest="index_dir")
    p.add_argument("--corpus")
    p.add_argument("--embeddings")
    p.add_argument("--reference-embeddings", dest="reference_embeddings")
    p.add_argument("--output")
    p.add_argument("--variant", choices=sorted(_VARIANT_FLAGS), default="full")
    p.add_argument("--w", type=float)
    p.add_argument("--ka", type=int)
    p.add_argument("--kc", type=int)
    p.add_argument("--exclude-self", action="store_true")
    p.add_argument("--normalize-f-act", action="store_true")
    p.add_argument("--workers", type=int)

    p = add("benchmark", cmd_benchmark, "correlate metrics with human ratings")
    p.add_argument("--ratings")
    p.add_argument("--metric", action="append", default=[], help="NAME=PATH (scores JSONL, JSON map or CSV)")
    p.add_argument("--dataset", default="dataset")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--csv")
    p.add_argument("--table")

    p = add("fuse", cmd_fuse, "average two metrics per dialogue")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--mode", choices=("raw", "znorm"), default="raw")
    p.add_argument("--output")

    p = add("export-features", cmd_export_features, "write pooled features as CSV")
    p.add_argument("--index-dir", dest="index_dir")
    p.add_argument("--corpus", help="optional query dialogues to featurize as well")
    p.add_argument("--embeddings")
    p.add_argument("--kinds", default="act,tfidf,content")
    p.add_argument("--output")

    p = add("make-desk", cmd_make_desk, "write a synthetic desk corpus with embeddings")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--n-eval", type=int, default=60)
    p.add_argument("--dim", type=int, default=32)
    return parser


def _setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("ts=%(asctime)s level=%(levelname)s %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level.upper())


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    _setup_logging(args.log_level)
    try:
        cfg = RunConfig.load(args.config)
        with threadpool_limits(limits=args.threads):
            return args.func(args, cfg)
    except UsageError as e:
        print(f"actflow {args.command}: {e}", file=sys.stderr)
        return 2
    except (CorpusError, KeyError, ValueError, FileNotFoundError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"actflow {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
