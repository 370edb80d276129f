"""Command-line entry point.

Every subcommand that takes a seed writes byte-identical JSON for identical
inputs: keys are sorted and floats use repr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment
from .extract import extract_fcg
from .graph import graph_stats, read_corpus, to_adjacency, write_corpus
from .metrics import auc_at_fpr, f1_report, make_splits
from .osr import UNKNOWN, OsrModel, classify_batch, fit_class_stats, manual_threshold, outlier_scores
from .pipeline import (
    FinetuneConfig,
    NetworkConfig,
    PretrainConfig,
    RepresentationSet,
    embed,
    finetune,
    load_model,
    pretrain_dtae,
    save_model,
)
from .synth import SynthConfig, synth_corpus

log = logging.getLogger("fcgosr")


def _dump(obj, path: str | None) -> None:
    text = json.dumps(obj, sort_keys=True, indent=1) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _read_json(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _tensors(corpus, size: int):
    return [to_adjacency(g, size, "truncate") for g in corpus]


def _known(arg: str | None, names: list[str]) -> list[int]:
    if not arg:
        return list(range(len(names)))
    want = arg.split(",")
    missing = [w for w in want if w not in names]
    if missing:
        raise SystemExit(f"unknown class labels {missing}")
    return sorted(names.index(w) for w in want)


def _source(parser: argparse.ArgumentParser, flag: str, help_text: str) -> None:
    """A required input given either positionally or as ``flag``."""
    parser.add_argument("source", nargs="?", help=help_text)
    parser.add_argument(flag, dest="source_flag", metavar="PATH", help=f"same as the positional {help_text}")


def _resolve(args, parser) -> None:
    if hasattr(args, "source"):
        if args.source and args.source_flag and args.source != args.source_flag:
            parser.error("give the input once, positionally or by flag")
        args.source = args.source or args.source_flag
        if not args.source:
            parser.error(f"{args.command} needs an input path")


def cmd_extract(args) -> None:
    diags = {}
    corpus = []
    for path in [*args.inputs, *(args.source_flag or [])]:
        text = Path(path).read_text(encoding="utf-8")
        g, diag = extract_fcg(text, args.ngram, args.hashes, args.bands, args.seed, args.label)
        corpus.append(g)
        diags[str(path)] = diag.unresolved_callees
    write_corpus(corpus, args.out)
    if any(diags.values()):
        log.warning("unresolved callee counts: %s", json.dumps(diags, sort_keys=True))


def cmd_stats(args) -> None:
    _dump(graph_stats(read_corpus(args.source)).to_dict(), args.out)


def cmd_synth(args) -> None:
    params = _read_json(args.config)
    if args.seed is not None:
        params["seed"] = args.seed
    cfg = SynthConfig(**params)
    write_corpus(synth_corpus(cfg), args.out)


def cmd_split(args) -> None:
    _, names = experiment.class_index(read_corpus(args.source))
    splits = make_splits(range(len(names)), args.known, args.groups, args.runs, args.seed)
    _dump({"class_names": names, "splits": [s.to_dict() for s in splits]}, args.out)


def _network(params: dict) -> NetworkConfig:
    return NetworkConfig(**params.get("network", {}))


def cmd_pretrain(args) -> None:
    params = _read_json(args.config)
    network = _network(params)
    pcfg = PretrainConfig(**{**params.get("pretrain", {}), **({"seed": args.seed} if args.seed is not None else {})})
    if args.kind:
        pcfg = dataclasses.replace(pcfg, kinds=[args.kind])
    corpus = read_corpus(args.source)
    labels, names = experiment.class_index(corpus)
    known = _known(args.known, names)
    keep = np.isin(labels, known)
    tensors = [t for t, k in zip(_tensors(corpus, network.size), keep) if k]
    model = pretrain_dtae(tensors, pcfg, network, labels=labels[keep], known=known)
    save_model(model, args.out)


def cmd_finetune(args) -> None:
    params = _read_json(args.config)
    fparams = {**params.get("finetune", {}), "loss": experiment.LOSS_ALIASES[args.loss]}
    if args.seed is not None:
        fparams["seed"] = args.seed
    fcfg = FinetuneConfig(**fparams)
    model = load_model(args.model) if args.model else None
    network = model.network if model else _network(params)
    corpus = read_corpus(args.source)
    labels, names = experiment.class_index(corpus)
    known = _known(args.known, names)
    keep = np.isin(labels, known)
    tensors = [t for t, k in zip(_tensors(corpus, network.size), keep) if k]
    tuned = finetune(model, tensors, labels[keep], fcfg, known=known, network=network)
    save_model(tuned, args.out)


def cmd_embed(args) -> None:
    model = load_model(args.model)
    corpus = read_corpus(args.source)
    labels, _ = experiment.class_index(corpus)
    known = set(model.known_classes)
    marked = [l if l in known else UNKNOWN for l in labels.tolist()]
    reps = embed(model, _tensors(corpus, model.network.size), marked, [str(i) for i in range(len(corpus))])
    reps.save(args.out)


def cmd_fit_osr(args) -> None:
    reps = RepresentationSet.load(args.source)
    mask = reps.labels != UNKNOWN
    osr = fit_class_stats(reps.z[mask], reps.labels[mask])
    if args.threshold == "manual":
        osr = osr.with_threshold("manual", manual_threshold(outlier_scores(osr, reps.z[mask]), args.percentile))
    _dump(osr.to_dict(), args.out)


def cmd_score(args) -> None:
    osr = OsrModel.from_dict(_read_json(args.osr))
    reps = RepresentationSet.load(args.source)
    if args.model and load_model(args.model).network.rep_dim != osr.dim:
        raise SystemExit("OSR model dimension does not match the encoder's representation size")
    scores = outlier_scores(osr, reps.z)
    preds = classify_batch(osr, reps.z)
    out = {"ids": reps.ids, "scores": scores.tolist(), "predictions": preds.tolist(),
           "threshold": osr.threshold}
    truth = reps.labels
    unknown = truth == UNKNOWN
    if unknown.any() and not unknown.all():
        out["auc_full"] = auc_at_fpr(scores, unknown, 1.0)
        out["auc_at_10"] = auc_at_fpr(scores, unknown, 0.1)
    out["f1"] = f1_report(preds, truth, osr.class_ids).to_dict()
    _dump(out, args.out)


def cmd_run(args) -> None:
    cfg, out_dir = experiment.load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out_dir = args.out or out_dir or "out"
    jobs = args.jobs if args.jobs else 1
    report = experiment.run_experiment(cfg, out_dir, jobs, Path(args.config).parent)
    sys.stdout.write(_summary_table(report))


def _summary_table(report: dict) -> str:
    lines = [f"{'method':<40} {'auc':>6} {'auc10':>6} {'f1_k':>6} {'f1_u':>6} {'f1_o':>6}"]
    for name, m in sorted(report["methods"].items()):
        cells = [m[k]["mean"] for k in experiment.METRICS]
        lines.append(f"{name:<40} " + " ".join(f"{c:6.3f}" for c in cells))
    return "\n".join(lines) + "\n"


def cmd_metrics(args) -> None:
    report = _read_json(args.report)
    if args.json:
        _dump({k: report[k] for k in ("methods", "per_group", "threshold_gap_f1_overall") if k in report}, args.out)
    else:
        sys.stdout.write(_summary_table(report))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fcgosr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("extract", help="disassembly listings to a JSONL corpus")
    s.add_argument("inputs", nargs="*")
    s.add_argument("--in", dest="source_flag", action="append", metavar="LISTING")
    s.add_argument("--out", required=True)
    s.add_argument("--label")
    s.add_argument("--ngram", type=int, default=2)
    s.add_argument("--hashes", type=int, default=64)
    s.add_argument("--bands", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("stats", help="graph statistics of a corpus")
    _source(s, "--in", "corpus")
    s.add_argument("--out")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--config", help="JSON with SynthConfig fields")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("split", help="known/unknown class splits")
    _source(s, "--corpus", "corpus")
    s.add_argument("--known", type=int, default=6)
    s.add_argument("--groups", type=int, default=3)
    s.add_argument("--runs", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("pretrain", help="self-supervised pre-training")
    _source(s, "--corpus", "corpus")
    s.add_argument("--config", help="JSON with network and pretrain sections")
    s.add_argument("--kind", choices=["node_dropping", "subgraph_sampling", "fcg_shift", "fcg_random"])
    s.add_argument("--known", help="comma-separated class labels to train on")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="supervised fine-tuning")
    _source(s, "--corpus", "corpus")
    s.add_argument("--model", help="pre-trained model; omit to train from scratch")
    s.add_argument("--config")
    s.add_argument("--loss", choices=["ce", "cross_entropy", "triplet"], default="ce")
    s.add_argument("--known")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("embed", help="encode a corpus to representations")
    _source(s, "--corpus", "corpus")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("fit-osr", help="fit prototypes and distance statistics")
    _source(s, "--in", "representations")
    s.add_argument("--threshold", choices=["statistical", "manual"], default="statistical")
    s.add_argument("--percentile", type=float, default=99.0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_fit_osr)

    s = sub.add_parser("score", help="outlier scores and decisions")
    _source(s, "--in", "representations")
    s.add_argument("--osr", required=True)
    s.add_argument("--model", help="encoder to check the OSR dimension against")
    s.add_argument("--out")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("run", help="full experiment grid")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("metrics", help="summarise a report.json")
    s.add_argument("report")
    s.add_argument("--json", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _resolve(args, parser)
    if args.command == "extract" and not (args.inputs or args.source_flag):
        parser.error("extract needs at least one listing")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
