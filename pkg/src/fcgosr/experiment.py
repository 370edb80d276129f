"""Open-set experiment grid: splits x (pre-training transform, fine-tuning loss, threshold)."""

from __future__ import annotations

import csv
import json
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .graph import Fcg, read_corpus, to_adjacency
from .metrics import SplitSpec, auc_at_fpr, f1_report, make_splits
from .osr import UNKNOWN, classify_batch, fit_class_stats, manual_threshold, outlier_scores
from .pipeline import FinetuneConfig, NetworkConfig, PretrainConfig, embed, finetune, pretrain_dtae
from .synth import SynthConfig, synth_corpus

log = logging.getLogger(__name__)

PRETRAIN_KINDS = ("none", "node_dropping", "subgraph_sampling", "fcg_shift", "fcg_random")
LOSS_ALIASES = {"ce": "cross_entropy", "cross_entropy": "cross_entropy", "triplet": "triplet"}
SHORT_LOSS = {"cross_entropy": "ce", "triplet": "triplet"}
METRICS = ("auc_full", "auc_at_10", "f1_known", "f1_unknown", "f1_overall")


@dataclass
class ExperimentConfig:
    corpus: dict = field(default_factory=lambda: {"synth": {}})
    pretrain_kinds: list[str] = field(default_factory=lambda: list(PRETRAIN_KINDS))
    losses: list[str] = field(default_factory=lambda: ["ce", "triplet"])
    thresholds: list[str] = field(default_factory=lambda: ["statistical", "manual"])
    known_count: int = 6
    groups: int = 3
    runs_per_group: int = 10
    test_fraction: float = 0.3
    percentile: float = 99.0
    seed: int = 0
    network: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=dict)
    artifacts: bool = True

    def __post_init__(self):
        bad = [k for k in self.pretrain_kinds if k not in PRETRAIN_KINDS]
        if bad:
            raise ValueError(f"unknown pre-training kinds {bad}")
        bad = [l for l in self.losses if l not in LOSS_ALIASES]
        if bad:
            raise ValueError(f"unknown losses {bad}")
        bad = [t for t in self.thresholds if t not in ("statistical", "manual")]
        if bad:
            raise ValueError(f"unknown threshold modes {bad}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        grid = d.pop("grid", {})
        splits = d.pop("splits", {})
        d.pop("output_dir", None)
        for src, dst in (("pretrain", "pretrain_kinds"), ("loss", "losses"), ("threshold", "thresholds")):
            if src in grid:
                d[dst] = grid[src]
        d.update(splits)
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def method_name(pretrain: str, loss: str, threshold: str) -> str:
    return f"{pretrain}-{SHORT_LOSS[LOSS_ALIASES[loss]]}-{threshold}"


def load_corpus(spec: dict, base_dir: Path | None = None) -> list[Fcg]:
    if "path" in spec:
        path = Path(spec["path"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return read_corpus(path)
    return synth_corpus(SynthConfig(**spec.get("synth", {})))


def class_index(corpus: list[Fcg]) -> tuple[np.ndarray, list[str]]:
    """Integer class ids for the corpus labels (numeric labels keep their value order)."""
    names = sorted({g.label for g in corpus if g.label is not None},
                   key=lambda s: (0, int(s), "") if s.lstrip("-").isdigit() else (1, 0, s))
    if len(names) != len({g.label for g in corpus}):
        raise ValueError("every corpus graph needs a label")
    index = {n: i for i, n in enumerate(names)}
    return np.array([index[g.label] for g in corpus]), names


def split_indices(labels: np.ndarray, split: SplitSpec, test_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-class train/test partition; unknown classes contribute test samples only."""
    rng = np.random.default_rng(np.random.SeedSequence([split.seed, 0x7E5]))
    train, test = [], []
    for c in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_test = max(1, int(round(test_fraction * len(idx))))
        test.extend(idx[:n_test].tolist())
        if c in split.known:
            train.extend(idx[n_test:].tolist())
    return np.array(sorted(train)), np.array(sorted(test))


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def run_split(cfg: ExperimentConfig, tensors, labels: np.ndarray, split: SplitSpec,
              out_dir: Path | None) -> list[dict]:
    """Train and evaluate every grid cell on one split; returns one row per method."""
    train, test = split_indices(labels, split, cfg.test_fraction)
    network = NetworkConfig(**{"size": tensors[0].size, **cfg.network})
    known = list(split.known)
    x_train = [tensors[i] for i in train]
    y_train = labels[train]
    x_test = [tensors[i] for i in test]
    truth = np.where(np.isin(labels[test], known), labels[test], UNKNOWN)
    is_unknown = truth == UNKNOWN
    tag = f"g{split.group}r{split.run}"
    rows = []
    for kind in cfg.pretrain_kinds:
        base_row = {"group": split.group, "run": split.run, "seed": split.seed, "pretrain": kind}
        try:
            model = None
            if kind != "none":
                pcfg = PretrainConfig(**{**cfg.pretrain, "kinds": [kind], "seed": split.seed})
                model = pretrain_dtae(x_train, pcfg, network, labels=y_train, known=known)
        except Exception as exc:
            log.exception("pre-training failed for %s %s", tag, kind)
            rows += [dict(base_row, loss=SHORT_LOSS[LOSS_ALIASES[l]], threshold=t,
                          method=method_name(kind, l, t), error=repr(exc))
                     for l in cfg.losses for t in cfg.thresholds]
            continue
        for loss in cfg.losses:
            try:
                fcfg = FinetuneConfig(**{**cfg.finetune, "loss": LOSS_ALIASES[loss], "seed": split.seed})
                tuned = finetune(model, x_train, y_train, fcfg, known=known, network=network)
                train_reps = embed(tuned, x_train, y_train, [f"train:{i}" for i in train])
                test_reps = embed(tuned, x_test, truth, [f"test:{i}" for i in test])
                osr = fit_class_stats(train_reps.z, train_reps.labels)
                train_scores = outlier_scores(osr, train_reps.z)
                scores = outlier_scores(osr, test_reps.z)
                auc_full = auc_at_fpr(scores, is_unknown, 1.0)
                auc_10 = auc_at_fpr(scores, is_unknown, 0.1)
                thr = manual_threshold(train_scores, cfg.percentile)
            except Exception as exc:
                log.error("run %s %s/%s failed: %s", tag, kind, loss, traceback.format_exc())
                rows += [dict(base_row, loss=SHORT_LOSS[LOSS_ALIASES[loss]], threshold=t,
                              method=method_name(kind, loss, t), error=repr(exc))
                         for t in cfg.thresholds]
                continue
            for mode in cfg.thresholds:
                active = osr.with_threshold(mode, thr if mode == "manual" else None)
                preds = classify_batch(active, test_reps.z)
                rep = f1_report(preds, truth, known)
                name = method_name(kind, loss, mode)
                rows.append(dict(base_row, loss=SHORT_LOSS[LOSS_ALIASES[loss]], threshold=mode,
                                 method=name, threshold_value=active.threshold,
                                 auc_full=auc_full, auc_at_10=auc_10, f1_known=rep.f1_known,
                                 f1_unknown=rep.f1_unknown, f1_overall=rep.f1_overall,
                                 n_test=int(len(test)), n_unknown=int(is_unknown.sum()), error=""))
                if out_dir is not None and cfg.artifacts:
                    _write_json(out_dir / f"confusion_{tag}_{name}.json", rep.to_dict())
                    with open(out_dir / f"scores_{tag}_{name}.csv", "w", newline="", encoding="utf-8") as fh:
                        w = csv.writer(fh)
                        w.writerow(["id", "truth", "is_unknown", "score", "prediction"])
                        for i, t, u, s, p in zip(test_reps.ids, truth, is_unknown, scores, preds):
                            w.writerow([i, int(t), int(u), repr(float(s)), int(p)])
            if out_dir is not None and cfg.artifacts:
                reps_name = f"{kind}-{SHORT_LOSS[LOSS_ALIASES[loss]]}"
                with open(out_dir / f"reps_{tag}_{reps_name}.jsonl", "w", encoding="utf-8") as fh:
                    for rs in (train_reps, test_reps):
                        for rec in rs.to_records():
                            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return rows


def _summary(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0,
            "n": int(len(arr))}


def aggregate(rows: list[dict]) -> dict:
    """Pooled and per-group mean/std per method, plus statistical-minus-manual gaps."""
    rows = sorted((r for r in rows if not r.get("error")),
                  key=lambda r: (r["group"], r["run"], r["method"]))
    methods: dict[str, dict] = {}
    per_group: dict[str, dict] = {}
    for name in sorted({r["method"] for r in rows}):
        mine = [r for r in rows if r["method"] == name]
        methods[name] = {m: _summary([r[m] for r in mine]) for m in METRICS}
        groups = sorted({r["group"] for r in mine})
        per_group[name] = {
            str(g): {m: _summary([r[m] for r in mine if r["group"] == g]) for m in METRICS}
            for g in groups
        }
        for m in METRICS:
            methods[name][m]["mean_of_group_means"] = float(np.mean(
                [per_group[name][str(g)][m]["mean"] for g in groups]))
    gaps = {}
    for name in methods:
        if name.endswith("-statistical"):
            manual = name[:-len("statistical")] + "manual"
            if manual in methods:
                gaps[name[:-len("-statistical")]] = (methods[name]["f1_overall"]["mean"]
                                                     - methods[manual]["f1_overall"]["mean"])
    return {"methods": methods, "per_group": per_group, "threshold_gap_f1_overall": gaps}


RUN_COLUMNS = ["group", "run", "seed", "pretrain", "loss", "threshold", "method", "threshold_value",
               *METRICS, "n_test", "n_unknown", "error"]


def _job(args):
    cfg, tensors, labels, split, out_dir = args
    return run_split(cfg, tensors, labels, split, out_dir)


def run_experiment(cfg: ExperimentConfig, out_dir=None, jobs: int = 1,
                   base_dir: Path | None = None) -> dict:
    corpus = load_corpus(cfg.corpus, base_dir)
    labels, names = class_index(corpus)
    size = int(cfg.network.get("size", 67))
    tensors = [to_adjacency(g, size, "truncate") for g in corpus]
    splits = make_splits(range(len(names)), cfg.known_count, cfg.groups, cfg.runs_per_group, cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    tasks = [(cfg, tensors, labels, s, out) for s in splits]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_job, tasks))
    else:
        results = [_job(t) for t in tasks]
    rows = sorted((r for rs in results for r in rs), key=lambda r: (r["group"], r["run"], r["method"]))
    report = {
        "config": cfg.to_dict(),
        "class_names": names,
        "splits": [s.to_dict() for s in splits],
        **aggregate(rows),
        "errors": [{k: r[k] for k in ("group", "run", "method", "error")} for r in rows if r.get("error")],
    }
    if out is not None:
        _write_json(out / "report.json", report)
        with open(out / "runs.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=RUN_COLUMNS, extrasaction="ignore")
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    report["rows"] = rows
    return report


def load_config(path) -> tuple[ExperimentConfig, str | None]:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    return ExperimentConfig.from_dict(d), d.get("output_dir")


def default_jobs() -> int:
    return max(1, (os.cpu_count() or 1))
