"""Leave-one-subject-out evaluation with best-of-N validation model selection."""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import model as hm
from .dataio import Dataset, Hand, Stage
from .nn import TrainSchedule
from .stats import kruskal_wallis, pairwise_posthoc

log = logging.getLogger(__name__)

CNN_METHODS = {"HemCNN": hm.Variant.BOTH, "HemCNNo": hm.Variant.HBO_ONLY, "HemCNNr": hm.Variant.HBR_ONLY}
FEATURE_METHODS = ("GLM", "GLMhPCA", "DeltaHb", "LI")
METHODS = tuple(CNN_METHODS) + FEATURE_METHODS


class EvaluationError(RuntimeError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    runs_per_subject: int = 10
    train_fraction: float = 0.55
    schedule: TrainSchedule = TrainSchedule()
    augment: hm.AugmentConfig = hm.AugmentConfig()
    dropout: hm.DropoutConfig = hm.DropoutConfig()
    zscore_epsilon: float = 1e-8

    def __post_init__(self):
        if self.runs_per_subject < 1:
            raise ValueError("runs_per_subject must be >= 1")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError("train_fraction must lie in (0, 1]")


def accuracy(preds, labels) -> float:
    preds = np.asarray([int(Hand.parse(p)) for p in preds])
    labels = np.asarray([int(Hand.parse(v)) for v in labels])
    if preds.size == 0 or preds.size != labels.size:
        raise ValueError("accuracy needs equal-length, non-empty inputs")
    return float(np.mean(preds == labels))


def split_train_val(pool, fraction: float, rng: np.random.Generator, max_attempts: int = 100):
    """Random trial-level split; both hands must appear in both parts."""
    pool = list(pool)
    if not pool:
        raise ValueError("empty pool")
    n_train = int(math.floor(fraction * len(pool) + 0.5))
    for _ in range(max_attempts):
        order = rng.permutation(len(pool))
        train = [pool[i] for i in order[:n_train]]
        val = [pool[i] for i in order[n_train:]]
        if {t.hand for t in train} == {Hand.LEFT, Hand.RIGHT} == {t.hand for t in val}:
            return train, val
    raise EvaluationError(
        f"could not draw a split of {len(pool)} trials ({n_train} train) with both hands in train and validation"
    )


def shuffle_labels(dataset: Dataset, rng: np.random.Generator) -> Dataset:
    """Permute hand labels within each subject (label-shuffled control)."""
    subjects = {}
    for sid, trials in dataset.subjects.items():
        hands = rng.permutation([t.hand for t in trials])
        subjects[sid] = [t.with_data(t.data, hand=Hand(int(h))) for t, h in zip(trials, hands)]
    return Dataset(subjects, dataset.layout, dataset.fs_native)


# ---------------------------------------------------------------------------
# single run


@dataclass
class RunRecord:
    method: str
    subject: str
    run: int
    seed: list
    val_accuracy: float | None
    model: dict | None = None
    loss_trace: list = field(default_factory=list)
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "method": self.method, "subject": self.subject, "run": self.run, "seed": self.seed,
            "val_accuracy": self.val_accuracy, "loss_trace": self.loss_trace, "model": self.model,
            "error": self.error,
        }


def _features(method: str, trials) -> np.ndarray:
    fn = {"GLM": bl.glm_features, "GLMhPCA": bl.glm_features, "DeltaHb": bl.delta_hb_features, "LI": bl.li_features}[method]
    return np.vstack([fn(t).values for t in trials])


def _labels(trials) -> np.ndarray:
    return np.array([int(t.hand) for t in trials], dtype=np.intp)


def _cnn_inputs(trials, variant: hm.Variant, cfg: EvalConfig) -> np.ndarray:
    X = np.stack([hm.model_input(t, 0.0, cfg.augment.crop_len_s, 1.0, cfg.zscore_epsilon) for t in trials])
    return hm.select_rows(X, variant)


class _Predictor:
    """Trained run output: something that maps trials to hand indices."""

    def __init__(self, method, cfg, model=None, tree=None, proj=None):
        self.method, self.cfg, self.model, self.tree, self.proj = method, cfg, model, tree, proj

    def predict(self, trials, feats=None) -> np.ndarray:
        if self.model is not None:
            return hm.predict(self.model, _cnn_inputs(trials, self.model.variant, self.cfg))
        X = _features(self.method, trials) if feats is None else feats
        if self.proj is not None:
            X = np.vstack([bl.hpca_apply(self.proj, row).values for row in X])
        return bl.tree_predict_many(self.tree, X)

    def describe(self) -> dict:
        if self.model is not None:
            return self.model.to_dict()["filters"]
        return {"tree_depth": self.tree.depth, "tree_leaves": self.tree.n_leaves}


def run_seed(root_seed: int, method: str, subject_index: int, run: int) -> list:
    return [int(root_seed), METHODS.index(method), int(subject_index), int(run)]


def train_one_run(method: str, train, val, cfg: EvalConfig, rng: np.random.Generator, feature_cache=None):
    """Train on ``train``; return (predictor, validation accuracy, loss trace)."""
    if method in CNN_METHODS:
        X, y = hm.augment(train, cfg.augment, rng, cfg.zscore_epsilon)
        model = hm.build(CNN_METHODS[method], rng)
        result = hm.train(model, X, y, cfg.schedule, cfg.dropout, rng)
        pred = _Predictor(method, cfg, model=result.model)
        val_acc = float(np.mean(pred.predict(val) == _labels(val)))
        return pred, val_acc, result.loss_trace

    def feats(trials):
        if feature_cache is None:
            return _features(method, trials)
        return np.vstack([feature_cache[t.trial_id] for t in trials])

    Xtr, Xval = feats(train), feats(val)
    proj = None
    if method == "GLMhPCA":
        proj = bl.hpca_fit(list(Xtr))
        Xtr = np.vstack([bl.hpca_apply(proj, row).values for row in Xtr])
    tree = bl.tree_fit(Xtr, _labels(train))
    pred = _Predictor(method, cfg, tree=tree, proj=proj)
    val_acc = float(np.mean(pred.predict(val, Xval) == _labels(val)))
    return pred, val_acc, []


# ---------------------------------------------------------------------------
# process-pool plumbing; a worker holds the dataset once instead of per task

_WORKER: dict = {}


def _init_worker(dataset: Dataset, cfg: EvalConfig):
    _WORKER.clear()
    _WORKER.update(dataset=dataset, cfg=cfg, features={})


def _feature_cache(method: str):
    if method in CNN_METHODS:
        return None
    key = "GLM" if method == "GLMhPCA" else method
    cache = _WORKER["features"]
    if key not in cache:
        trials = _WORKER["dataset"].trials
        X = _features(key, trials)
        cache[key] = {t.trial_id: x for t, x in zip(trials, X)}
    return cache[key]


def _task(method: str, subject_index: int, run: int, root_seed: int) -> tuple[RunRecord, list | None]:
    dataset: Dataset = _WORKER["dataset"]
    cfg: EvalConfig = _WORKER["cfg"]
    sid = dataset.subject_ids[subject_index]
    test = dataset.subjects[sid]
    pool = [t for s, ts in dataset.subjects.items() if s != sid for t in ts]
    seed = run_seed(root_seed, method, subject_index, run)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    try:
        train, val = split_train_val(pool, cfg.train_fraction, rng)
        test_ids = {t.trial_id for t in test}
        if test_ids & {t.trial_id for t in train + val}:
            raise EvaluationError(f"left-out subject {sid} leaked into training/validation")
        pred, val_acc, trace = train_one_run(method, train, val, cfg, rng, _feature_cache(method))
        test_preds = pred.predict(test).tolist()
        return RunRecord(method, sid, run, seed, val_acc, pred.describe(), trace), test_preds
    except Exception as exc:  # a failed run is recorded, not fatal
        log.warning("run %s/%s/%d failed: %s", method, sid, run, exc)
        return RunRecord(method, sid, run, seed, None, error=f"{type(exc).__name__}: {exc}"), None


# ---------------------------------------------------------------------------
# LOSO


@dataclass
class MethodResult:
    method: str
    accuracies: dict  # subject -> accuracy (nan when no run succeeded)
    selected_runs: dict  # subject -> run index
    runs: list


def _check_dataset(dataset: Dataset):
    if len(dataset.subjects) < 2:
        raise EvaluationError("LOSO needs at least 2 subjects")
    if dataset.stage != Stage.PREPROCESSED:
        raise EvaluationError(f"LOSO expects a preprocessed dataset, got stage {dataset.stage}")
    for sid, trials in dataset.subjects.items():
        if not trials:
            raise EvaluationError(f"subject {sid} has no test trials")


def run_loso_many(dataset: Dataset, methods, cfg: EvalConfig, root_seed: int, jobs: int = 1) -> dict:
    """LOSO for several methods; results are independent of ``jobs``."""
    _check_dataset(dataset)
    methods = list(methods)
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    tasks = [(m, s, r, root_seed) for m in methods for s in range(len(dataset.subjects))
             for r in range(cfg.runs_per_subject)]
    if jobs <= 1:
        _init_worker(dataset, cfg)
        outputs = [_task(*t) for t in tasks]
        _WORKER.clear()
    else:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(dataset, cfg)) as ex:
            outputs = list(ex.map(_task, *zip(*tasks), chunksize=max(1, len(tasks) // (4 * jobs))))
    by_key = {(t[0], t[1], t[2]): out for t, out in zip(tasks, outputs)}

    results = {}
    for m in methods:
        accs, selected, runs = {}, {}, []
        for s, sid in enumerate(dataset.subject_ids):
            recs = [by_key[(m, s, r)] for r in range(cfg.runs_per_subject)]
            runs.extend(rec for rec, _ in recs)
            ok = [(rec, preds) for rec, preds in recs if rec.error is None]
            if not ok:
                log.error("all runs failed for %s / %s; subject marked invalid", m, sid)
                accs[sid] = float("nan")
                continue
            # highest validation accuracy; ties -> lowest run index (max keeps the first)
            best_rec, best_preds = max(ok, key=lambda rp: rp[0].val_accuracy)
            selected[sid] = best_rec.run
            accs[sid] = accuracy(best_preds, [t.hand for t in dataset.subjects[sid]])
        results[m] = MethodResult(m, accs, selected, runs)
    return results


def run_loso(dataset: Dataset, method: str, cfg: EvalConfig, root_seed: int, jobs: int = 1) -> MethodResult:
    return run_loso_many(dataset, [method], cfg, root_seed, jobs)[method]


# ---------------------------------------------------------------------------
# reports


@dataclass
class LosoReport:
    subjects: list
    results: dict  # method -> MethodResult

    @property
    def methods(self) -> list:
        return list(self.results)

    def accuracy_table(self) -> dict:
        return {m: [r.accuracies[s] for s in self.subjects] for m, r in self.results.items()}

    def medians(self) -> dict:
        return {m: _nanmedian(v) for m, v in self.accuracy_table().items()}


def _nanmedian(values) -> float | None:
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    return float(np.median(v)) if v.size else None


def summarize(methods, table: dict, alpha: float = 0.05) -> dict:
    """Medians plus Kruskal-Wallis / pairwise statistics over per-subject accuracies."""
    summary = {"methods": list(methods), "medians": {m: _nanmedian(table[m]) for m in methods}}
    groups = [np.asarray(table[m], dtype=np.float64) for m in methods]
    groups = [g[np.isfinite(g)] for g in groups]
    if len(groups) >= 2 and all(g.size for g in groups):
        h, p = kruskal_wallis(groups)
        matrix = pairwise_posthoc(groups, alpha)
        pairs = []
        for i in range(len(methods)):
            for j in range(i + 1, len(methods)):
                c = matrix[i][j]
                pairs.append({"a": methods[i], "b": methods[j], "difference": c.difference,
                              "critical_value": c.critical_value, "significant": c.significant})
        summary["statistics"] = {"test": "kruskal-wallis", "H": h, "p": p, "alpha": alpha, "pairwise": pairs}
    else:
        summary["statistics"] = None
    return summary


def _fmt(x) -> str:
    return "nan" if x is None or not np.isfinite(x) else format(float(x), ".17g")


def write_accuracies_csv(path, subjects, methods, table: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject"] + list(methods))
        for i, sid in enumerate(subjects):
            w.writerow([sid] + [_fmt(table[m][i]) for m in methods])


def read_accuracies_csv(path) -> tuple[list, list, dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["subject"]:
        raise ValueError(f"{path}: expected a header starting with 'subject'")
    methods = rows[0][1:]
    subjects = [r[0] for r in rows[1:]]
    table = {m: [float(r[i + 1]) for r in rows[1:]] for i, m in enumerate(methods)}
    return subjects, methods, table


def emit_report(report: LosoReport, out_dir) -> dict:
    """Write accuracies.csv, summary.json and runs.jsonl; returns the summary."""
    if not report.results or not report.subjects:
        raise ValueError("empty report; nothing written")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = report.accuracy_table()
    write_accuracies_csv(out / "accuracies.csv", report.subjects, report.methods, table)
    summary = summarize(report.methods, table)
    summary["subjects"] = list(report.subjects)
    summary["selected_runs"] = {m: r.selected_runs for m, r in report.results.items()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with open(out / "runs.jsonl", "w", encoding="utf-8") as fh:
        for r in report.results.values():
            for rec in r.runs:
                fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    return summary
