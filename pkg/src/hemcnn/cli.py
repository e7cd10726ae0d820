"""Command-line entry point: ``hemcnn synth|preprocess|train|evaluate|stats|report``.

Every command exits 0 on success. On failure a single line
``hemcnn-error: <Kind>: <message>`` goes to stderr and the exit code is 1
(2 for usage errors, as argparse does).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import model as hm
from .dataio import Dataset, Stage, SyntheticConfig, generate_synthetic, load_dataset, save_dataset
from .nn import TrainSchedule
from .signal import MbllParams, PreprocessConfig, preprocess

log = logging.getLogger("hemcnn")

ERROR_PREFIX = "hemcnn-error"


class ConfigError(ValueError):
    pass


def _build(cls, d, where: str):
    """Instantiate a frozen config dataclass from a dict, rejecting unknown keys."""
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {k: tuple(map(tuple, v)) if k == "extinction" else tuple(v) if isinstance(v, list) else v
              for k, v in d.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class RunConfig:
    manifest: str | None = None
    synthetic: SyntheticConfig | None = None
    preprocess: PreprocessConfig = PreprocessConfig()
    mbll: MbllParams = MbllParams()
    methods: list = field(default_factory=lambda: list(ev.METHODS))
    schedule: TrainSchedule = TrainSchedule()
    augment: hm.AugmentConfig = hm.AugmentConfig()
    dropout: hm.DropoutConfig = hm.DropoutConfig()
    runs_per_subject: int = 10
    train_fraction: float = 0.55
    root_seed: int | None = None
    jobs: int = 1
    out: str | None = None
    synthetic_seed_set: bool = False

    KEYS = ("dataset", "preprocess", "mbll", "methods", "schedule", "augment", "dropout",
            "runs_per_subject", "train_fraction", "root_seed", "jobs", "out")

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(d) - set(cls.KEYS))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        cfg = cls()
        ds = d.get("dataset")
        if ds is not None:
            if not isinstance(ds, dict) or len(ds) != 1 or next(iter(ds)) not in ("manifest", "synthetic"):
                raise ConfigError("dataset must be {\"manifest\": PATH} or {\"synthetic\": {...}}")
            if "manifest" in ds:
                path = Path(ds["manifest"])
                cfg.manifest = str(path if path.is_absolute() or base_dir is None else base_dir / path)
            else:
                try:
                    cfg.synthetic = SyntheticConfig.from_dict(ds["synthetic"] or {})
                    cfg.synthetic_seed_set = "seed" in (ds["synthetic"] or {})
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"dataset.synthetic: {exc}") from exc
        cfg.preprocess = _build(PreprocessConfig, d.get("preprocess"), "preprocess")
        cfg.mbll = _build(MbllParams, d.get("mbll"), "mbll")
        cfg.schedule = _build(TrainSchedule, d.get("schedule"), "schedule")
        cfg.augment = _build(hm.AugmentConfig, d.get("augment"), "augment")
        cfg.dropout = _build(hm.DropoutConfig, d.get("dropout"), "dropout")
        if "methods" in d:
            cfg.methods = parse_methods(d["methods"])
        for key, typ in (("runs_per_subject", int), ("train_fraction", float), ("root_seed", int), ("jobs", int)):
            if key in d:
                v = d[key]
                if isinstance(v, bool) or not isinstance(v, (int, float)) or (typ is int and v != int(v)):
                    raise ConfigError(f"{key} must be a{'n integer' if typ is int else ' number'}")
                setattr(cfg, key, typ(v))
        if "out" in d:
            cfg.out = str(d["out"])
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc, path.parent)

    def eval_config(self) -> ev.EvalConfig:
        return ev.EvalConfig(self.runs_per_subject, self.train_fraction, self.schedule, self.augment,
                             self.dropout, self.preprocess.zscore_epsilon)


def parse_methods(value) -> list:
    if isinstance(value, str):
        value = list(ev.METHODS) if value.strip().lower() == "all" else [v.strip() for v in value.split(",") if v.strip()]
    methods = list(value)
    bad = [m for m in methods if m not in ev.METHODS]
    if bad or not methods:
        raise ConfigError(f"unknown method(s) {bad or '[]'}; choose from {', '.join(ev.METHODS)} or 'all'")
    if len(set(methods)) != len(methods):
        raise ConfigError("methods list contains duplicates")
    return methods


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    # flags win over the config file
    if getattr(args, "seed", None) is not None:
        cfg.root_seed = args.seed
    if getattr(args, "methods", None) is not None:
        cfg.methods = parse_methods(args.methods)
    if getattr(args, "jobs", None) is not None:
        cfg.jobs = args.jobs
    if getattr(args, "out", None) is not None:
        cfg.out = args.out
    return cfg


def _require_seed(cfg: RunConfig) -> int:
    if cfg.root_seed is None:
        raise ConfigError("no seed given; pass --seed INT or set root_seed in the config")
    return cfg.root_seed


def _require_out(cfg: RunConfig) -> Path:
    if not cfg.out:
        raise ConfigError("no output directory; pass --out DIR or set out in the config")
    return Path(cfg.out)


def _dataset(cfg: RunConfig, manifest: str | None = None) -> Dataset:
    manifest = manifest or cfg.manifest
    if manifest:
        return load_dataset(manifest)
    if cfg.synthetic is not None:
        return generate_synthetic(cfg.synthetic)
    raise ConfigError("no dataset; give a manifest or a dataset entry in the config")


def _preprocessed(ds: Dataset, cfg: RunConfig) -> Dataset:
    if ds.stage == Stage.PREPROCESSED:
        return ds
    return ds.map_trials(lambda t: preprocess(t, cfg.mbll, cfg.preprocess))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = _config(args)
    synth = cfg.synthetic or SyntheticConfig()
    if args.seed is not None:
        synth = dataclasses.replace(synth, seed=args.seed)
    elif not cfg.synthetic_seed_set:
        raise ConfigError("no seed given; pass --seed INT or set dataset.synthetic.seed in the config")
    out = _require_out(cfg)
    ds = generate_synthetic(synth)
    manifest = save_dataset(ds, out)
    (out / "synthetic_config.json").write_text(json.dumps(synth.to_dict(), indent=2, sort_keys=True) + "\n",
                                               encoding="utf-8")
    print(f"wrote {len(ds)} trials for {len(ds.subjects)} subjects to {manifest}")
    return 0


def cmd_preprocess(args) -> int:
    cfg = _config(args)
    out = _require_out(cfg)
    ds = load_dataset(args.manifest)
    if ds.stage == Stage.PREPROCESSED:
        raise ConfigError(f"{args.manifest}: dataset is already preprocessed")
    manifest = save_dataset(_preprocessed(ds, cfg), out)
    print(f"wrote {len(ds)} preprocessed trials to {manifest}")
    return 0


def cmd_train(args) -> int:
    """One training run of a CNN variant on every subject except ``--holdout``."""
    cfg = _config(args)
    seed = _require_seed(cfg)
    out = _require_out(cfg)
    method = args.method
    if method not in ev.CNN_METHODS:
        raise ConfigError(f"train supports {', '.join(ev.CNN_METHODS)}, got {method!r}")
    ds = _preprocessed(_dataset(cfg, args.manifest), cfg)
    if args.holdout is not None and args.holdout not in ds.subjects:
        raise ConfigError(f"unknown holdout subject {args.holdout!r}")
    pool = [t for s, ts in ds.subjects.items() if s != args.holdout for t in ts]
    ecfg = cfg.eval_config()
    rng = np.random.default_rng(np.random.SeedSequence([seed, ev.METHODS.index(method)]))
    train, val = ev.split_train_val(pool, ecfg.train_fraction, rng)
    pred, val_acc, trace = ev.train_one_run(method, train, val, ecfg, rng)
    out.mkdir(parents=True, exist_ok=True)
    pred.model.save(out / "model.json")
    run = {"method": method, "seed": seed, "holdout": args.holdout, "n_train": len(train), "n_val": len(val),
           "val_accuracy": val_acc, "loss_trace": trace}
    if args.holdout is not None:
        test = ds.subjects[args.holdout]
        run["test_accuracy"] = ev.accuracy(pred.predict(test), [t.hand for t in test])
    (out / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"{method}: validation accuracy {val_acc:.3f}"
          + (f", {args.holdout} test accuracy {run['test_accuracy']:.3f}" if "test_accuracy" in run else ""))
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    seed = _require_seed(cfg)
    out = _require_out(cfg)
    if cfg.jobs < 1:
        raise ConfigError("jobs must be >= 1")
    ds = _preprocessed(_dataset(cfg, getattr(args, "manifest", None)), cfg)
    results = ev.run_loso_many(ds, cfg.methods, cfg.eval_config(), seed, cfg.jobs)
    summary = ev.emit_report(ev.LosoReport(ds.subject_ids, results), out)
    for m in cfg.methods:
        med = summary["medians"][m]
        print(f"{m:8s} median {'nan' if med is None else f'{med:.3f}'}")
    print(f"wrote {out / 'summary.json'}")
    return 0


def cmd_stats(args) -> int:
    subjects, methods, table = ev.read_accuracies_csv(args.accuracies)
    if len(methods) < 2:
        raise ConfigError("statistics need at least 2 method columns")
    summary = ev.summarize(methods, table)
    summary["subjects"] = subjects
    if summary["statistics"] is None:
        raise ConfigError("some method has no finite accuracies")
    out = Path(args.out) if args.out else Path(args.accuracies).with_name("summary.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.exists():
        # keep fields only `evaluate` knows about (e.g. selected_runs)
        summary = {**json.loads(out.read_text(encoding="utf-8")), **summary}
    out.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    st = summary["statistics"]
    print(f"H = {st['H']:.4f}, p = {st['p']:.4g}, {len(st['pairwise'])} pairwise comparisons -> {out}")
    return 0


def cmd_report(args) -> int:
    """Text rendering of a results directory: per-subject grid, medians, significant pairs."""
    run_dir = Path(args.dir)
    subjects, methods, table = ev.read_accuracies_csv(run_dir / "accuracies.csv")
    summary_path = run_dir / "summary.json"
    summary = (json.loads(summary_path.read_text(encoding="utf-8")) if summary_path.exists()
               else ev.summarize(methods, table))
    width = max(8, *(len(m) for m in methods))
    lines = ["subject  " + " ".join(f"{m:>{width}s}" for m in methods)]
    for i, sid in enumerate(subjects):
        lines.append(f"{sid:8s} " + " ".join(f"{table[m][i]:>{width}.3f}" for m in methods))
    meds = summary["medians"]
    lines.append("median   " + " ".join(
        f"{'nan' if meds[m] is None else format(meds[m], '.3f'):>{width}s}" for m in methods))
    st = summary.get("statistics")
    if st:
        lines.append(f"Kruskal-Wallis H = {st['H']:.4f}, p = {st['p']:.4g} (alpha {st['alpha']})")
        sig = [f"{c['a']} vs {c['b']}" for c in st["pairwise"] if c["significant"]]
        lines.append("significant pairs: " + (", ".join(sig) if sig else "none"))
    print("\n".join(lines))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hemcnn", description="HemCNN fNIRS hand-decoding experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, out=True):
        sp.add_argument("--config", help="RunConfig JSON file")
        if seed:
            sp.add_argument("--seed", type=int, help="root seed (overrides the config)")
        if out:
            sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("preprocess", help="MBLL, low-pass, detrend and resample a dataset")
    sp.add_argument("manifest")
    common(sp, seed=False)
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("train", help="train one CNN model")
    sp.add_argument("--manifest", help="dataset manifest (overrides the config)")
    sp.add_argument("--method", default="HemCNN", help="HemCNN, HemCNNo or HemCNNr")
    sp.add_argument("--holdout", help="subject left out of training and used for testing")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="leave-one-subject-out evaluation")
    sp.add_argument("--manifest", help="dataset manifest (overrides the config)")
    sp.add_argument("--methods", help="comma-separated method names or 'all'")
    sp.add_argument("--jobs", type=int, help="worker processes (results do not depend on it)")
    common(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("stats", help="Kruskal-Wallis and pairwise tests on an accuracies.csv")
    sp.add_argument("accuracies")
    sp.add_argument("--out", help="summary.json path (default: next to the input)")
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("report", help="print a results directory as a table")
    sp.add_argument("dir")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, RuntimeError, OSError) as exc:
        msg = " ".join(str(exc).split())
        print(f"{ERROR_PREFIX}: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
