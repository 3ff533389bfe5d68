"""Command-line entry point: ``tier <subcommand> ...``.

Every option can also come from a JSON config file (``--config``); explicit
flags win over the file, which wins over built-in defaults. The resolved
options are written to ``<out>/config.json`` before any work starts.

Exit codes: 0 success, 2 configuration error, 3 data-integrity error,
4 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, IntegrityError, NonFiniteError, UndefinedAUCError
from .metrics import bootstrap_auc, mcc_f1, similarity_curves, t_test, threshold_select, mean_row_entropy
from .synth_data import (DEFAULT_COUNTS, SPLITS, generate_dataset, manifest_summary, read_dataset,
                         write_dataset)
from .trainer import TrainConfig, TrainingAborted, default_workers, grid_values, sweep, train
from .zeroshot import (build_query_sets, default_registry, heatmap, load_registry, save_registry,
                       score_samples, truth_for, write_heatmap)

EXIT_CONFIG, EXIT_INTEGRITY, EXIT_NUMERIC = 2, 3, 4
DATASET_FILE = "dataset.tier"
CHECKPOINT_FILE = "checkpoint.ckpt"
ECHO_ONLY = ("command", "run_name")  # written to config.json, ignored when read back

log = logging.getLogger("tier")

DEFAULTS = {
    "gen-data": {"seed": 0, "out": None, "count_train": DEFAULT_COUNTS["train"], "count_val": DEFAULT_COUNTS["val"],
                 "count_test": DEFAULT_COUNTS["test"], "classes": 12, "force": False},
    "train": {"dataset": None, "out": None, "lambda_p": 0.2, "lambda_t": 0.1, "epochs": 30, "seed": 0,
              "learning_rate": 1e-4, "batch_size": 32, "checkpoint_every": 0, "penalty_average": "sample",
              "cls_in_penalty": True, "resume": None},
    "sweep": {"dataset": None, "out": None, "grid_min": 0.0, "grid_max": 0.25, "grid_step": 0.05, "epochs": 1,
              "seed": 0, "learning_rate": 1e-4, "batch_size": 32, "queries": None, "workers": None},
    "zeroshot": {"checkpoint": None, "dataset": None, "queries": None, "dataset_split": "test", "out": None},
    "eval": {"scores": None, "names": None, "threshold_scores": None, "bootstrap": 1000, "seed": 0, "out": None,
             "objective": "mcc"},
    "heatmap": {"checkpoint": None, "dataset": None, "sample_id": None, "label": None, "queries": None,
                "out": None},
    "curves": {"checkpoint": None, "dataset": None, "dataset_split": "val", "out": None},
}
REQUIRED = {
    "gen-data": ("out",),
    "train": ("dataset", "out"),
    "sweep": ("dataset", "out"),
    "zeroshot": ("checkpoint", "dataset", "out"),
    "eval": ("scores", "out"),
    "heatmap": ("checkpoint", "dataset", "sample_id", "label", "out"),
    "curves": ("checkpoint", "dataset", "out"),
}


def _bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes"):
        return True
    if s.lower() in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tier", description="Entropy-regularized CLIP training on synthetic data.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_, argument_default=None)
        p.add_argument("--config", help="JSON file of option values")
        p.add_argument("--out", help="output directory")
        return p

    p = add("gen-data", "generate a synthetic dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--count-train", type=int)
    p.add_argument("--count-val", type=int)
    p.add_argument("--count-test", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--force", action="store_const", const=True)

    p = add("train", "train one model")
    p.add_argument("--dataset")
    p.add_argument("--lambda-p", type=float)
    p.add_argument("--lambda-t", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--learning-rate", "--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--penalty-average", choices=("sample", "flat"))
    p.add_argument("--cls-in-penalty", type=_bool)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = add("sweep", "grid search over the penalty weights")
    p.add_argument("--dataset")
    p.add_argument("--grid-min", type=float)
    p.add_argument("--grid-max", type=float)
    p.add_argument("--grid-step", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--learning-rate", "--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--queries")

    p = add("zeroshot", "score a dataset split with zero-shot queries")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--queries")
    p.add_argument("--dataset-split", choices=SPLITS)

    p = add("eval", "bootstrap AUC, MCC/F1 and Welch comparison of score files")
    p.add_argument("--scores", nargs="+")
    p.add_argument("--names", nargs="+")
    p.add_argument("--threshold-scores", nargs="+", help="score files (one per model) to choose thresholds on")
    p.add_argument("--bootstrap", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--objective", choices=("mcc", "f1"))

    p = add("heatmap", "patch-level zero-shot heatmap for one sample")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--sample-id", type=int)
    p.add_argument("--label")
    p.add_argument("--queries")

    p = add("curves", "sorted patch-to-[CLS] similarity curves")
    p.add_argument("--checkpoint", nargs="+")
    p.add_argument("--dataset")
    p.add_argument("--dataset-split", choices=SPLITS)

    for p in sub.choices.values():
        p.add_argument("--workers", type=int, help="cap on worker processes (default: available cores)")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge flags > config file > defaults for the chosen subcommand."""
    defaults = dict(DEFAULTS[args.command])
    file_cfg = {}
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        file_cfg = {k.replace("-", "_"): v for k, v in file_cfg.items() if k not in ECHO_ONLY}
        unknown = set(file_cfg) - set(defaults) - {"workers"}
        if unknown:
            raise ConfigError(f"{args.config}: unknown options {sorted(unknown)}")
    resolved = {"command": args.command}
    for key in sorted(set(defaults) | {"workers"}):
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
        elif key in file_cfg:
            resolved[key] = file_cfg[key]
        else:
            resolved[key] = defaults.get(key)
    if resolved["workers"] is None:
        resolved["workers"] = default_workers()
    missing = [k for k in REQUIRED[args.command] if resolved.get(k) is None]
    if missing:
        raise ConfigError(f"missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return resolved


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(cfg: dict, out: Path) -> None:
    cfg = {k: v for k, v in cfg.items() if k != "workers"}  # worker count never changes outputs
    (out / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _dataset_path(p) -> Path:
    p = Path(p)
    return p / DATASET_FILE if p.is_dir() else p


def _checkpoint_path(p) -> Path:
    p = Path(p)
    return p / CHECKPOINT_FILE if p.is_dir() else p


def _require_file(p: Path, what: str) -> Path:
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _load_dataset(p):
    return read_dataset(_require_file(_dataset_path(p), "dataset"))


def _load_checkpoint(p, dims=None):
    return load_checkpoint(_require_file(_checkpoint_path(p), "checkpoint"), dims)


def _registry(cfg: dict, catalog) -> dict:
    return load_registry(_require_file(Path(cfg["queries"]), "query registry")) if cfg.get("queries") \
        else default_registry(catalog)


# ----------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: dict) -> None:
    out = _out_dir(cfg)
    target = out / DATASET_FILE
    if target.exists() and not cfg["force"]:
        raise ConfigError(f"{target} already exists; pass --force to overwrite")
    _echo_config(cfg, out)
    counts = {"train": cfg["count_train"], "val": cfg["count_val"], "test": cfg["count_test"]}
    ds = generate_dataset(cfg["seed"], counts, n_classes=cfg["classes"])
    write_dataset(ds, target)
    (out / "manifest.json").write_text(json.dumps(ds.manifest.to_dict(), indent=1, sort_keys=True) + "\n",
                                       encoding="utf-8")
    print(manifest_summary(ds.manifest))


def _write_history(history: list[dict], path: Path) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "clip", "patch_pen", "token_pen", "total"])
        for h in history:
            w.writerow([h["epoch"], repr(h["clip"]), repr(h["patch_pen"]), repr(h["token_pen"]), repr(h["total"])])


def cmd_train(cfg: dict) -> None:
    out = _out_dir(cfg)
    tc = TrainConfig(lambda_p=cfg["lambda_p"], lambda_t=cfg["lambda_t"], learning_rate=cfg["learning_rate"],
                     batch_size=cfg["batch_size"], epochs=cfg["epochs"], seed=cfg["seed"],
                     dataset_path=str(cfg["dataset"]), checkpoint_every=cfg["checkpoint_every"],
                     penalty_average=cfg["penalty_average"], cls_in_penalty=cfg["cls_in_penalty"])
    cfg = dict(cfg, run_name=tc.run_name)
    _echo_config(cfg, out)
    ds = _load_dataset(cfg["dataset"])
    resume = _load_checkpoint(cfg["resume"], ds.manifest.dims) if cfg["resume"] else None
    print(f"run: {tc.run_name} (lambda_p={tc.lambda_p}, lambda_t={tc.lambda_t})")
    result = train(tc, ds, resume=resume, checkpoint_dir=out)
    save_checkpoint(result.checkpoint, out / CHECKPOINT_FILE)
    _write_history(result.history, out / "history.csv")
    if result.history:
        last = result.history[-1]
        print(f"{tc.run_name}: epoch {last['epoch']} total={last['total']:.6f} clip={last['clip']:.6f}")


def cmd_sweep(cfg: dict) -> None:
    out = _out_dir(cfg)
    _echo_config(cfg, out)
    ds = _load_dataset(cfg["dataset"])
    grid = grid_values(cfg["grid_min"], cfg["grid_max"], cfg["grid_step"])
    base = TrainConfig(learning_rate=cfg["learning_rate"], batch_size=cfg["batch_size"], seed=cfg["seed"],
                       dataset_path=str(cfg["dataset"]))
    registry = _registry(cfg, ds.catalog)
    result = sweep(grid, grid, ds, base, epochs=cfg["epochs"], registry=registry, workers=cfg["workers"])
    (out / "sweep.csv").write_text(result.to_csv(), encoding="utf-8")
    line = result.best_line()
    (out / "best.txt").write_text(line + "\n", encoding="utf-8")
    for (i, j), err in sorted(result.errors.items()):
        print(f"cell lambda_p={grid[i]:.2f} lambda_t={grid[j]:.2f} failed: {err}", file=sys.stderr)
    print(line)


def cmd_zeroshot(cfg: dict) -> None:
    out = _out_dir(cfg)
    _echo_config(cfg, out)
    ds = _load_dataset(cfg["dataset"])
    ckpt = _load_checkpoint(cfg["checkpoint"], ds.manifest.dims)
    registry = _registry(cfg, ds.catalog)
    save_registry(registry, out / "queries.json")
    samples = ds.split(cfg["dataset_split"])
    scores = score_samples(samples, build_query_sets(registry, ckpt.params), ckpt.params)
    with (out / "scores.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "label", "score", "truth"])
        for label, s in scores.items():
            truth = truth_for(samples, ds.catalog, label)
            for sample, v, y in zip(samples, s, truth):
                w.writerow([sample.sample_id, label, repr(float(v)), int(y)])
    print(f"scored {len(samples)} {cfg['dataset_split']} samples for {len(scores)} labels")


def read_scores(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """label -> (scores, truth) from a zeroshot scores CSV."""
    path = _require_file(Path(path), "scores file")
    by_label: dict[str, tuple[list, list]] = {}
    with path.open(newline="") as fh:
        for row in csv.DictReader(fh):
            s, y = by_label.setdefault(row["label"], ([], []))
            s.append(float(row["score"]))
            y.append(int(row["truth"]))
    return {k: (np.array(s), np.array(y)) for k, (s, y) in by_label.items()}


def cmd_eval(cfg: dict) -> None:
    out = _out_dir(cfg)
    _echo_config(cfg, out)
    files = cfg["scores"]
    names = cfg["names"] or [Path(f).parent.name or f"model{i}" for i, f in enumerate(files)]
    if len(names) != len(files) or len(set(names)) != len(names):
        raise ConfigError("--names must give one distinct name per scores file")
    tfiles = cfg["threshold_scores"] or files
    if len(tfiles) != len(files):
        raise ConfigError("--threshold-scores needs one file per scores file")
    data = [read_scores(f) for f in files]
    tdata = [read_scores(f) for f in tfiles]
    labels = list(data[0])
    report: dict = {"models": {}, "comparisons": []}
    reps: dict[str, dict[str, np.ndarray]] = {}
    for name, d, td in zip(names, data, tdata):
        per = {}
        reps[name] = {}
        for label in labels:
            if label not in d:
                raise ConfigError(f"label {label!r} missing from scores of {name}")
            s, y = d[label]
            try:
                boot = bootstrap_auc(s, y, cfg["bootstrap"], cfg["seed"])
                thr = threshold_select(*td[label], objective=cfg["objective"])
            except UndefinedAUCError as exc:
                raise UndefinedAUCError(f"{name}/{label}: {exc}") from exc
            mcc, f1 = mcc_f1(s >= thr, y)
            reps[name][label] = boot.replicates
            per[label] = {"auc_mean": boot.mean, "auc_std": boot.std, "mcc": mcc, "f1": f1, "threshold": thr}
        report["models"][name] = per
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            for label in labels:
                c = t_test(reps[names[i]][label], reps[names[j]][label], names[i], names[j])
                report["comparisons"].append(dict(c.to_dict(), label=label))
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    with (out / "auc_table.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model"] + labels + ["average"])
        for name in names:
            means = [report["models"][name][lb]["auc_mean"] for lb in labels]
            w.writerow([name] + [f"{m:.4f}" for m in means] + [f"{np.mean(means):.4f}"])
    with (out / "comparison.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model_a", "model_b", "label", "mean_diff", "t_statistic", "p_value", "winner"])
        for c in report["comparisons"]:
            w.writerow([c["model_a"], c["model_b"], c["label"], repr(c["mean_diff"]), repr(c["t"]), repr(c["p"]),
                        c["winner"]])
    for name in names:
        means = [report["models"][name][lb]["auc_mean"] for lb in labels]
        print(f"{name}: mean AUC {np.mean(means):.4f} over {len(labels)} labels")


def cmd_heatmap(cfg: dict) -> None:
    out = _out_dir(cfg)
    _echo_config(cfg, out)
    ds = _load_dataset(cfg["dataset"])
    ckpt = _load_checkpoint(cfg["checkpoint"], ds.manifest.dims)
    registry = _registry(cfg, ds.catalog)
    if cfg["label"] not in registry:
        raise ConfigError(f"label {cfg['label']!r} not in the query registry")
    if not 0 <= cfg["sample_id"] < len(ds.samples):
        raise ConfigError(f"sample id {cfg['sample_id']} out of range")
    sample = ds.samples[cfg["sample_id"]]
    qs = build_query_sets({cfg["label"]: registry[cfg["label"]]}, ckpt.params)[cfg["label"]]
    hm = heatmap(sample.pixels, qs, ckpt.params, source=f"sample {sample.sample_id}")
    ppm, csv_path = write_heatmap(hm, out, ds.manifest.dims.patch, stem=f"heatmap_{sample.sample_id}_{cfg['label']}")
    print(f"wrote {ppm} and {csv_path}")


def _write_curve(path: Path, mean: np.ndarray, std: np.ndarray) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "mean", "std"])
        for r, (m, s) in enumerate(zip(mean, std), start=1):
            w.writerow([r, repr(float(m)), repr(float(s))])


def cmd_curves(cfg: dict) -> None:
    out = _out_dir(cfg)
    _echo_config(cfg, out)
    ds = _load_dataset(cfg["dataset"])
    samples = ds.split(cfg["dataset_split"])
    for i, path in enumerate(cfg["checkpoint"]):
        ckpt = _load_checkpoint(path, ds.manifest.dims)
        curve = similarity_curves(ckpt.params, samples)
        _write_curve(out / f"curve{i}_raw.csv", curve.raw_mean, curve.raw_std)
        _write_curve(out / f"curve{i}_normalized.csv", curve.norm_mean, curve.norm_std)
        print(f"curve{i} ({path}): rank-1 raw {curve.raw_mean[0]:.4f}, normalized {curve.norm_mean[0]:.4f}, "
              f"mean row entropy {mean_row_entropy(ckpt.params, samples):.6f}")


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "sweep": cmd_sweep, "zeroshot": cmd_zeroshot,
    "eval": cmd_eval, "heatmap": cmd_heatmap, "curves": cmd_curves,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "curves" and args.checkpoint is not None and isinstance(args.checkpoint, str):
        args.checkpoint = [args.checkpoint]
    try:
        cfg = resolve(args)
        if args.command == "curves" and isinstance(cfg["checkpoint"], str):
            cfg["checkpoint"] = [cfg["checkpoint"]]
        COMMANDS[args.command](cfg)
    except (TrainingAborted, NonFiniteError) as exc:
        print(f"error: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except IntegrityError as exc:
        print(f"error: data integrity: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (ConfigError, UndefinedAUCError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
