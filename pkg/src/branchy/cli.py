"""``branchy`` command-line driver: train, eval, report, synth.

Configuration is a flat ``key = value`` file; any ``--key value`` pair on
the command line overrides it.  Relative paths in a config file are
resolved against the file's directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .cost import (
    cost_report,
    default_seq_len,
    expected_complexity,
    exit_histogram,
    relative_savings,
)
from .data import load_embeddings, load_tsv, save_tsv, split, synth_generate
from .engine import (
    BranchyModel,
    TrainConfig,
    calibrate_thresholds,
    infer_early_exit,
    mean_exit_entropies,
    train_branchy,
)
from .errors import BranchyError, ConfigError, DataError, ParseError, StateError
from .metrics import accuracy, macro_f1, macro_f1_present, per_class_scores
from .models import ArchSpec
from .persist import load_model, model_bytes

log = logging.getLogger(__name__)

PATH_KEYS = ("data", "train_data", "dev_data", "test_out", "embeddings")


def _bool(value):
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _ints(value):
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    return tuple(int(v) for v in str(value).split(",") if v.strip())


def _floats(value):
    if isinstance(value, (list, tuple)):
        return tuple(float(v) for v in value)
    return tuple(float(v) for v in str(value).split(",") if v.strip())


def _opt_str(value):
    return None if value in (None, "", "none", "None") else str(value)


def _opt_int(value):
    return None if value in (None, "", "none", "None") else int(value)


@dataclass
class RunConfig:
    model: str = "dnn"
    hidden_sizes: tuple = (32, 32, 32)
    embed_dim: int = 32
    r_l: float = 0.3
    r_u: float = 1.0
    alpha_mode: str = "fixed"
    lr: float = 0.5
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    max_len: int = 32
    min_count: int = 1
    calibration_split: str = "train"
    data: str = None
    split: tuple = (0.8, 0.1, 0.1)
    train_data: str = None
    dev_data: str = None
    test_out: str = None
    embeddings: str = None
    trainable_embeddings: bool = True
    include_embedding_params: bool = False
    seq_len: int = None
    classes: int = 10
    n_per_class: int = 200
    vocab_per_class: int = 20
    noise: float = 0.3

    _converters = {
        "model": str,
        "hidden_sizes": _ints,
        "embed_dim": int,
        "r_l": float,
        "r_u": float,
        "alpha_mode": str,
        "lr": float,
        "epochs": int,
        "batch_size": int,
        "seed": int,
        "max_len": int,
        "min_count": int,
        "calibration_split": str,
        "data": _opt_str,
        "split": _floats,
        "train_data": _opt_str,
        "dev_data": _opt_str,
        "test_out": _opt_str,
        "embeddings": _opt_str,
        "trainable_embeddings": _bool,
        "include_embedding_params": _bool,
        "seq_len": _opt_int,
        "classes": int,
        "n_per_class": int,
        "vocab_per_class": int,
        "noise": float,
    }

    @classmethod
    def from_mapping(cls, mapping):
        known = {f.name for f in fields(cls)}
        values = {}
        for key, raw in mapping.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown configuration key {key!r}")
            try:
                values[key] = cls._converters[key](raw)
            except (TypeError, ValueError) as err:
                raise ConfigError(f"bad value for {key}: {raw!r} ({err})") from None
        config = cls(**values)
        config.validate()
        return config

    def validate(self):
        positive = ("embed_dim", "epochs", "batch_size", "max_len", "min_count", "classes",
                    "n_per_class", "vocab_per_class")
        for key in positive:
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise ConfigError(f"hidden_sizes must be positive, got {self.hidden_sizes}")
        if self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if self.calibration_split not in ("train", "dev"):
            raise ConfigError("calibration_split must be 'train' or 'dev'")
        if self.seq_len is not None and self.seq_len < 1:
            raise ConfigError("seq_len must be positive")

    def to_dict(self):
        out = asdict(self)
        out["hidden_sizes"] = list(self.hidden_sizes)
        out["split"] = list(self.split)
        return out


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
    for key in PATH_KEYS:
        if values.get(key) and not Path(values[key]).is_absolute():
            values[key] = str(path.parent / values[key])
    return values


def _overrides(extra):
    values = {}
    i = 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--") or i + 1 >= len(extra):
            raise ConfigError(f"unexpected argument {arg!r}; overrides take the form --key value")
        values[arg[2:]] = extra[i + 1]
        i += 2
    return values


def resolve_config(config_path, extra, seed=None):
    values = read_config_file(config_path) if config_path else {}
    values.update(_overrides(extra))
    if seed is not None:
        values["seed"] = seed
    return RunConfig.from_mapping(values)


def _datasets(config):
    if config.train_data:
        train = load_tsv(config.train_data, max_len=config.max_len, min_count=config.min_count)
        if not config.dev_data:
            raise ConfigError("train_data needs a matching dev_data")
        dev = load_tsv(config.dev_data, vocab=train.vocab, label_names=train.label_names,
                       max_len=config.max_len)
        return train, dev, None
    if not config.data:
        raise ConfigError("configuration needs either data or train_data/dev_data")
    full = load_tsv(config.data, max_len=config.max_len, min_count=config.min_count)
    return split(full, config.split, config.seed)


def build_model(config, train):
    arch = ArchSpec(config.model, train.vocab.size, config.embed_dim, config.hidden_sizes,
                    len(train.label_names), config.trainable_embeddings)
    model = BranchyModel.create(arch, config.seed, config.r_l, config.r_u, config.alpha_mode,
                                config.max_len)
    if config.embeddings:
        _, coverage = load_embeddings(config.embeddings, train.vocab, config.embed_dim,
                                      table=model.embedding)
        log.info("embedding file covers %d of %d tokens", coverage, train.vocab.size - 1)
    model.vocab = train.vocab
    model.label_names = list(train.label_names)
    model.config = config.to_dict()
    return model


def run_train(config, out_path, stream=None):
    """Dataset, model, training, calibration, then one model file."""
    stream = stream or sys.stdout
    train, dev, test = _datasets(config)
    model = build_model(config, train)
    result = train_branchy(model, train, dev,
                           TrainConfig(config.lr, config.epochs, config.batch_size, config.seed))
    for stats in result.history:
        print(f"epoch {stats.epoch} loss {stats.loss:.6f} dev_accuracy {stats.dev_accuracy:.4f}",
              file=stream)
    print(f"selected epoch {result.best_epoch}", file=stream)
    model.thresholds = calibrate_thresholds(model, dev if config.calibration_split == "dev" else train)
    print("thresholds " + " ".join(f"{t:.6f}" for t in model.thresholds.thresholds), file=stream)
    Path(out_path).write_bytes(model_bytes(model))
    if config.test_out and test is not None:
        save_tsv(test, config.test_out)
    return model, result


def check_trace(trace, thresholds):
    """Raise if a routing decision contradicts the thresholds."""
    n = trace.chosen_exit
    if len(trace.entropies) != n:
        raise StateError(f"trace has {len(trace.entropies)} entropies for exit {n}")
    for k in range(n - 1):
        if not trace.entropies[k] >= thresholds[k]:
            raise StateError(f"exit {k + 1} should have fired (entropy {trace.entropies[k]})")
    if n < len(thresholds) and not trace.entropies[n - 1] < thresholds[n - 1]:
        raise StateError(f"exit {n} fired with entropy {trace.entropies[n - 1]} above its threshold")


def evaluate(model, data, seq_len=None, include_embedding=False):
    """Early-exit and forced-final-exit evaluation of ``model`` on ``data``."""
    if not model.calibrated:
        raise StateError("model has no calibrated thresholds")
    if not data.examples:
        raise DataError("evaluation set is empty")
    gold = data.labels
    traces = [infer_early_exit(model, ex.tokens) for ex in data.examples]
    for trace in traces:
        check_trace(trace, model.thresholds)
    finals = [infer_early_exit(model, ex.tokens, force_exit=model.n_exits) for ex in data.examples]
    pred = [t.prediction for t in traces]
    final_pred = [t.prediction for t in finals]
    C = model.n_classes
    if seq_len is None:
        seq_len = default_seq_len(data.token_lists, model.max_len)
    costs = cost_report(model, seq_len, include_embedding)
    dist = exit_histogram([t.chosen_exit for t in traces], model.n_exits)
    expected = expected_complexity(costs.flops_per_exit, dist)
    baseline = costs.baseline["flops"]
    return {
        "accuracy": accuracy(pred, gold),
        "macro_f1": macro_f1(pred, gold, C),
        "macro_f1_present": macro_f1_present(pred, gold, C),
        "per_class": [dict(s, label=name) for s, name in
                      zip(per_class_scores(pred, gold, C), model.label_names or range(C))],
        "final_exit": {
            "accuracy": accuracy(final_pred, gold),
            "macro_f1": macro_f1(final_pred, gold, C),
            "macro_f1_present": macro_f1_present(final_pred, gold, C),
            "flops": costs.flops_per_exit[-1],
        },
        "exit_distribution": list(dist.probs),
        "exit_counts": np.bincount([t.chosen_exit - 1 for t in traces], minlength=model.n_exits).tolist(),
        "expected_flops": expected,
        "baseline_flops": baseline,
        "relative_savings": relative_savings(expected, baseline),
        "cost": costs.to_dict(),
        "thresholds": list(model.thresholds.thresholds),
        "mean_exit_entropies": mean_exit_entropies(model, data),
        "n_examples": len(data.examples),
        "skipped": data.skipped,
    }


def run_eval(model_path, data_path, seq_len=None):
    model = load_model(model_path)
    data = load_tsv(data_path, vocab=model.vocab, label_names=model.label_names, max_len=model.max_len)
    config = dict(model.config)
    include = bool(config.get("include_embedding_params", False))
    seq_len = seq_len if seq_len is not None else config.get("seq_len")
    report = evaluate(model, data, seq_len, include)
    report["model_kind"] = model.kind
    report["config_echo"] = dict(config, eval_model=str(model_path), eval_data=str(data_path),
                                 eval_seq_len=report["cost"]["seq_len_assumed"])
    return report


def write_json(obj, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


REPORT_KEYS = ("accuracy", "macro_f1", "macro_f1_present", "final_exit", "exit_distribution",
               "expected_flops", "baseline_flops", "relative_savings", "cost", "model_kind")


def read_report(path):
    try:
        with open(path, encoding="utf-8") as fh:
            report = json.load(fh)
    except json.JSONDecodeError as err:
        raise ParseError(f"{path}: not a JSON report ({err})") from None
    if not isinstance(report, dict) or any(k not in report for k in REPORT_KEYS):
        raise ParseError(f"{path}: report lacks required fields {REPORT_KEYS}")
    return report


def run_report(report_paths, out_dir):
    """Metrics, cost and exit-distribution tables as CSV files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = [(Path(p).stem, read_report(p)) for p in report_paths]
    metrics_rows, cost_rows, dist_rows = [], [], []
    for name, r in reports:
        final = r["final_exit"]
        metrics_rows.append([name, r["model_kind"], "final-exit", f"{final['macro_f1']:.6f}",
                             f"{final['macro_f1_present']:.6f}", f"{100 * final['accuracy']:.4f}"])
        metrics_rows.append([name, r["model_kind"], "early-exit", f"{r['macro_f1']:.6f}",
                             f"{r['macro_f1_present']:.6f}", f"{100 * r['accuracy']:.4f}"])
        base = r["cost"]["baseline"]
        cost_rows.append([name, r["model_kind"], "baseline", base["params"], base["flops"]])
        for e in r["cost"]["per_exit"]:
            cost_rows.append([name, r["model_kind"], e["exit"], e["cumulative_params"], e["cumulative_flops"]])
        for n, p in enumerate(r["exit_distribution"], start=1):
            dist_rows.append([name, r["model_kind"], n, f"{100 * p:.4f}", f"{r['expected_flops']:.4f}",
                              f"{r['baseline_flops']}", f"{100 * r['relative_savings']:.4f}"])
    tables = {
        "metrics.csv": (["model", "kind", "routing", "macro_f1", "macro_f1_present", "accuracy_percent"],
                        metrics_rows),
        "cost.csv": (["model", "kind", "exit_point", "params", "flops"], cost_rows),
        "exit_distribution.csv": (["model", "kind", "exit", "percent", "expected_flops", "baseline_flops",
                                   "relative_savings_percent"], dist_rows),
    }
    written = []
    for filename, (header, rows) in tables.items():
        path = out_dir / filename
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
        written.append(path)
    return written


def run_synth(config, out_path):
    data = synth_generate(config.classes, config.n_per_class, config.vocab_per_class, config.noise,
                          config.seed)
    save_tsv(data, out_path)
    return data


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="branchy", description="Early-exit intent classifiers.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train and calibrate a model")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", required=True, type=int)

    p = sub.add_parser("eval", help="evaluate a model on a TSV file")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seq-len", type=int, default=None)

    p = sub.add_parser("report", help="turn eval reports into CSV tables")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("synth", help="write a synthetic intent corpus")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", required=True, type=int)
    return parser


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in ("eval", "report") and extra:
            raise ConfigError(f"unexpected arguments {extra}")
        if args.command == "train":
            run_train(resolve_config(args.config, extra, args.seed), args.out)
        elif args.command == "eval":
            write_json(run_eval(args.model, args.data, args.seq_len), args.out)
        elif args.command == "report":
            for path in run_report(args.reports, args.out_dir):
                print(path)
        elif args.command == "synth":
            run_synth(resolve_config(args.config, extra, args.seed), args.out)
    except BranchyError as err:
        print(f"branchy {args.command}: {type(err).__name__}: {err}", file=sys.stderr)
        return err.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as err:
        print(f"branchy {args.command}: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
