"""Batch experiment driver: data generation, training, evaluation, ablations,
hyperparameter sweeps, and curve plotting.

Every command is a pure function of its config file, overrides, and input
files; with M2DAN_THREADS=1 identical invocations produce byte-identical
artifacts. Exit codes: 0 success, 1 usage or config error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

from .data import (
    Benchmark,
    DEFAULT_FRACTION,
    export_dataset,
    load_dataset_dir,
    make_benchmark,
)
from .errors import (
    ConfigError,
    CorruptFile,
    EmptyClassDir,
    IndivisibleBatch,
    InvalidSpec,
    MalformedCsv,
    MalformedPgm,
    MissingSource,
    NonFiniteInput,
    NumericError,
    SpecMismatch,
    VersionMismatch,
)
from .losses import HyperParams
from .metrics import MetricsReport, evaluate
from .model import SCALE_VARIANTS, ExtractorArch, build_model
from .plotting import render_curves
from .training import (
    TrainState,
    load_checkpoint,
    read_history_csv,
    save_checkpoint,
    train,
    write_history_csv,
)

SCALE_CHOICES = ("mixed", "s1", "s3", "s5")
CLASS_LOSS_CHOICES = ("ce", "focal")
HALF_CHOICES = ("none", "left", "right", "both")

ALPHA_GRID = (0.0003, 0.003, 0.03, 0.3)
ETA_GRID = (0.001, 0.01, 0.1, 1.0)
LAMBDA_GRID = (0.001, 0.01, 0.1, 1.0)
SWEEP_GRIDS = {"alpha": ALPHA_GRID, "eta": ETA_GRID, "lambda": LAMBDA_GRID}


# ------------------------------------------------------------- configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment, fully determined by these fields."""

    alpha: float = 0.03
    lam: float = 1.0
    eta: float = 0.1
    gamma: float = 2.0
    lr: float = 0.001
    epochs: int = 30
    batch_size: int = 12
    seed: int = 42
    grl_mode: str = "constant"
    grl_ramp_length: int | None = None
    scale: str = "mixed"
    class_loss: str = "focal"
    domain_loss: bool = True
    entropy_loss: bool = True
    source_only: bool = False
    data_dir: str | None = None
    data_seed: int = 42
    scale_fraction: float = DEFAULT_FRACTION
    image_size: int = 64
    half: str = "none"
    out_dir: str = "out"

    def hyper_params(self) -> HyperParams:
        return HyperParams(
            alpha=self.alpha, lam=self.lam, eta=self.eta, gamma=self.gamma,
            lr=self.lr, epochs=self.epochs, batch_size=self.batch_size,
            seed=self.seed, grl_mode=self.grl_mode,
            grl_ramp_length=self.grl_ramp_length,
        )


def _parse_bool(value: str) -> bool:
    low = value.lower()
    if low in ("on", "true", "1", "yes"):
        return True
    if low in ("off", "false", "0", "no"):
        return False
    raise ValueError(f"expected on/off, got {value!r}")


def _parse_opt_int(value: str) -> int | None:
    return None if value.lower() == "none" else int(value)


def _parse_opt_str(value: str) -> str | None:
    return None if value.lower() == "none" else value


def _parse_choice(options):
    def parse(value: str) -> str:
        if value not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {value!r}")
        return value

    return parse


def _fmt_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, float):
        return repr(v)
    return str(v)


# config key -> (dataclass attribute, parser); file order is echo order
_KEYS: dict[str, tuple[str, object]] = {
    "alpha": ("alpha", float),
    "lambda": ("lam", float),
    "eta": ("eta", float),
    "gamma": ("gamma", float),
    "lr": ("lr", float),
    "epochs": ("epochs", int),
    "batch_size": ("batch_size", int),
    "seed": ("seed", int),
    "grl_mode": ("grl_mode", _parse_choice(("constant", "ramp"))),
    "grl_ramp_length": ("grl_ramp_length", _parse_opt_int),
    "scale": ("scale", _parse_choice(SCALE_CHOICES)),
    "class_loss": ("class_loss", _parse_choice(CLASS_LOSS_CHOICES)),
    "domain_loss": ("domain_loss", _parse_bool),
    "entropy_loss": ("entropy_loss", _parse_bool),
    "source_only": ("source_only", _parse_bool),
    "data_dir": ("data_dir", _parse_opt_str),
    "data_seed": ("data_seed", int),
    "scale_fraction": ("scale_fraction", float),
    "image_size": ("image_size", int),
    "half": ("half", _parse_choice(HALF_CHOICES)),
    "out_dir": ("out_dir", str),
}


def parse_config_text(text: str, label: str) -> dict[str, str]:
    """Flat `key = value` lines; blank lines and # comments are skipped."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{label}:{lineno}: expected `key = value`, got {stripped!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key in raw:
            raise ConfigError(f"{label}:{lineno}: duplicate key {key!r}")
        raw[key] = value.strip()
    return raw


def build_config(raw: dict[str, str]) -> ExperimentConfig:
    values = {}
    for key, value in raw.items():
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        attr, parser = _KEYS[key]
        try:
            values[attr] = parser(value)
        except ValueError as e:
            raise ConfigError(f"config key {key}: {e}") from e
    cfg = ExperimentConfig(**values)
    try:
        cfg.hyper_params()  # rejects invalid numeric settings early
    except InvalidSpec as e:
        raise ConfigError(str(e)) from e
    return cfg


def load_config(path: str | None, overrides: list[str]) -> ExperimentConfig:
    raw: dict[str, str] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        raw.update(parse_config_text(text, path))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, _, value = item.partition("=")
        raw[key.strip()] = value.strip()  # later overrides win
    return build_config(raw)


def echo_config(cfg: ExperimentConfig) -> str:
    lines = [f"{key} = {_fmt_value(getattr(cfg, attr))}" for key, (attr, _) in _KEYS.items()]
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------- run plumbing


def _load_benchmark(cfg: ExperimentConfig) -> Benchmark:
    if cfg.data_dir is not None:
        return load_dataset_dir(Path(cfg.data_dir), half=cfg.half,
                                image_size=cfg.image_size)
    return make_benchmark(cfg.data_seed, cfg.scale_fraction, cfg.image_size)


def run_training(cfg: ExperimentConfig, benchmark: Benchmark) -> tuple[TrainState, MetricsReport]:
    model = build_model(SCALE_VARIANTS[cfg.scale], ExtractorArch(),
                        benchmark.num_domains, seed=cfg.seed)
    use_domain = cfg.domain_loss and not cfg.source_only
    use_entropy = cfg.entropy_loss and not cfg.source_only
    state = train(
        model, benchmark, cfg.hyper_params(),
        use_focal=(cfg.class_loss == "focal"),
        use_domain=use_domain,
        use_entropy=use_entropy,
        train_domains=(0,) if cfg.source_only else None,
    )
    return state, evaluate(model, benchmark)


def _csv_cell(cell) -> str:
    if isinstance(cell, float):
        return repr(cell)  # full precision, round-trips exactly
    return str(cell)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_csv_cell(cell) for cell in row])


def _worker_count() -> int:
    value = os.environ.get("M2DAN_THREADS", "1")
    try:
        threads = int(value)
    except ValueError as e:
        raise ConfigError(f"M2DAN_THREADS must be an integer, got {value!r}") from e
    if threads < 1:
        raise ConfigError(f"M2DAN_THREADS must be >= 1, got {threads}")
    return threads


def _run_grid(fn, configs: list[ExperimentConfig]):
    """Train every config, results in grid order regardless of parallelism."""
    threads = _worker_count()
    if threads == 1:
        return [fn(c) for c in configs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, configs))


# ------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    benchmark = make_benchmark(args.seed, args.scale_fraction, args.image_size)
    export_dataset(benchmark, out)
    for dataset in benchmark.domains:
        tr_narrow = sum(1 for s in dataset.train
                        if s.class_label is not None and s.class_label[0] == 1.0)
        te_narrow = sum(1 for s in dataset.test if s.class_label[0] == 1.0)
        label = (f"train={len(dataset.train)} (narrow={tr_narrow})"
                 if tr_narrow else f"train={len(dataset.train)} (unlabeled)")
        print(f"{dataset.name}: {label} test={len(dataset.test)} (narrow={te_narrow})")
    print(f"wrote PGM tree under {out}")
    return 0


def _train_artifacts(cfg: ExperimentConfig, out: Path) -> MetricsReport:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(echo_config(cfg), encoding="utf-8")
    benchmark = _load_benchmark(cfg)
    state, report = run_training(cfg, benchmark)
    save_checkpoint(state, out / "model.ckpt")
    write_history_csv(state.history, benchmark.names, out / "history.csv")
    header, rows = read_history_csv(out / "history.csv")
    (out / "curves.svg").write_text(render_curves(header, rows), encoding="utf-8")
    (out / "metrics.json").write_text(report.to_json(), encoding="utf-8")
    return report


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.override)
    report = _train_artifacts(cfg, Path(cfg.out_dir))
    print(f"done: mean_acc={report.mean_acc:.4f} mean_auc={report.mean_auc:.4f} "
          f"artifacts in {cfg.out_dir}")
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(Path(args.checkpoint))
    if args.data is not None:
        benchmark = load_dataset_dir(Path(args.data), half=args.half,
                                     image_size=args.image_size)
    else:
        benchmark = make_benchmark(args.synthetic_seed, args.scale_fraction,
                                   args.image_size)
    report = evaluate(state.model, benchmark)
    sys.stdout.write(report.to_json())
    return 0


def _report_cells(report: MetricsReport, with_acc: bool) -> list:
    cells = []
    for d in report.domains[1:]:
        if with_acc:
            cells.append(d.accuracy)
        cells.append(d.auc)
    if with_acc:
        cells += [report.mean_acc, report.mean_auc]
    else:
        cells.append(report.mean_auc)
    return cells


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.override)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    benchmark = _load_benchmark(cfg)
    target_names = benchmark.names[1:]
    metric_cols = [f"{m}_{n}" for n in target_names for m in ("acc", "auc")]
    metric_cols += ["mean_acc", "mean_auc"]

    def run_one(c: ExperimentConfig) -> MetricsReport:
        return run_training(c, benchmark)[1]

    if args.which == "scales":
        variants = ["s1", "s3", "s5", "mixed"]
        configs = [replace(cfg, scale=v) for v in variants]
        reports = _run_grid(run_one, configs)
        rows = [[v] + _report_cells(r, with_acc=True)
                for v, r in zip(variants, reports)]
        path = out / "ablation_scales.csv"
        _write_csv(path, ["variant"] + metric_cols, rows)
    else:
        combos = [  # (class_loss, domain, entropy) per ablation row
            ("ce", False, False),
            ("focal", False, False),
            ("focal", True, False),
            ("focal", True, True),
        ]
        configs = [
            replace(cfg, class_loss=cl, domain_loss=dom, entropy_loss=ent,
                    source_only=False)
            for cl, dom, ent in combos
        ]
        reports = _run_grid(run_one, configs)
        rows = []
        for (cl, dom, ent), report in zip(combos, reports):
            flags = [int(cl == "ce"), int(cl == "focal"), int(dom), int(ent)]
            rows.append(flags + _report_cells(report, with_acc=True))
        path = out / "ablation_losses.csv"
        _write_csv(path, ["l_ce", "l_fo", "l_d", "l_en"] + metric_cols, rows)
    print(f"wrote {path}")
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, args.override)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    benchmark = _load_benchmark(cfg)
    attr = {"alpha": "alpha", "eta": "eta", "lambda": "lam"}[args.param]
    grid = SWEEP_GRIDS[args.param]
    configs = [replace(cfg, **{attr: value}) for value in grid]

    def run_one(c: ExperimentConfig) -> MetricsReport:
        return run_training(c, benchmark)[1]

    reports = _run_grid(run_one, configs)
    header = ["value"] + [f"auc_{n}" for n in benchmark.names[1:]] + ["mean_auc"]
    rows = [[value] + _report_cells(report, with_acc=False)
            for value, report in zip(grid, reports)]
    path = out / f"sweep_{args.param}.csv"
    _write_csv(path, header, rows)
    print(f"wrote {path}")
    return 0


def cmd_plot(args) -> int:
    header, rows = read_history_csv(Path(args.history))
    Path(args.out).write_text(render_curves(header, rows), encoding="utf-8")
    print(f"wrote {args.out}")
    return 0


# ------------------------------------------------------------- entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems must exit 1, not argparse's 2
        raise ConfigError(message)


def build_parser() -> _Parser:
    parser = _Parser(
        prog="m2dan",
        description=(
            "Multi-scale multi-target domain-adversarial experiments. "
            "Ablation CSV columns: variant (or l_ce,l_fo,l_d,l_en flags), then "
            "acc_<target>, auc_<target> per target, then mean_acc, mean_auc. "
            "Sweep CSV columns: value, auc_<target> per target, mean_auc."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="export the synthetic benchmark as PGM trees")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--scale-fraction", type=float, default=DEFAULT_FRACTION)
    p.add_argument("--image-size", type=int, default=64)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train one model and write all artifacts")
    p.add_argument("--config", default=None)
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, JSON report to stdout")
    p.add_argument("--checkpoint", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--data", default=None)
    group.add_argument("--synthetic-seed", type=int, default=None)
    p.add_argument("--scale-fraction", type=float, default=DEFAULT_FRACTION)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--half", choices=HALF_CHOICES, default="none")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="scale or loss ablation grid")
    p.add_argument("--config", default=None)
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--which", choices=("scales", "losses"), required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("sweep", help="hyperparameter sweep over a fixed grid")
    p.add_argument("--config", default=None)
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--param", choices=("alpha", "eta", "lambda"), required=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("plot", help="render training curves from a history CSV")
    p.add_argument("--history", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_plot)

    return parser


_DATA_ERRORS = (
    MalformedPgm,
    MissingSource,
    EmptyClassDir,
    MalformedCsv,
    CorruptFile,
    VersionMismatch,
    SpecMismatch,
    FileNotFoundError,
    NotADirectoryError,
    IsADirectoryError,
)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (ConfigError, InvalidSpec, IndivisibleBatch) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except _DATA_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (NumericError, NonFiniteInput) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
