"""Experiment runner CLI.

Subcommands:

* ``run <config>``       - execute the configured seed sweep, writing one
                           JSONL + CSV log per seed, a summary CSV, and
                           (optionally) figures into the output directory.
* ``validate <config>``  - parse and validate the config, touching nothing.
* ``summarize <dir>``    - rebuild the summary table and figures from the
                           logs in a previous output directory.

Configs are strict YAML: unknown keys are rejected with a suggestion, and
every invariant is checked at parse time. The environment variable
FEDBILEVEL_OUTPUT_DIR overrides the configured output directory.

Exit codes: 0 success, 2 parse error, 3 validation error, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import difflib
import os
import statistics
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__, diagnostics, fedengine, problems, report
from .dataio import DatasetSchema, load_csv, split_train_test
from .hypergrad import LinearSolveConfig, NeumannConfig
from .numerics import RngStream

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_VALIDATION = 3
EXIT_RUNTIME = 4

OUTPUT_DIR_ENV = "FEDBILEVEL_OUTPUT_DIR"

#: Documented learning-rate sweep preset (not auto-applied).
LEARNING_RATE_GRID = (0.001, 0.01, 0.1, 1.0)


class ConfigError(ValueError):
    """Config file is syntactically fine but semantically invalid."""


class ConfigParseError(ValueError):
    """Config file cannot be parsed at all."""


# ---------------------------------------------------------------------------
# Config schema
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadraticSection:
    dim_x: int = 2
    dim_y: int = 2
    mu: float = 1.0
    smooth_l: float = 2.0
    zeta_scale: float = 0.5
    num_samples: int = 0
    noise_sigma: float = 0.0
    x_coupling: float = 0.0
    problem_seed: int = 20240

    def __post_init__(self):
        if not 0 < self.mu <= self.smooth_l:
            raise ConfigError(f"quadratic: need 0 < mu <= smooth_l, got {self.mu}, {self.smooth_l}")
        if self.dim_x < 1 or self.dim_y < 1:
            raise ConfigError("quadratic: dimensions must be >= 1")


@dataclass(frozen=True)
class FairFLSection:
    source: str = "synthetic"
    distribution: str = "iid"
    per_group_validation: int = 20
    l2_reg: float = 1e-2
    weight_floor: float = problems.DEFAULT_WEIGHT_FLOOR
    stage2_steps: int | None = None
    stage2_lr: float | None = None
    problem_seed: int | None = None  # None: derive the data from the run seed
    # synthetic source
    synthetic_n: int = 2000
    minority_frac: float = 1.0 / 11.0
    # csv source (dataset manifest)
    csv_path: str | None = None
    label_column: str | None = None
    group_column: str | None = None
    categorical: tuple[str, ...] = ()
    standardize: bool = True

    def __post_init__(self):
        if self.source not in ("synthetic", "csv"):
            raise ConfigError(f"fairfl: unknown source {self.source!r}")
        if self.distribution not in ("iid", "noniid"):
            raise ConfigError(f"fairfl: unknown distribution {self.distribution!r}")
        if self.per_group_validation < 0:
            raise ConfigError("fairfl: per_group_validation must be >= 0")
        if self.source == "csv":
            for name in ("csv_path", "label_column", "group_column"):
                if getattr(self, name) is None:
                    raise ConfigError(f"fairfl: csv source requires {name}")


@dataclass(frozen=True)
class ExperimentConfig:
    problem: str
    run: fedengine.RunConfig
    seeds: tuple[int, ...]
    output_dir: str
    quadratic: QuadraticSection = field(default_factory=QuadraticSection)
    fairfl: FairFLSection = field(default_factory=FairFLSection)
    figures: bool = True
    parallel_seeds: bool = False
    log_stride: int = 1

    def __post_init__(self):
        if self.problem not in ("quadratic", "fairfl"):
            raise ConfigError(f"unknown problem {self.problem!r}")
        if not self.seeds:
            raise ConfigError("seeds must be a nonempty list")
        if self.log_stride < 1:
            raise ConfigError("log_stride must be >= 1")
        if self.problem == "fairfl" and self.run.algorithm not in ("fedbio", "fedbioacc", "fedavg"):
            raise ConfigError(f"fairfl cannot use algorithm {self.run.algorithm!r}")


_TOP_KEYS = {
    "problem",
    "algorithm",
    "num_clients",
    "sync_interval",
    "total_steps",
    "gamma",
    "eta_outer",
    "c_nu",
    "c_omega",
    "delta",
    "u",
    "sigma",
    "seed_run",
    "seeds",
    "output_dir",
    "neumann",
    "solve",
    "quadratic",
    "fairfl",
    "figures",
    "parallel_seeds",
    "log_stride",
}
_NEUMANN_KEYS = {"eta", "q_terms", "batch_f", "batch_g", "batch_hess", "declared_smoothness"}
_SOLVE_KEYS = {"tol", "max_iter"}
_QUADRATIC_KEYS = {f.name for f in dataclasses.fields(QuadraticSection)}
_FAIRFL_KEYS = {f.name for f in dataclasses.fields(FairFLSection)}


# Common foreign spellings mapped to the key that was probably meant.
_KEY_HINTS = {
    "learningrate": "eta_outer",
    "learning_rate": "eta_outer",
    "lr": "eta_outer",
    "stepsize": "eta_outer",
    "clients": "num_clients",
    "steps": "total_steps",
    "seed": "seeds",
    "interval": "sync_interval",
}


def _reject_unknown(mapping: dict, allowed: set, section: str) -> None:
    for key in mapping:
        if key not in allowed:
            hinted = _KEY_HINTS.get(str(key).lower())
            if hinted is None:
                close = difflib.get_close_matches(str(key), sorted(allowed), n=1, cutoff=0.55)
                hinted = close[0] if close else None
            suggestion = f"; did you mean {hinted!r}?" if hinted else ""
            raise ConfigError(f"{section}: unknown key {key!r}{suggestion}")


def _section(raw: dict, name: str) -> dict:
    value = raw.get(name, {})
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"{name}: expected a mapping, got {type(value).__name__}")
    return value


def parse_config(path) -> ExperimentConfig:
    """Load, validate and default-fill an experiment config."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigParseError(f"cannot read {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" (line {mark.line + 1})" if mark is not None else ""
        raise ConfigParseError(f"{path}: YAML parse error{where}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigParseError(f"{path}: top level must be a mapping")

    _reject_unknown(raw, _TOP_KEYS, "config")
    neumann_raw = _section(raw, "neumann")
    _reject_unknown(neumann_raw, _NEUMANN_KEYS, "neumann")
    solve_raw = _section(raw, "solve")
    _reject_unknown(solve_raw, _SOLVE_KEYS, "solve")
    quadratic_raw = _section(raw, "quadratic")
    _reject_unknown(quadratic_raw, _QUADRATIC_KEYS, "quadratic")
    fairfl_raw = _section(raw, "fairfl")
    _reject_unknown(fairfl_raw, _FAIRFL_KEYS, "fairfl")

    problem = raw.get("problem", "quadratic")
    default_batch = 128 if problem == "fairfl" else 0
    try:
        neumann = NeumannConfig(
            eta=float(neumann_raw.get("eta", 0.1)),
            q_terms=int(neumann_raw.get("q_terms", 5)),
            batch_f=int(neumann_raw.get("batch_f", default_batch)),
            batch_g=int(neumann_raw.get("batch_g", default_batch)),
            batch_hess=int(neumann_raw.get("batch_hess", default_batch)),
            declared_smoothness=neumann_raw.get("declared_smoothness"),
        )
        solve = LinearSolveConfig(
            tol=float(solve_raw.get("tol", 1e-10)),
            max_iter=solve_raw.get("max_iter"),
        )
        run_cfg = fedengine.RunConfig(
            algorithm=str(raw.get("algorithm", "fedbio")),
            num_clients=int(raw.get("num_clients", 3)),
            sync_interval=int(raw.get("sync_interval", 5)),
            total_steps=int(raw.get("total_steps", 2000)),
            gamma=float(raw.get("gamma", 0.1)),
            eta_outer=float(raw.get("eta_outer", 0.1)),
            c_nu=float(raw.get("c_nu", 1.0)),
            c_omega=float(raw.get("c_omega", 1.0)),
            delta=float(raw.get("delta", 0.1)),
            u=float(raw.get("u", 1.0)),
            sigma=float(raw.get("sigma", 1.0)),
            neumann=neumann,
            solve=solve,
            seed=int(raw.get("seed_run", 0)),
        )
        seeds = raw.get("seeds", [0])
        if not isinstance(seeds, list):
            raise ConfigError("seeds: expected a list of integers")
        cfg = ExperimentConfig(
            problem=str(problem),
            run=run_cfg,
            seeds=tuple(int(s) for s in seeds),
            output_dir=str(raw.get("output_dir", "runs")),
            quadratic=QuadraticSection(**quadratic_raw),
            fairfl=FairFLSection(
                **{
                    **fairfl_raw,
                    **(
                        {"categorical": tuple(fairfl_raw["categorical"])}
                        if "categorical" in fairfl_raw
                        else {}
                    ),
                }
            ),
            figures=bool(raw.get("figures", True)),
            parallel_seeds=bool(raw.get("parallel_seeds", False)),
            log_stride=int(raw.get("log_stride", 1)),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    if cfg.problem == "fairfl" and cfg.fairfl.source == "csv":
        if not Path(cfg.fairfl.csv_path).exists():
            raise ConfigError(f"fairfl: csv_path {cfg.fairfl.csv_path!r} does not exist")
    return cfg


# ---------------------------------------------------------------------------
# Experiment execution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SummaryRow:
    method: str
    distribution: str
    metric: str
    mean: float
    std: float
    n_seeds: int


@dataclass
class SummaryTable:
    rows: list[SummaryRow]


def _metadata(cfg: ExperimentConfig, seed: int, extra: dict) -> dict:
    meta = {
        "version": __version__,
        "problem": cfg.problem,
        "seed": seed,
        "run_config": dataclasses.replace(cfg.run, seed=seed).as_dict(),
        "flags": {
            "eqopp_definition": "max pairwise true-positive-rate gap",
            "group_weights": "raw per-sample weights under a global simplex constraint",
            "snapshot_convention": "metrics observe the pre-update, pre-averaging state",
            "grad_norm_is_estimate": cfg.problem != "quadratic",
        },
    }
    if cfg.problem == "quadratic":
        meta["quadratic"] = dataclasses.asdict(cfg.quadratic)
    else:
        meta["fairfl"] = dataclasses.asdict(cfg.fairfl)
    meta.update(extra)
    return meta


def _quadratic_seed_run(cfg: ExperimentConfig, seed: int, out: Path):
    q = cfg.quadratic
    oracles, truth = problems.make_quadratic(
        dim_x=q.dim_x,
        dim_y=q.dim_y,
        num_clients=cfg.run.num_clients,
        mu=q.mu,
        smooth_l=q.smooth_l,
        zeta_scale=q.zeta_scale,
        seed=q.problem_seed,
        num_samples=q.num_samples,
        noise_sigma=q.noise_sigma,
        x_coupling=q.x_coupling,
    )
    run_cfg = dataclasses.replace(cfg.run, seed=seed)
    sink = diagnostics.MetricsCollector(
        ground_truth=truth, compute_inner=True, stride=cfg.log_stride
    )
    result = fedengine.run(run_cfg, oracles, sink=sink)
    final = result.records[-1] if result.records else None
    metrics = {"final_grad_norm_sq": final.grad_norm_sq if final else float("nan")}
    meta = _metadata(cfg, seed, {"final_metrics": metrics, "distribution": "synthetic"})
    diagnostics.write_log(result.records, out / f"run_seed{seed}.jsonl", meta)
    diagnostics.export_csv(result.records, out / f"run_seed{seed}.csv")
    return metrics, [(f"seed {seed}", result.records)]


def _load_fairfl_data(cfg: ExperimentConfig, seed: int):
    f = cfg.fairfl
    data_seed = f.problem_seed if f.problem_seed is not None else seed
    if f.source == "synthetic":
        full = problems.synthetic_group_shift_dataset(
            n=f.synthetic_n,
            rng=RngStream(data_seed, stream_id=50_000),
            minority_frac=f.minority_frac,
        )
    else:
        schema = DatasetSchema(
            label_column=f.label_column,
            group_column=f.group_column,
            categorical=f.categorical,
            standardize=f.standardize,
        )
        full = load_csv(f.csv_path, schema)
    split_rng = RngStream(data_seed, stream_id=50_001)
    train, test = split_train_test(full, split_rng, ratio=0.7)
    spec = problems.build_fairfl_spec(
        train,
        num_clients=cfg.run.num_clients,
        distribution=f.distribution,
        per_group_validation=f.per_group_validation,
        rng=split_rng,
        l2_reg=f.l2_reg,
        weight_floor=f.weight_floor,
    )
    return spec, train, test


def _fairfl_seed_run(cfg: ExperimentConfig, seed: int, out: Path):
    f = cfg.fairfl
    spec, train, test = _load_fairfl_data(cfg, seed)
    run_cfg = dataclasses.replace(cfg.run, seed=seed)

    if cfg.run.algorithm == "fedavg":
        # Baseline: uniform group weights, single weighted-averaging stage.
        oracles = [
            problems.WeightedLogisticOracle(
                spec.clients[m].train, np.ones(spec.group_count), spec.l2_reg
            )
            for m in range(spec.num_clients)
        ]
        result = fedengine.run(run_cfg, oracles, x0=np.zeros(spec.feature_dim))
        model = np.mean([c.x for c in result.clients], axis=0)
        weights = np.ones(spec.group_count)
        stage_records = [("fedavg", result.records)]
        records_for_log = result.records
    else:
        two_stage = problems.two_stage_train(
            spec,
            run_cfg,
            stage2_steps=f.stage2_steps,
            stage2_lr=f.stage2_lr,
        )
        model = two_stage.model
        weights = two_stage.weights
        stage_records = [
            ("stage1", two_stage.stage1.records),
            ("stage2", two_stage.stage2.records),
        ]
        records_for_log = two_stage.stage1.records

    metrics = {
        "test_accuracy": diagnostics.accuracy(model, test),
        "train_eqopp": diagnostics.eqopp(model, train),
        "test_eqopp": diagnostics.eqopp(model, test),
        "group_weights": [float(w) for w in weights],
    }
    meta = _metadata(cfg, seed, {"final_metrics": metrics, "distribution": f.distribution})
    diagnostics.write_log(records_for_log, out / f"run_seed{seed}.jsonl", meta)
    diagnostics.export_csv(records_for_log, out / f"run_seed{seed}.csv")
    for name, records in stage_records[1:]:
        diagnostics.write_log(records, out / f"run_seed{seed}_{name}.jsonl", meta)
    return metrics, stage_records


def _aggregate(cfg: ExperimentConfig, per_seed: list[dict]) -> SummaryTable:
    method = cfg.run.algorithm
    distribution = "synthetic" if cfg.problem == "quadratic" else cfg.fairfl.distribution
    if cfg.problem == "quadratic":
        metric_names = ["final_grad_norm_sq"]
    else:
        metric_names = ["test_accuracy", "train_eqopp", "test_eqopp"]
    rows = []
    for name in metric_names:
        values = [m[name] for m in per_seed if name in m]
        if not values:
            continue
        mean = statistics.fmean(values)
        std = statistics.pstdev(values) if len(values) > 1 else 0.0
        rows.append(
            SummaryRow(
                method=method,
                distribution=distribution,
                metric=name,
                mean=mean,
                std=std,
                n_seeds=len(values),
            )
        )
    return SummaryTable(rows=rows)


def run_experiment(cfg: ExperimentConfig) -> SummaryTable:
    """Execute one run per seed, write logs and the summary, return the table.

    Per-seed failures are recorded (the summary marks incomplete seeds via
    n_seeds) rather than aborting the whole sweep.
    """
    out = Path(os.environ.get(OUTPUT_DIR_ENV, cfg.output_dir))
    out.mkdir(parents=True, exist_ok=True)
    runner = _quadratic_seed_run if cfg.problem == "quadratic" else _fairfl_seed_run

    per_seed: list[dict] = []
    sweep_curves = []
    failures: list[tuple[int, str]] = []

    def one_seed(seed: int):
        return runner(cfg, seed, out)

    if cfg.parallel_seeds and len(cfg.seeds) > 1:
        with ThreadPoolExecutor(max_workers=min(4, len(cfg.seeds))) as pool:
            outcomes = list(pool.map(one_seed, cfg.seeds))
        for seed, (metrics, curves) in zip(cfg.seeds, outcomes):
            per_seed.append(metrics)
            sweep_curves.extend(curves)
    else:
        for seed in cfg.seeds:
            try:
                metrics, curves = one_seed(seed)
            except Exception as exc:  # noqa: BLE001 - record and continue the sweep
                failures.append((seed, str(exc)))
                continue
            per_seed.append(metrics)
            sweep_curves.extend(curves)

    table = _aggregate(cfg, per_seed)
    emit_summary(table, out / "summary.csv")
    if failures:
        with open(out / "failures.txt", "w", encoding="utf-8") as fh:
            for seed, msg in failures:
                fh.write(f"seed {seed}: {msg}\n")
    if cfg.figures:
        fig_dir = out / "figures"
        fig_dir.mkdir(exist_ok=True)
        if sweep_curves:
            report.render_sweep_figure(
                sweep_curves, fig_dir / "sweep.png", title=f"{cfg.problem} / {cfg.run.algorithm}"
            )
        if table.rows:
            report.render_summary_figure(table.rows, fig_dir / "summary.png")
    return table


def emit_summary(table: SummaryTable, path) -> None:
    """CSV with fixed, documented column order."""
    if not table.rows:
        raise ValueError("emit_summary: empty table")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("method,distribution,metric,mean,std,n_seeds\n")
        for r in table.rows:
            fh.write(f"{r.method},{r.distribution},{r.metric},{r.mean!r},{r.std!r},{r.n_seeds}\n")


def read_summary(path) -> SummaryTable:
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header != list(("method", "distribution", "metric", "mean", "std", "n_seeds")):
            raise ValueError(f"{path}: unexpected summary header {header}")
        for line in fh:
            if not line.strip():
                continue
            method, distribution, metric, mean, std, n_seeds = line.strip().split(",")
            rows.append(
                SummaryRow(method, distribution, metric, float(mean), float(std), int(n_seeds))
            )
    return SummaryTable(rows=rows)


def summarize_directory(directory) -> SummaryTable:
    """Rebuild the summary table (and figures) from the logs in a directory."""
    directory = Path(directory)
    logs = sorted(directory.glob("run_seed*.jsonl"))
    logs = [p for p in logs if "_stage" not in p.stem]
    if not logs:
        raise FileNotFoundError(f"no run logs found under {directory}")
    per_seed = []
    curves = []
    meta0 = None
    for path in logs:
        meta, records = diagnostics.read_log(path)
        if meta0 is None:
            meta0 = meta
        per_seed.append(meta.get("final_metrics", {}))
        curves.append((f"seed {meta.get('seed')}", records))

    method = meta0["run_config"]["algorithm"]
    distribution = meta0.get("distribution", "synthetic")
    metric_names = sorted(
        {k for m in per_seed for k, v in m.items() if isinstance(v, (int, float))}
    )
    rows = []
    for name in metric_names:
        values = [m[name] for m in per_seed if name in m]
        mean = statistics.fmean(values)
        std = statistics.pstdev(values) if len(values) > 1 else 0.0
        rows.append(SummaryRow(method, distribution, name, mean, std, len(values)))
    table = SummaryTable(rows=rows)
    emit_summary(table, directory / "summary.csv")
    fig_dir = directory / "figures"
    fig_dir.mkdir(exist_ok=True)
    report.render_sweep_figure(curves, fig_dir / "sweep.png", title=f"{method}")
    if table.rows:
        report.render_summary_figure(table.rows, fig_dir / "summary.png")
    return table


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _print_table(table: SummaryTable) -> None:
    print(f"{'method':<12} {'distribution':<12} {'metric':<22} {'mean':>12} {'std':>12} {'n':>4}")
    for r in table.rows:
        print(
            f"{r.method:<12} {r.distribution:<12} {r.metric:<22} "
            f"{r.mean:>12.6g} {r.std:>12.6g} {r.n_seeds:>4}"
        )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fedbilevel", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run the experiment described by a config file")
    p_run.add_argument("config")
    p_val = sub.add_parser("validate", help="parse and validate a config file")
    p_val.add_argument("config")
    p_sum = sub.add_parser("summarize", help="aggregate logs from an output directory")
    p_sum.add_argument("directory")
    args = parser.parse_args(argv)

    try:
        if args.command == "validate":
            cfg = parse_config(args.config)
            print(
                f"ok: {cfg.problem} / {cfg.run.algorithm}, {len(cfg.seeds)} seed(s), "
                f"T={cfg.run.total_steps}, M={cfg.run.num_clients}, I={cfg.run.sync_interval}"
            )
            return EXIT_OK
        if args.command == "run":
            cfg = parse_config(args.config)
            table = run_experiment(cfg)
            _print_table(table)
            return EXIT_OK
        if args.command == "summarize":
            table = summarize_directory(args.directory)
            _print_table(table)
            return EXIT_OK
    except ConfigParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (ConfigError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
