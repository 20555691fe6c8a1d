"""Configuration-driven command line: dataset in, metrics CSV out.

Three subcommands share one JSON config document::

    sketchysgd run config.json       # optimize, write CSV metrics + manifest
    sketchysgd diagnose config.json  # spectrum reports before/after preconditioning
    sketchysgd validate config.json  # schema check, print the resolved config

Exit codes: 0 ok, 2 config error, 3 runtime or divergence error, 4 dense
diagnostic caps exceeded.  The ``SKETCHYSGD_NUM_THREADS`` environment
variable sizes the thread pool that runs independent (optimizer, seed)
jobs; each job owns its generator and writes its own files, so results do
not depend on the pool size.

Config schema (JSON object)::

    {
      "dataset": {"path": "data.svm[.gz]", "format": "libsvm", "num_features": 123},
      "task": "ridge" | "logistic",
      "preprocessing": [                      # optional, applied in order
        {"normalize_rows": {}},
        {"standardize": {}},                  # train statistics after a split
        {"random_features": {"kind": "rff-cosine", "dim": 1000,
                              "bandwidth": 1.0, "seed": 0}},
        {"split": {"fraction": 0.8, "seed": 0}}
      ],
      "l2": "auto" | number,                  # auto = 1e-2 / n_train
      "optimizers": [{"name": "sketchysgd", ...hyperparameters or "auto"}],
      "seeds": [0, 1, 2],
      "max_passes": 40,
      "eval_every": 1.0,
      "output_dir": "results",
      "save_iterates": false,
      "diagnose": {"top_m": 100, "betas": [0.01], "compute_tau": false,
                    "iterates": ["results/sketchysgd_seed0_iterate.npy"]}
    }

Every number in an output CSV is reproducible from the manifest plus the
dataset file alone; two runs of one config differ only in the
``wall_seconds`` column.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import math
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    Dataset,
    FeatureMap,
    LibsvmParseError,
    load_libsvm,
    normalize_rows,
    random_features,
    split,
    standardization_stats,
    standardize,
)
from .diagnostics import conditioning_report
from .linalg import DiagnosticCapError
from .optimizers import (
    AUTO,
    DivergenceError,
    MetricsRecord,
    OptimizerConfig,
    resolve_config,
    sgd_run,
    sketchysgd_run,
    sketchysgd_theoretical_run,
    svrg_run,
)
from .oracles import ProblemOracle

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_CAPS = 4

OPTIMIZER_NAMES = ("sketchysgd", "sketchysgd-theoretical", "sgd", "svrg")

_SKETCHY_KEYS = {
    "name", "label", "rank", "rho", "grad_batch_size", "hess_batch_size",
    "update_freq", "lr_scale", "power_iters", "learning_rate", "stage_length",
}
_FIRST_ORDER_KEYS = {"name", "label", "learning_rate", "grad_batch_size"}


class ConfigError(ValueError):
    """Invalid run configuration; ``problems`` lists every violation."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


# ---------------------------------------------------------------------------
# validation


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _validate_preprocessing(steps, problems):
    if not isinstance(steps, list):
        problems.append("preprocessing: must be a list of single-key objects")
        return
    seen_split = False
    for i, step in enumerate(steps):
        tag = f"preprocessing[{i}]"
        if not isinstance(step, dict) or len(step) != 1:
            problems.append(f"{tag}: each step must be an object with exactly one key")
            continue
        name, args = next(iter(step.items()))
        if not isinstance(args, dict):
            problems.append(f"{tag}: step arguments must be an object")
            continue
        if name in ("normalize_rows", "standardize"):
            if args:
                problems.append(f"{tag}: {name} takes no arguments")
        elif name == "random_features":
            kind = args.get("kind")
            if kind not in ("rff-cosine", "relu"):
                problems.append(f"{tag}: random_features.kind must be 'rff-cosine' or 'relu'")
            if not isinstance(args.get("dim"), int) or args.get("dim", 0) < 1:
                problems.append(f"{tag}: random_features.dim must be a positive integer")
            if "bandwidth" in args and not (_is_num(args["bandwidth"]) and args["bandwidth"] > 0):
                problems.append(f"{tag}: random_features.bandwidth must be a positive number")
            if not isinstance(args.get("seed", 0), int):
                problems.append(f"{tag}: random_features.seed must be an integer")
            extra = set(args) - {"kind", "dim", "bandwidth", "seed"}
            if extra:
                problems.append(f"{tag}: unknown random_features keys {sorted(extra)}")
        elif name == "split":
            frac = args.get("fraction")
            if not (_is_num(frac) and 0.0 < frac < 1.0):
                problems.append(f"{tag}: split.fraction must lie strictly between 0 and 1")
            if not isinstance(args.get("seed", 0), int):
                problems.append(f"{tag}: split.seed must be an integer")
            extra = set(args) - {"fraction", "seed"}
            if extra:
                problems.append(f"{tag}: unknown split keys {sorted(extra)}")
            if seen_split:
                problems.append(f"{tag}: only one split step is allowed")
            seen_split = True
        else:
            problems.append(f"{tag}: unknown step {name!r}")


def _validate_optimizer(spec, i, problems):
    tag = f"optimizers[{i}]"
    if not isinstance(spec, dict):
        problems.append(f"{tag}: must be an object")
        return
    name = spec.get("name")
    if name not in OPTIMIZER_NAMES:
        problems.append(f"{tag}: name must be one of {list(OPTIMIZER_NAMES)}, got {name!r}")
        return
    allowed = _SKETCHY_KEYS if name.startswith("sketchysgd") else _FIRST_ORDER_KEYS
    extra = set(spec) - allowed
    if extra:
        problems.append(f"{tag}: unknown keys for {name}: {sorted(extra)}")
    for key in ("rank", "grad_batch_size", "hess_batch_size", "power_iters", "stage_length"):
        if key in spec and spec[key] != AUTO and (not isinstance(spec[key], int) or spec[key] < 1):
            problems.append(f"{tag}: {key} must be a positive integer or 'auto'")
    for key in ("rho", "lr_scale"):
        if key in spec and spec[key] != AUTO and not (_is_num(spec[key]) and spec[key] > 0):
            problems.append(f"{tag}: {key} must be a positive number or 'auto'")
    if "update_freq" in spec:
        u = spec["update_freq"]
        ok = u in (AUTO, "inf") or (_is_num(u) and u >= 1)
        if not ok:
            problems.append(f"{tag}: update_freq must be >= 1, 'inf', or 'auto'")
    if "learning_rate" in spec and spec["learning_rate"] is not None:
        lr = spec["learning_rate"]
        if not (lr == AUTO or (_is_num(lr) and lr > 0)):
            problems.append(f"{tag}: learning_rate must be a positive number or 'auto'")
    if "label" in spec and not isinstance(spec["label"], str):
        problems.append(f"{tag}: label must be a string")


def validate_config(config: dict, base_dir: Path) -> list[str]:
    """Collect every schema violation; an empty list means the config is valid."""
    problems: list[str] = []
    if not isinstance(config, dict):
        return ["config: top level must be a JSON object"]

    dataset = config.get("dataset")
    if not isinstance(dataset, dict):
        problems.append("dataset: required object with a 'path' field")
    else:
        path = dataset.get("path")
        if not isinstance(path, str) or not path:
            problems.append("dataset.path: required string")
        else:
            resolved = (base_dir / path).expanduser()
            if not resolved.exists():
                problems.append(f"dataset.path: file not found: {resolved}")
        if dataset.get("format", "libsvm") != "libsvm":
            problems.append("dataset.format: only 'libsvm' is supported")
        if "num_features" in dataset and (
            not isinstance(dataset["num_features"], int) or dataset["num_features"] < 1
        ):
            problems.append("dataset.num_features: must be a positive integer")
        extra = set(dataset) - {"path", "format", "num_features"}
        if extra:
            problems.append(f"dataset: unknown keys {sorted(extra)}")

    if config.get("task") not in ("ridge", "logistic"):
        problems.append("task: required, 'ridge' or 'logistic'")

    if "preprocessing" in config:
        _validate_preprocessing(config["preprocessing"], problems)

    l2 = config.get("l2", AUTO)
    if not (l2 == AUTO or (_is_num(l2) and l2 >= 0)):
        problems.append("l2: must be a nonnegative number or 'auto'")

    optimizers = config.get("optimizers")
    if not isinstance(optimizers, list) or not optimizers:
        problems.append("optimizers: required nonempty list")
    else:
        labels = []
        for i, spec in enumerate(optimizers):
            _validate_optimizer(spec, i, problems)
            if isinstance(spec, dict):
                labels.append(spec.get("label", spec.get("name")))
        dup = {x for x in labels if labels.count(x) > 1}
        if dup:
            problems.append(
                f"optimizers: duplicate labels {sorted(dup)}; give each a unique 'label'"
            )

    seeds = config.get("seeds")
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        problems.append("seeds: required nonempty list of integers")

    if "max_passes" in config and not (_is_num(config["max_passes"]) and config["max_passes"] > 0):
        problems.append("max_passes: must be a positive number")
    if "eval_every" in config and not (_is_num(config["eval_every"]) and config["eval_every"] > 0):
        problems.append("eval_every: must be a positive number")
    if "output_dir" in config and not isinstance(config["output_dir"], str):
        problems.append("output_dir: must be a string")
    if "save_iterates" in config and not isinstance(config["save_iterates"], bool):
        problems.append("save_iterates: must be a boolean")

    if "diagnose" in config:
        diag = config["diagnose"]
        if not isinstance(diag, dict):
            problems.append("diagnose: must be an object")
        else:
            if "top_m" in diag and (not isinstance(diag["top_m"], int) or diag["top_m"] < 1):
                problems.append("diagnose.top_m: must be a positive integer")
            if "betas" in diag and not (
                isinstance(diag["betas"], list) and all(_is_num(b) and b > 0 for b in diag["betas"])
            ):
                problems.append("diagnose.betas: must be a list of positive numbers")
            if "compute_tau" in diag and not isinstance(diag["compute_tau"], bool):
                problems.append("diagnose.compute_tau: must be a boolean")
            if "iterates" in diag:
                if not isinstance(diag["iterates"], list):
                    problems.append("diagnose.iterates: must be a list of paths")
                else:
                    for q in diag["iterates"]:
                        if not isinstance(q, str) or not (base_dir / q).expanduser().exists():
                            problems.append(f"diagnose.iterates: file not found: {q}")
            extra = set(diag) - {"top_m", "betas", "compute_tau", "iterates"}
            if extra:
                problems.append(f"diagnose: unknown keys {sorted(extra)}")

    known = {
        "dataset", "task", "preprocessing", "l2", "optimizers", "seeds",
        "max_passes", "eval_every", "output_dir", "save_iterates", "diagnose",
    }
    extra = set(config) - known
    if extra:
        problems.append(f"config: unknown top-level keys {sorted(extra)}")
    return problems


# ---------------------------------------------------------------------------
# loading and resolution


def _apply_preprocessing(ds: Dataset, steps) -> tuple[Dataset, Dataset | None]:
    train, test = ds, None
    for step in steps:
        name, args = next(iter(step.items()))
        if name == "normalize_rows":
            train = normalize_rows(train)
            test = normalize_rows(test) if test is not None else None
        elif name == "standardize":
            stats = standardization_stats(train)
            train = standardize(train, stats)
            test = standardize(test, stats) if test is not None else None
        elif name == "random_features":
            fmap = FeatureMap.create(
                kind=args["kind"],
                dim=args["dim"],
                input_dim=train.p,
                seed=args.get("seed", 0),
                bandwidth=args.get("bandwidth", 1.0),
            )
            train = random_features(train, fmap)
            test = random_features(test, fmap) if test is not None else None
        elif name == "split":
            if test is not None:
                raise ConfigError(["preprocessing: dataset is already split"])
            train, test = split(train, args["fraction"], args.get("seed", 0))
    return train, test


def load_problem(config: dict, base_dir: Path):
    """Load the dataset, run the preprocessing chain, and build the oracle."""
    spec = config["dataset"]
    path = (base_dir / spec["path"]).expanduser()
    ds = load_libsvm(path, num_features=spec.get("num_features"))
    train, test = _apply_preprocessing(ds, config.get("preprocessing", []))
    l2 = config.get("l2", AUTO)
    if l2 == AUTO:
        l2 = 1e-2 / train.n
    oracle = ProblemOracle(train, config["task"], float(l2))
    return oracle, test, path


def _optimizer_config(spec: dict, defaults: dict) -> OptimizerConfig:
    mode = "theoretical" if spec["name"] == "sketchysgd-theoretical" else "practical"
    lr = spec.get("learning_rate", AUTO if mode == "theoretical" else None)
    return OptimizerConfig(
        rank=spec.get("rank", 10),
        rho=spec.get("rho", AUTO),
        grad_batch_size=spec.get("grad_batch_size", AUTO),
        hess_batch_size=spec.get("hess_batch_size", AUTO),
        update_freq=math.inf if spec.get("update_freq") == "inf" else spec.get("update_freq", AUTO),
        lr_scale=spec.get("lr_scale", 0.5),
        power_iters=spec.get("power_iters", 10),
        max_passes=defaults["max_passes"],
        seed=defaults["seed"],
        mode=mode,
        stage_length=spec.get("stage_length", AUTO),
        learning_rate=lr,
    )


def _jsonable(value):
    if isinstance(value, float):
        if math.isinf(value):
            return "inf"
        return value
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return _jsonable(value.item())
    return value


def resolve_job_config(spec: dict, oracle: ProblemOracle, max_passes, eval_every, seed) -> dict:
    """Fully materialized hyperparameters for one (optimizer, seed) job."""
    name = spec["name"]
    resolved = {"name": name, "label": spec.get("label", name), "seed": seed}
    if name in ("sgd", "svrg"):
        lr = spec.get("learning_rate", AUTO)
        if lr in (AUTO, None):
            lr = oracle.sgd_default_learning_rate()
        resolved.update(
            learning_rate=float(lr),
            grad_batch_size=min(int(spec.get("grad_batch_size", 256)), oracle.n),
            max_passes=max_passes,
            eval_every=eval_every,
        )
    else:
        cfg = resolve_config(_optimizer_config(spec, {"max_passes": max_passes, "seed": seed}), oracle)
        resolved.update(asdict(cfg))
        resolved["eval_every"] = eval_every
    return _jsonable(resolved)


# ---------------------------------------------------------------------------
# metrics serialization


def records_to_csv(records: list[MetricsRecord]) -> str:
    """Shortest-round-trip CSV; absent metrics are empty cells."""

    def cell(x):
        return "" if x is None else repr(float(x))

    lines = ["pass,wall_seconds,train_loss,test_loss,train_acc,test_acc"]
    for r in records:
        lines.append(
            ",".join(
                [repr(float(r.passes)), repr(float(r.wall_seconds)), cell(r.train_loss),
                 cell(r.test_loss), cell(r.train_acc), cell(r.test_acc)]
            )
        )
    return "\n".join(lines) + "\n"


def _run_job(spec, seed, oracle, test_data, max_passes, eval_every):
    name = spec["name"]
    if name == "sgd":
        lr = spec.get("learning_rate", AUTO)
        lr = None if lr in (AUTO, None) else float(lr)
        return sgd_run(
            oracle, learning_rate=lr, grad_batch_size=spec.get("grad_batch_size", 256),
            max_passes=max_passes, seed=seed, test_data=test_data, eval_every=eval_every,
        )
    if name == "svrg":
        lr = spec.get("learning_rate", AUTO)
        lr = None if lr in (AUTO, None) else float(lr)
        return svrg_run(
            oracle, learning_rate=lr, grad_batch_size=spec.get("grad_batch_size", 256),
            max_passes=max_passes, seed=seed, test_data=test_data, eval_every=eval_every,
        )
    cfg = _optimizer_config(spec, {"max_passes": max_passes, "seed": seed})
    if name == "sketchysgd-theoretical":
        return sketchysgd_theoretical_run(oracle, cfg, test_data=test_data)
    return sketchysgd_run(oracle, cfg, test_data=test_data, eval_every=eval_every)


# ---------------------------------------------------------------------------
# commands


def _load_config(path: str):
    config_path = Path(path)
    try:
        text = config_path.read_text()
    except OSError as exc:
        raise ConfigError([f"config: cannot read {path}: {exc}"]) from exc
    try:
        config = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config: invalid JSON: {exc}"]) from exc
    problems = validate_config(config, config_path.parent)
    if problems:
        raise ConfigError(problems)
    return config, config_path.parent


def _apply_overrides(config: dict, args) -> dict:
    config = dict(config)
    if args.output_dir is not None:
        config["output_dir"] = args.output_dir
    if args.max_passes is not None:
        if args.max_passes <= 0:
            raise ConfigError(["--max-passes: must be positive"])
        config["max_passes"] = args.max_passes
    if args.seed is not None:
        config["seeds"] = [args.seed]
    return config


def cmd_validate(args) -> int:
    config, base_dir = _load_config(args.config)
    config = _apply_overrides(config, args)
    oracle, test, _ = load_problem(config, base_dir)
    max_passes = float(config.get("max_passes", 40.0))
    eval_every = float(config.get("eval_every", 1.0))
    resolved = {
        "task": oracle.task,
        "n_train": oracle.n,
        "n_test": test.n if test is not None else 0,
        "p": oracle.p,
        "l2": oracle.l2,
        "smoothness_upper_bound": oracle.smoothness_upper_bound,
        "max_passes": max_passes,
        "eval_every": eval_every,
        "seeds": config["seeds"],
        "optimizers": [
            resolve_job_config(spec, oracle, max_passes, eval_every, config["seeds"][0])
            for spec in config["optimizers"]
        ],
    }
    print(json.dumps(_jsonable(resolved), indent=2))
    return EXIT_OK


def cmd_run(args) -> int:
    config, base_dir = _load_config(args.config)
    config = _apply_overrides(config, args)
    oracle, test, dataset_path = load_problem(config, base_dir)
    max_passes = float(config.get("max_passes", 40.0))
    eval_every = float(config.get("eval_every", 1.0))
    out_dir = Path(config.get("output_dir", "results"))
    out_dir.mkdir(parents=True, exist_ok=True)

    jobs = [
        (spec, seed)
        for spec in config["optimizers"]
        for seed in config["seeds"]
    ]

    def execute(job):
        spec, seed = job
        label = spec.get("label", spec["name"])
        base = out_dir / f"{label}_seed{seed}"
        try:
            result = _run_job(spec, seed, oracle, test, max_passes, eval_every)
        except DivergenceError as exc:
            Path(f"{base}.csv.partial").write_text(records_to_csv(exc.records))
            return label, seed, None, f"{label} seed {seed}: {exc}"
        Path(f"{base}.csv").write_text(records_to_csv(result.records))
        if config.get("save_iterates", False):
            np.save(f"{base}_iterate.npy", result.w)
        return label, seed, result, None

    workers = max(1, int(os.environ.get("SKETCHYSGD_NUM_THREADS", "1")))
    if workers > 1 and len(jobs) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(execute, jobs))
    else:
        outcomes = [execute(job) for job in jobs]

    digest = hashlib.sha256(Path(dataset_path).read_bytes()).hexdigest()
    manifest = {
        "package_version": __version__,
        "dataset_path": str(dataset_path),
        "dataset_sha256": digest,
        "task": oracle.task,
        "n_train": oracle.n,
        "n_test": test.n if test is not None else 0,
        "p": oracle.p,
        "l2": oracle.l2,
        "config": _jsonable(config),
        "jobs": [
            {
                "file": f"{label}_seed{seed}.csv" + ("" if err is None else ".partial"),
                "resolved": resolve_job_config(spec, oracle, max_passes, eval_every, seed),
                "status": "ok" if err is None else "diverged",
                "passes": result.passes if result is not None else None,
            }
            for (spec, seed), (label, _s, result, err) in zip(jobs, outcomes)
        ],
    }
    (out_dir / "manifest.json").write_text(json.dumps(_jsonable(manifest), indent=2) + "\n")

    failures = [err for (_l, _s, _r, err) in outcomes if err is not None]
    for err in failures:
        print(err, file=sys.stderr)
    return EXIT_RUNTIME if failures else EXIT_OK


def cmd_diagnose(args) -> int:
    config, base_dir = _load_config(args.config)
    config = _apply_overrides(config, args)
    oracle, _test, _path = load_problem(config, base_dir)
    diag = config.get("diagnose", {})
    out_dir = Path(config.get("output_dir", "results"))
    out_dir.mkdir(parents=True, exist_ok=True)

    sketchy = next(
        (s for s in config["optimizers"] if s["name"].startswith("sketchysgd")), {"name": "sketchysgd"}
    )
    cfg = _optimizer_config(
        sketchy, {"max_passes": float(config.get("max_passes", 40.0)), "seed": config["seeds"][0]}
    )

    points = [("initial", np.zeros(oracle.p))]
    for q in diag.get("iterates", []):
        path = (base_dir / q).expanduser()
        points.append((Path(q).stem, np.load(path)))

    for tag, w in points:
        report = conditioning_report(
            oracle,
            w,
            cfg,
            top_m=diag.get("top_m", 100),
            compute_tau=diag.get("compute_tau", False),
            d_eff_betas=tuple(diag.get("betas", ())),
        )
        (out_dir / f"spectrum_{tag}.csv").write_text(report.to_csv())
        (out_dir / f"spectrum_{tag}.json").write_text(report.to_json() + "\n")
        print(f"spectrum_{tag}: kappa {report.kappa_raw:.4g} -> {report.kappa_precond:.4g}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sketchysgd",
        description="Preconditioned stochastic optimization from a JSON config.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("run", cmd_run), ("diagnose", cmd_diagnose), ("validate", cmd_validate)):
        cmd = sub.add_parser(name)
        cmd.add_argument("config", help="path to the JSON config")
        cmd.add_argument("--output-dir", default=None, help="override the config's output_dir")
        cmd.add_argument("--max-passes", type=float, default=None, help="override max_passes")
        cmd.add_argument("--seed", type=int, default=None, help="run a single seed")
        cmd.set_defaults(fn=fn)
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except LibsvmParseError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DiagnosticCapError as exc:
        print(f"caps exceeded: {exc}", file=sys.stderr)
        return EXIT_CAPS
    except DivergenceError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
