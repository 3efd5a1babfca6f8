"""Command-line entry point: ``varnet <command> [options]``.

Every command builds one JSON config document from ``--config`` (if given)
overlaid with explicit flags, validates it against a strict schema before any
work, and writes a ``manifest.json`` next to its outputs recording the config,
its hash, the seed and library versions. Re-running a command with the
manifest's config reproduces its artifacts bit for bit.

Exit codes: 0 success, 1 runtime failure, 2 bad arguments or config.
``VARNET_THREADS`` caps BLAS/OpenMP threads when set before numpy is loaded.
"""

from __future__ import annotations

import os
import sys

_THREADS = os.environ.get("VARNET_THREADS")
if _THREADS and _THREADS.isdigit() and int(_THREADS) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _THREADS

import argparse
import hashlib
import json
import platform
from pathlib import Path

import jsonschema
import numpy as np
import scipy

from . import __version__
from .datasets import (
    DataError,
    Dataset,
    build_calibration_dataset,
    gen_seasonal_temperature,
    gen_toy_sine,
    gen_two_moons_4d,
    load_calibration_csv,
    load_csv,
    write_csv,
)
from .evaluation import (
    ActiveLearningConfig,
    gradient_sparsity_study,
    point_log_likelihoods,
    run_active_learning,
)
from .model import load_snapshot, save_snapshot
from .sampler import LocalityConfig
from .training import FittedRegressor, TrainConfig, TrainingDiverged, fit_regressor
from .vae import VaeTrainConfig, square_grid, two_moon_comparison

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


# -- schemas -------------------------------------------------------------------

_POS_INT = {"type": "integer", "minimum": 1}
_LOCALITY = {
    "type": "object",
    "properties": {"psu": _POS_INT, "ssu": _POS_INT, "k": {"anyOf": [_POS_INT, {"type": "null"}]}},
    "required": ["psu", "ssu"],
    "additionalProperties": False,
}
_BATCH = {"enum": ["locality", "uniform"]}
_LR = {"type": "number", "exclusiveMinimum": 0}
TRAIN_SCHEMA = {
    "type": "object",
    "properties": {
        "total_iters": {"type": "integer", "minimum": 0},
        "warmup_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "alternation_block": _POS_INT,
        "lr": _LR,
        "mean_lr": {"anyOf": [_LR, {"type": "null"}]},
        "var_lr": {"anyOf": [_LR, {"type": "null"}]},
        "batch": _BATCH,
        "mean_batch": {"anyOf": [_BATCH, {"type": "null"}]},
        "var_batch": {"anyOf": [_BATCH, {"type": "null"}]},
        "batch_size": _POS_INT,
        "mean_locality": _LOCALITY,
        "var_locality": _LOCALITY,
        "hidden": _POS_INT,
        "gamma_penalty": {"type": "number", "minimum": 0},
        "seed": {"type": "integer"},
    },
    "additionalProperties": False,
}
VAE_TRAIN_SCHEMA = {
    "type": "object",
    "properties": {
        "iters": _POS_INT,
        "lr": _LR,
        "batch": _POS_INT,
        "kl_warmup_iters": {"anyOf": [_POS_INT, {"type": "null"}]},
        "warmup_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "refresh_period": _POS_INT,
        "hidden": _POS_INT,
        "latent_dim": _POS_INT,
        "var_locality": _LOCALITY,
        "gamma_penalty": {"type": "number", "minimum": 0},
        "seed": {"type": "integer"},
    },
    "additionalProperties": False,
}
_DATA = {"type": "string", "minLength": 1}
_FRACTION = {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}
_COMMON = {"seed": {"type": "integer"}, "out_dir": _DATA}


def _schema(props: dict, required: list[str]) -> dict:
    return {"type": "object", "properties": {**_COMMON, **props}, "required": required, "additionalProperties": False}


SCHEMAS = {
    "gen-data": _schema(
        {
            "generator": {"enum": ["toy-sine", "two-moons-4d", "seasonal"]},
            "n": _POS_INT,
            "out": _DATA,
            "n_years": {"type": "integer", "minimum": 2},
            "day_step": _POS_INT,
        },
        ["generator", "out", "seed"],
    ),
    "train": _schema(
        {
            "data": _DATA,
            "model": {"enum": ["nn", "combined"]},
            "target_column": {"type": "integer"},
            "calibration": {"type": "boolean"},
            "train": TRAIN_SCHEMA,
        },
        ["data", "model", "out_dir", "seed"],
    ),
    "eval": _schema(
        {"snapshot": _DATA, "data": _DATA, "target_column": {"type": "integer"}},
        ["snapshot", "data", "out_dir"],
    ),
    "active-learn": _schema(
        {
            "data": _DATA,
            "model": {"enum": ["nn", "combined"]},
            "target_column": {"type": "integer"},
            "rounds": _POS_INT,
            "acquisition_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "repeats": _POS_INT,
            "fractions": {"type": "array", "items": _FRACTION, "minItems": 3, "maxItems": 3},
            "train": TRAIN_SCHEMA,
        },
        ["data", "model", "out_dir", "seed"],
    ),
    "grad-study": _schema(
        {
            "data": _DATA,
            "target_column": {"type": "integer"},
            "warmup_iters": {"type": "integer", "minimum": 0},
            "study_iters": _POS_INT,
            "mean_locality": _LOCALITY,
            "var_locality": _LOCALITY,
            "train": TRAIN_SCHEMA,
        },
        ["data", "out_dir", "seed"],
    ),
    "vae": _schema(
        {
            "n_train": _POS_INT,
            "n_samples": _POS_INT,
            "grid_lo": {"type": "number"},
            "grid_hi": {"type": "number"},
            "grid_n": {"type": "integer", "minimum": 2},
            "far": {"type": "number", "exclusiveMinimum": 0},
            "models": {"type": "array", "items": {"enum": ["baseline", "comb"]}, "minItems": 1, "uniqueItems": True},
            "train": VAE_TRAIN_SCHEMA,
        },
        ["out_dir", "seed"],
    ),
}

DEFAULTS = {
    "gen-data": {"n": 500, "n_years": 130, "day_step": 1},
    "train": {"target_column": -1, "calibration": False, "train": {}},
    "eval": {"target_column": -1},
    "active-learn": {"target_column": -1, "train": {}},
    "grad-study": {"target_column": -1, "warmup_iters": 2500, "study_iters": 1000, "train": {}},
    "vae": {
        "n_train": 500,
        "n_samples": 5000,
        "grid_lo": -8.0,
        "grid_hi": 8.0,
        "grid_n": 81,
        "far": 3.0,
        "models": ["baseline", "comb"],
        "train": {},
    },
}


def validate_config(command: str, doc: dict) -> dict:
    """Fill defaults and validate; raises :class:`ConfigError` with every schema violation listed."""
    full = {**DEFAULTS.get(command, {}), **doc}
    errors = sorted(jsonschema.Draft202012Validator(SCHEMAS[command]).iter_errors(full), key=lambda e: list(e.path))
    if errors:
        lines = [f"  {'/'.join(map(str, e.path)) or '<root>'}: {e.message}" for e in errors]
        raise ConfigError(f"invalid {command} config:\n" + "\n".join(lines))
    try:
        if "train" in full and command != "vae":
            TrainConfig.from_dict(full["train"])
        if command == "vae":
            VaeTrainConfig(**full["train"])
        if command == "active-learn":
            ActiveLearningConfig(**{k: full[k] for k in ("rounds", "acquisition_fraction", "repeats", "fractions") if k in full})
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid {command} config: {err}") from None
    return full


def config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(path: Path, command: str, doc: dict, outputs: list[Path]) -> None:
    manifest = {
        "command": command,
        "config": doc,
        "config_hash": config_hash(doc),
        "seed": doc.get("seed"),
        "versions": {
            "varnet": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "outputs": {str(p.name): _file_hash(p) for p in outputs},
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


# -- commands ------------------------------------------------------------------


def _train_config(doc: dict) -> TrainConfig:
    return TrainConfig.from_dict({"seed": doc["seed"], **doc["train"]})


def _load_dataset(doc: dict, key: str = "data") -> Dataset:
    return load_csv(doc[key], target_column=doc.get("target_column", -1))


def cmd_gen_data(doc: dict) -> list[Path]:
    out = Path(doc["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(doc["seed"])
    gen = doc["generator"]
    if gen == "toy-sine":
        write_csv(gen_toy_sine(doc["n"], rng), out, ["x"])
    elif gen == "two-moons-4d":
        V = gen_two_moons_4d(doc["n"], rng).V
        _write_table(out, ["v1", "v2", "v3", "v4"], V)
    else:
        records = gen_seasonal_temperature(rng, n_years=doc["n_years"], day_step=doc["day_step"])
        rows = [(day, v) for day, vals in records for v in vals]
        _write_table(out, ["day", "value"], np.asarray(rows))
    return [out]


def _write_table(path: Path, header: list[str], rows) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in np.atleast_2d(rows):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _write_report(report, path: Path) -> None:
    # wall-clock time would break bit-identical regeneration
    doc = report.to_dict()
    doc.pop("wall_clock", None)
    path.write_text(json.dumps(doc))


def cmd_train(doc: dict) -> list[Path]:
    out = Path(doc["out_dir"])
    if doc["calibration"]:
        ds = build_calibration_dataset(load_calibration_csv(doc["data"]), per_replicate=True)
    else:
        ds = _load_dataset(doc)
    cfg = _train_config(doc)
    reg = fit_regressor(ds, doc["model"], cfg, np.random.default_rng(doc["seed"]))
    paths = [out / "snapshot.json", out / "report.json", out / "trace.csv"]
    save_snapshot(reg.model, paths[0], reg.scaler)
    _write_report(reg.report, paths[1])
    reg.report.write_trace_csv(paths[2])
    if ds.D == 1:
        paths.append(out / "curve.csv")
        lo, hi = float(ds.X.min()), float(ds.X.max())
        pad = max(hi - lo, 1.0)
        x = np.linspace(lo - pad, hi + pad, 401)
        mu, var = reg.predict_mean_var(x[:, None])
        sd = np.sqrt(var)
        _write_table(paths[-1], ["x", "mean", "std", "lower", "upper"], np.column_stack([x, mu, sd, mu - 2 * sd, mu + 2 * sd]))
    return paths


def cmd_eval(doc: dict) -> list[Path]:
    out = Path(doc["out_dir"])
    model, scaler = load_snapshot(doc["snapshot"])
    if scaler is None:
        raise DataError("snapshot carries no standardizer")
    ds = _load_dataset(doc)
    reg = FittedRegressor(model, scaler, None)
    ll = point_log_likelihoods(reg, ds)
    mu, var = reg.predict_mean_var(ds.X)
    metrics = {
        "n": len(ds),
        "model": reg.kind,
        "test_log_likelihood": float(np.mean(ll)),
        "rmse": float(np.sqrt(np.mean((ds.y - mu) ** 2))),
        "units": "original target units; log-likelihoods include the -log(y_std) correction",
    }
    paths = [out / "metrics.json", out / "predictions.csv"]
    paths[0].write_text(json.dumps(metrics, indent=2))
    _write_table(paths[1], ["y", "mean", "variance", "log_likelihood"], np.column_stack([ds.y, mu, var, ll]))
    return paths


def cmd_active_learn(doc: dict) -> list[Path]:
    out = Path(doc["out_dir"])
    keys = ("rounds", "acquisition_fraction", "repeats", "fractions")
    alc = ActiveLearningConfig(**{k: doc[k] for k in keys if k in doc}, train=_train_config(doc))
    res = run_active_learning(_load_dataset(doc), alc, doc["model"], np.random.default_rng(doc["seed"]))
    paths = [out / "curves.csv", out / "summary.json"]
    res.write_csv(paths[0])
    res.write_json(paths[1])
    return paths


def cmd_grad_study(doc: dict) -> list[Path]:
    out = Path(doc["out_dir"])
    kw = {k: LocalityConfig(**doc[k]) for k in ("mean_locality", "var_locality") if k in doc}
    res = gradient_sparsity_study(
        _load_dataset(doc),
        _train_config(doc),
        np.random.default_rng(doc["seed"]),
        warmup_iters=doc["warmup_iters"],
        study_iters=doc["study_iters"],
        **kw,
    )
    paths = [out / "sparsity.csv", out / "summary.json"]
    res.write_csv(paths[0])
    paths[1].write_text(json.dumps(res.averages(), indent=2))
    return paths


def cmd_vae(doc: dict) -> list[Path]:
    out = Path(doc["out_dir"])
    cfg = VaeTrainConfig(**{"seed": doc["seed"], **doc["train"]})
    grid = square_grid(doc["grid_lo"], doc["grid_hi"], doc["grid_n"])
    runs = two_moon_comparison(doc["seed"], cfg, doc["n_train"], doc["n_samples"], grid, doc["far"], doc["models"])
    paths = []
    for name, run in runs.items():
        new = [out / f"{name}_snapshot.json", out / f"{name}_samples.csv", out / f"{name}_grid.csv"]
        run.model.save(new[0])
        _write_table(new[1], [f"v{i + 1}" for i in range(run.samples.shape[1])], run.samples)
        _write_table(new[2], ["z1", "z2", "variance"], np.column_stack([grid, run.grid_variance]))
        paths += new
    paths.append(out / "summary.json")
    paths[-1].write_text(json.dumps({k: r.summary() for k, r in runs.items()}, indent=2, sort_keys=True))
    return paths


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "active-learn": cmd_active_learn,
    "grad-study": cmd_grad_study,
    "vae": cmd_vae,
}


# -- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="varnet", description="Train and evaluate variance networks.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", help="JSON config file; explicit flags override its fields")
        sp.add_argument("--seed", type=int)
        return sp

    sp = add("gen-data", "write a synthetic dataset as CSV")
    sp.add_argument("generator", choices=["toy-sine", "two-moons-4d", "seasonal"])
    sp.add_argument("--n", type=int)
    sp.add_argument("--n-years", dest="n_years", type=int)
    sp.add_argument("--day-step", dest="day_step", type=int)
    sp.add_argument("--out", required=True, help="output CSV; the manifest goes next to it")

    sp = add("train", "fit a model and write snapshot, report and loss trace")
    sp.add_argument("--data", help="training CSV (header row, target in the last column by default)")
    sp.add_argument("--model", choices=["nn", "combined"])
    sp.add_argument("--target-column", dest="target_column", type=int)
    sp.add_argument("--calibration", action="store_true", default=None, help="data is key,value replicate rows")
    sp.add_argument("--out-dir", dest="out_dir")

    sp = add("eval", "score a snapshot on a CSV; log-likelihoods are in original target units")
    sp.add_argument("--snapshot")
    sp.add_argument("--data")
    sp.add_argument("--target-column", dest="target_column", type=int)
    sp.add_argument("--out-dir", dest="out_dir")

    sp = add("active-learn", "top-variance active learning curves")
    sp.add_argument("--data")
    sp.add_argument("--model", choices=["nn", "combined"])
    sp.add_argument("--rounds", type=int)
    sp.add_argument("--repeats", type=int)
    sp.add_argument("--out-dir", dest="out_dir")

    sp = add("grad-study", "gradient sparsity under locality vs uniform batches")
    sp.add_argument("--data")
    sp.add_argument("--out-dir", dest="out_dir")

    sp = add("vae", "train baseline and Comb-VAE on two-moon 4D data; write samples and latent grids")
    sp.add_argument("--iters", type=int, help="shortcut for train.iters")
    sp.add_argument("--out-dir", dest="out_dir")
    return p


def _config_doc(ns: argparse.Namespace) -> dict:
    doc: dict = {}
    if ns.config:
        try:
            doc = json.loads(Path(ns.config).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {ns.config}: {err}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
    flags = {k: v for k, v in vars(ns).items() if k not in ("command", "config") and v is not None}
    if "iters" in flags:
        doc.setdefault("train", {})
        doc["train"] = {**doc["train"], "iters": flags.pop("iters")}
    doc.update(flags)
    return doc


def run_cli(argv: list[str]) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if _THREADS and not (_THREADS.isdigit() and int(_THREADS) > 0):
        print(f"varnet: VARNET_THREADS must be a positive integer, got {_THREADS!r}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        doc = validate_config(ns.command, _config_doc(ns))
    except ConfigError as err:
        print(f"varnet: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if "out_dir" in doc:
            Path(doc["out_dir"]).mkdir(parents=True, exist_ok=True)
        outputs = COMMANDS[ns.command](doc)
        if ns.command == "gen-data":
            manifest = Path(doc["out"]).with_name(Path(doc["out"]).name + ".manifest.json")
        else:
            manifest = Path(doc["out_dir"]) / "manifest.json"
        write_manifest(manifest, ns.command, doc, outputs)
    except (DataError, TrainingDiverged, OSError, ValueError, FloatingPointError) as err:
        print(f"varnet: {ns.command} failed: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({"command": ns.command, "outputs": [str(p) for p in outputs], "manifest": str(manifest)}))
    return EXIT_OK


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
