"""Command-line entry point: ``sbltune {gen-data,train,eval,sweep,grad-check}``.

Settings resolve in increasing priority: built-in defaults, a ``key=value``
config file (``--config``), environment variables ``SBLTUNE_<KEY>``, then
command-line flags.  Every command writes ``run_manifest.txt`` (resolved
settings plus a SHA-256 of the inputs) into its output directory.

Exit codes: 0 success, 1 check failure, 2 usage, 3 I/O, 4 numerical
divergence, 5 more than 10% failed trials in some cell.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import re
import sys
from pathlib import Path

from .bench import ExperimentSpec, emit_csv, run_experiment
from .errors import FormatError, NumericalError, ParameterError
from .problem import DatasetSpec, MatrixKind, gen_dataset, load_dataset, save_dataset
from .tuners import NeuralTuner, make_tuner
from .unroll import TrainConfig, grad_check, train, write_checkpoint

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED, EXIT_PARTIAL = 0, 1, 2, 3, 4, 5
FAILED_TRIAL_LIMIT = 0.10
ENV_PREFIX = "SBLTUNE_"
MANIFEST_NAME = "run_manifest.txt"

logger = logging.getLogger("sbltune")


class UsageError(Exception):
    pass


def _floats(text):
    try:
        values = tuple(float(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise ValueError(f"expected comma-separated numbers, got {text!r}") from None
    if not values:
        raise ValueError("empty list")
    return values


def _bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _optional_float(text):
    return None if str(text).strip().lower() in ("auto", "none", "") else float(text)


def _matrix(text):
    return str(MatrixKind.parse(text))


# key -> (parser, default, help); defaults are strings parsed like any other source
_COMMON = {
    "seed": (int, "0", "master seed for every random stream"),
    "threads": (int, str(os.cpu_count() or 1), "worker processes"),
    "out": (str, ".", "output directory"),
}
_SETTINGS = {
    "gen-data": {
        "m": (int, "80", "measurements M"),
        "n": (int, "100", "signal length N"),
        "count": (int, "50000", "number of instances"),
        "snr": (_floats, "10,20,30,40,50", "SNR grid in dB"),
        "rho": (_floats, "0.1,0.2,0.3,0.4,0.5", "sparsity grid"),
        "matrix": (_matrix, "iid", "'iid' or 'corr:<c>'"),
        "fresh_matrix": (_bool, "true", "draw a new A per instance"),
    },
    "train": {
        "dataset": (str, None, "dataset directory"),
        "iters": (int, "50", "unrolled layers I"),
        "batch": (int, "32", "mini-batch size"),
        "epochs": (int, "150", "epochs"),
        "lr": (float, "0.01", "Adam learning rate"),
        "hidden": (int, "256", "hidden units L"),
        "clamp_low": (float, "0.0", "lower bound of the tuner output"),
        "input_transform": (str, "centered-log", "raw | log | centered-log"),
        "output_map": (str, "clamp", "clamp | affine"),
        "input_scale": (_optional_float, "auto", "feature scale ('auto' = 1/N)"),
    },
    "eval": {
        "dataset": (str, None, "dataset directory (its test split is used)"),
        "alg": (str, "uamp-sbl", "sbl | uamp-sbl"),
        "tuner": (str, "empirical", "empirical | fixed:<eps> | neural:<weights>"),
        "iters": (int, "50", "iterations"),
    },
    "sweep": {
        "alg": (str, "uamp-sbl", "sbl | uamp-sbl"),
        "tuner": (str, "empirical", "empirical | fixed:<eps> | neural:<weights>"),
        "m": (int, "80", "measurements M"),
        "n": (int, "100", "signal length N"),
        "matrix": (_matrix, "iid", "'iid' or 'corr:<c>'"),
        "rho": (_floats, "0.1", "sparsity list"),
        "snr": (_floats, "50", "SNR list in dB"),
        "iters": (int, "50", "iterations"),
        "trials": (int, "200", "trials per cell"),
    },
    "grad-check": {
        "seeds": (int, "5", "number of random problems"),
        "fd_step": (float, "1e-6", "central-difference step"),
        "m": (int, "6", "measurements M"),
        "n": (int, "8", "signal length N"),
        "hidden": (int, "4", "hidden units L"),
        "iters": (int, "3", "unrolled layers I"),
        "tol": (float, "1e-5", "pass threshold on the max relative error"),
    },
}


def _settings(command):
    return {**_SETTINGS[command], **_COMMON}


def read_config_file(path) -> dict:
    """Flat ``key=value`` file; ``#`` starts a comment, dashes in keys become underscores."""
    out = {}
    for num, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{num}: expected key=value, got {raw!r}")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def resolve(command, flags: dict, config_path=None, environ=None) -> dict:
    """Merge defaults, config file, environment and flags; parse every value."""
    table = _settings(command)
    environ = os.environ if environ is None else environ
    raw = {key: spec[1] for key, spec in table.items()}
    if config_path is not None:
        file_values = read_config_file(config_path)
        unknown = sorted(set(file_values) - set(table))
        if unknown:
            raise UsageError(f"unknown key(s) in {config_path}: {', '.join(unknown)}")
        raw.update(file_values)
    for key in table:
        env_value = environ.get(ENV_PREFIX + key.upper())
        if env_value is not None:
            raw[key] = env_value
    raw.update({k: v for k, v in flags.items() if v is not None})
    resolved = {}
    for key, (parse, _, _) in table.items():
        if raw[key] is None:
            raise UsageError(f"--{key.replace('_', '-')} is required")
        try:
            resolved[key] = parse(raw[key])
        except ValueError as exc:
            raise UsageError(f"--{key.replace('_', '-')}: {exc}") from None
    for key in ("threads", "count", "m", "n", "iters", "batch", "epochs", "hidden", "trials", "seeds"):
        if key in resolved and resolved[key] < 1:
            raise UsageError(f"--{key} must be >= 1, got {resolved[key]}")
    for key in ("lr", "fd_step"):
        if key in resolved and not resolved[key] > 0:
            raise UsageError(f"--{key.replace('_', '-')} must be positive, got {resolved[key]}")
    return resolved


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sbltune", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for command in _SETTINGS:
        p = sub.add_parser(command)
        p.add_argument("--config", help="key=value settings file")
        p.add_argument("-v", "--verbose", action="count", default=0)
        for key, (_, default, help_text) in _settings(command).items():
            suffix = f" (default {default})" if default is not None else ""
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None, help=help_text + suffix)
    return parser


# --------------------------------------------------------------------------
# run manifest

def _hash_paths(paths) -> str:
    digest = hashlib.sha256()
    for path in paths:
        path = Path(path)
        files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
        for f in files:
            if f.name == MANIFEST_NAME:
                continue
            digest.update(str(f.relative_to(path) if path.is_dir() else f.name).encode())
            digest.update(f.read_bytes())
    return digest.hexdigest()


def _fmt(value):
    if isinstance(value, tuple):
        return ",".join(f"{v:g}" for v in value)
    return "auto" if value is None else str(value)


def write_run_manifest(out_dir, command, settings, inputs=(), extra=None) -> Path:
    """Resolved settings and a content hash of the inputs, one ``key=value`` per line.

    ``threads`` and ``out`` are omitted: neither affects results.
    """
    lines = [f"command={command}"]
    lines += [f"{k}={_fmt(v)}" for k, v in sorted(settings.items()) if k not in ("threads", "out")]
    lines.append(f"input_sha256={_hash_paths(inputs)}")
    for k, v in (extra or {}).items():
        lines.append(f"{k}={v}")
    path = Path(out_dir) / MANIFEST_NAME
    path.write_text("\n".join(lines) + "\n")
    return path


def _out_dir(settings) -> Path:
    out = Path(settings["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    return out


# --------------------------------------------------------------------------
# commands

def cmd_gen_data(s) -> int:
    spec = DatasetSpec(m=s["m"], n=s["n"], snr_grid=s["snr"], rho_grid=s["rho"],
                       total_count=s["count"], matrix_kind=MatrixKind.parse(s["matrix"]),
                       fresh_matrix_per_sample=s["fresh_matrix"], seed=s["seed"])
    dataset = gen_dataset(spec, n_jobs=s["threads"])
    out = save_dataset(dataset, _out_dir(s))
    write_run_manifest(out, "gen-data", s)
    print(f"wrote {len(dataset)} records to {out} "
          f"(train={len(dataset.train)} validation={len(dataset.validation)} test={len(dataset.test)})")
    return EXIT_OK


def _tuner_paths(tuner_text):
    kind, _, arg = str(tuner_text).partition(":")
    return [arg] if kind == "neural" and arg else []


def _check_tuner(tuner_text, n):
    tuner = make_tuner(tuner_text)
    if isinstance(tuner, NeuralTuner) and tuner.params.n_input != n:
        raise FormatError(f"tuner weights are for N={tuner.params.n_input}, problem has N={n}")
    return tuner


def train_config(s) -> TrainConfig:
    return TrainConfig(unroll_iters=s["iters"], batch_size=s["batch"], epochs=s["epochs"],
                       learning_rate=s["lr"], l_hidden=s["hidden"], clamp_low=s["clamp_low"],
                       input_transform=s["input_transform"], output_map=s["output_map"],
                       input_scale=s["input_scale"], seed=s["seed"])


def train_summary(config: TrainConfig) -> str:
    return f"I={config.unroll_iters} batch={config.batch_size} epochs={config.epochs} lr={config.learning_rate:g}"


def cmd_train(s) -> int:
    dataset = load_dataset(s["dataset"])
    config = train_config(s)
    summary = train_summary(config)
    print(summary)
    out = _out_dir(s)
    weights = out / "weights.sbnn"
    params, history = train(dataset, config)
    write_checkpoint(params, weights, history.best_epoch, history.best_val_loss, config)
    history.to_csv(out / "history.csv")
    write_run_manifest(out, "train", s, [s["dataset"]], {"summary": summary,
                                                         "best_epoch": history.best_epoch,
                                                         "best_val_loss": repr(history.best_val_loss)})
    print(f"best epoch {history.best_epoch}: val_loss={history.best_val_loss:.6g} "
          f"(initial {history.initial_val_loss:.6g}); weights -> {weights}")
    return EXIT_OK


def _finish_experiment(table, s, command, inputs) -> int:
    out = _out_dir(s)
    csv_path = emit_csv(table, out / "results.csv")
    write_run_manifest(out, command, s, inputs)
    for (snr, rho), frac in sorted(table.failure_fraction().items()):
        if frac > 0:
            print(f"snr={snr:g} rho={rho:g}: {frac:.1%} of trials failed", file=sys.stderr)
    for (snr, rho) in sorted(table.attempted):
        try:
            print(f"snr={snr:g} rho={rho:g}: final NMSE {table.final(snr, rho):.2f} dB "
                  f"(oracle {table.final(snr, rho, 'oracle'):.2f} dB)")
        except KeyError:
            pass
    print(f"results -> {csv_path}")
    if any(frac > FAILED_TRIAL_LIMIT for frac in table.failure_fraction().values()):
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_eval(s) -> int:
    dataset = load_dataset(s["dataset"])
    tuner = _check_tuner(s["tuner"], dataset.spec.n)
    spec = ExperimentSpec(algorithm=s["alg"], tuner=tuner, m=dataset.spec.m, n=dataset.spec.n,
                          iters=s["iters"], seed=s["seed"])
    table = run_experiment(spec, source=dataset.subset("test"), n_jobs=s["threads"])
    return _finish_experiment(table, s, "eval", [s["dataset"], *_tuner_paths(s["tuner"])])


def cmd_sweep(s) -> int:
    tuner = _check_tuner(s["tuner"], s["n"])
    spec = ExperimentSpec(algorithm=s["alg"], tuner=tuner, m=s["m"], n=s["n"], rho=s["rho"],
                          snr_db=s["snr"], matrix_kind=s["matrix"], trials=s["trials"],
                          iters=s["iters"], seed=s["seed"])
    table = run_experiment(spec, n_jobs=s["threads"])
    return _finish_experiment(table, s, "sweep", _tuner_paths(s["tuner"]))


def _short(value: float) -> str:
    """``1e-05`` -> ``1e-5``."""
    return re.sub(r"e([+-])0*(\d)", r"e\1\2", f"{value:g}")


def cmd_grad_check(s) -> int:
    report = grad_check(seeds=s["seeds"], m=s["m"], n=s["n"], l_hidden=s["hidden"],
                        iters=s["iters"], step=s["fd_step"], base_seed=s["seed"])
    for k, err in enumerate(report.per_seed):
        print(f"seed {s['seed'] + k}: max_rel_err={err:.3e}")
    passed = report.passed(s["tol"])
    verdict = "PASS" if passed else "FAIL"
    print(f"max_rel_err = {report.max_rel_err:.3e}")
    print(f"max_rel_err < {_short(s['tol'])}: {verdict}")
    if not passed:
        print(f"worst parameter index {report.worst_index} (seed {report.worst_seed})")
    write_run_manifest(_out_dir(s), "grad-check", s, extra={"max_rel_err": repr(report.max_rel_err),
                                                             "result": verdict})
    return EXIT_OK if passed else EXIT_CHECK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "sweep": cmd_sweep, "grad-check": cmd_grad_check}


def main(argv=None, environ=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        settings = resolve(args.command, flags, args.config, environ)
        return COMMANDS[args.command](settings)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
