"""Command-line interface: ``synfuse <command> [options]``.

Every command writes one JSON document (or CSV for ``gen-data``) to ``--out``
or stdout. Diagnostics go to stderr. Exit codes: 0 success, 1 runtime or
numeric failure, 2 usage or configuration error, 3 parse error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .data import (
    VARIANTS,
    SyntheticSpec,
    atomic_write_text,
    dumps_csv,
    generate,
    load_csv,
    select_modalities,
    split_indices,
)
from .errors import ConfigError, ParseError, SynfuseError, UsageError
from .estimators import (
    DvConfig,
    GaussianKernel,
    PairedSamples,
    estimate_mi_dv,
    make_deep_kernel,
    median_heuristic,
    mmd_dependence,
    permutation_null,
    pvalue_from_null,
)
from .fusion import evaluate, load_checkpoint, save_checkpoint
from .gradcheck import DEFAULT_INSTANCES, DEFAULT_TOL, SUITES, run_gradcheck
from .nn import SeededRng
from .synergy import SynergyConfig, tse_synergy_detail
from .training import SPEC_VERSION, GridConfig, TrainConfig, build_model, compare_to_baseline, run_experiment_grid, train

log = logging.getLogger("synfuse")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_PARSE = 0, 1, 2, 3
TIMING_KEYS = ("wall_clock_seconds", "seconds")


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting so :func:`cli_main` owns the exit code."""

    def error(self, message):
        raise UsageError(f"{self.format_usage().rstrip()}\n{self.prog}: error: {message}")


# -- JSON helpers ------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def _strip_timing(obj):
    if isinstance(obj, dict):
        return {k: (None if k in TIMING_KEYS else _strip_timing(v)) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_strip_timing(v) for v in obj]
    return obj


def envelope(kind: str, body: dict, args) -> dict:
    doc = {"schema": f"synfuse.{kind}", "spec_version": SPEC_VERSION, "command": args.command,
           "seed": _seed(args)}
    if not args.no_timestamp:
        doc["created_at"] = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    doc.update(body)
    doc = _jsonable(doc)
    return _strip_timing(doc) if args.no_timestamp else doc


def _emit_text(text: str, out) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        atomic_write_text(out, text)


def _emit_json(doc: dict, out) -> None:
    # serialize fully before touching the destination so failures leave nothing behind
    _emit_text(json.dumps(doc, indent=2, allow_nan=False) + "\n", out)


# -- argument helpers ------------------------------------------------------------


def _names(text: str) -> list[str]:
    names = [t.strip() for t in text.split(",") if t.strip()]
    if not names:
        raise argparse.ArgumentTypeError("expected a comma-separated list of modality names")
    return names


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _sigma(text: str):
    if text == "median":
        return text
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--sigma must be 'median' or a positive number, got {text!r}") from None
    if not (math.isfinite(v) and v > 0):
        raise argparse.ArgumentTypeError(f"--sigma must be positive, got {text!r}")
    return v


def _read_json(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg})", line=exc.lineno, path=path) from None
    if not isinstance(d, dict):
        raise ParseError("expected a JSON object", line=1, path=path)
    return d


def _load(path):
    if not Path(path).is_file():
        raise ConfigError(f"no such file: {path}")
    return load_csv(path)


def _pair(args) -> PairedSamples:
    batch = _load(args.data)
    x = select_modalities(batch, args.x)
    y = select_modalities(batch, args.y)
    overlap = set(args.x) & set(args.y)
    if overlap:
        raise ConfigError(f"modalities {sorted(overlap)} appear in both --x and --y")
    return PairedSamples(np.hstack(x.modalities), np.hstack(y.modalities))


def _cap_rows(s: PairedSamples, max_rows: int, rng: SeededRng) -> PairedSamples:
    """Seeded row subsample keeping Gram matrices at a bounded size."""
    if max_rows < 4:
        raise ConfigError(f"--max-rows must be at least 4, got {max_rows}")
    if s.n <= max_rows:
        return s
    idx = np.sort(rng.split("subsample").generator.choice(s.n, max_rows, replace=False))
    return PairedSamples(s.x[idx], s.y[idx])


def _seed(args, default: int = 0) -> int:
    return default if args.seed is None else args.seed


# -- commands --------------------------------------------------------------------


def cmd_gen_data(args):
    spec = SyntheticSpec(
        variant=args.variant, n=args.n, seed=_seed(args), rho=args.rho, dim=args.dim,
        flip_prob=args.flip_prob, dither_sd=args.dither_sd, latent_dim=args.latent_dim,
        modality_dims=args.modality_dims, noise_sd=args.noise_sd,
        synergy_strength=args.beta, label_noise_sd=args.label_noise_sd,
    )
    batch = generate(spec)
    log.info("generated %d rows of %s", batch.n_rows, spec.variant)
    _emit_text(dumps_csv(batch), args.out)


def cmd_estimate_mi(args):
    s = _pair(args)
    cfg = DvConfig(steps=args.steps, batch=args.batch, lr=args.lr, seed=_seed(args), hidden=args.hidden)
    est = estimate_mi_dv(s.x, s.y, cfg)
    log.info("DV estimate %.4f nats", est.value)
    body = {"x": args.x, "y": args.y, "estimator": "donsker_varadhan", "unit": "nats", **est.to_dict()}
    _emit_json(envelope("estimate", body, args), args.out)


def cmd_estimate_mmd(args):
    rng = SeededRng(_seed(args))
    full = _pair(args)
    s = _cap_rows(full, args.max_rows, rng)
    rows = s.stacked()
    sigma = median_heuristic(rows) if args.sigma == "median" else args.sigma
    if args.kernel == "gaussian":
        kernel = GaussianKernel(sigma)
    else:
        kernel = make_deep_kernel(rows.shape[1], rng.split("deep-kernel"), sigma)
    body = {"x": args.x, "y": args.y, "estimator": "mmd_dependence", "unit": "squared_mmd",
            "n_rows_total": full.n}
    if args.permutations:
        if args.permutations < 19:
            raise ConfigError(f"--permutations must be 0 or at least 19, got {args.permutations}")
        observed, nulls = permutation_null(s, kernel, rng.split("test"), args.permutations, args.n_shuffles)
        est = mmd_dependence(s, kernel, rng.split("test").split("observed"), args.n_shuffles)
        body.update(est.to_dict())
        body["permutation_test"] = {
            "n_perm": args.permutations, "p_value": pvalue_from_null(observed, nulls),
            "null_mean": float(np.mean(nulls)), "null_sd": float(np.std(nulls, ddof=1)),
        }
    else:
        body.update(mmd_dependence(s, kernel, rng.split("test").split("observed"), args.n_shuffles).to_dict())
    _emit_json(envelope("estimate", body, args), args.out)


def cmd_estimate_synergy(args):
    batch = select_modalities(_load(args.data), args.modalities)
    if args.measure == "kl":
        cfg = SynergyConfig("KL", dv=DvConfig(steps=args.steps, batch=args.batch, lr=args.lr))
    else:
        cfg = SynergyConfig("MMD", kernel="median" if args.sigma == "median" else args.sigma,
                            n_shuffles=args.n_shuffles)
        if args.kernel == "deep":
            cfg.kernel = "deep"
    if batch.n_rows < cfg.min_rows:
        raise ConfigError(f"{cfg.measure} synergy needs at least {cfg.min_rows} rows, got {batch.n_rows}")
    value, scored = tse_synergy_detail(batch, cfg, SeededRng(_seed(args)))
    body = {
        "measure": cfg.measure, "modalities": list(batch.names), "value": value, "n_samples": batch.n_rows,
        "partitions": [{"split": p.label(batch.names), **e.to_dict()} for p, e in scored],
    }
    _emit_json(envelope("synergy", body, args), args.out)


_TRAIN_FLAGS = ("lam", "measure", "epochs", "batch_size", "lr_model", "lr_critic", "critic_steps",
                "patience", "warmup_epochs", "loss", "fusion", "embed_dim", "n_shuffles")


def _train_config(args) -> TrainConfig:
    d = _read_json(args.config) if args.config else {}
    d = dict(d.get("train", d))
    for name in _TRAIN_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            d[name] = v
    if args.seed is not None:
        d["seed"] = args.seed
    return TrainConfig.from_dict(d).validate()


def _splits(args) -> dict:
    data = _load(args.data)
    if args.val or args.test:
        return {"train": data, "val": _load(args.val) if args.val else None,
                "test": _load(args.test) if args.test else None}
    tr, va, te = split_indices(data.n_rows, args.split, args.split_seed)
    return {"train": data.rows(tr), "val": data.rows(va), "test": data.rows(te)}


def cmd_train(args):
    cfg = _train_config(args)
    args.seed = cfg.seed
    splits = _splits(args)
    model = build_model(splits["train"].widths, cfg)
    report = train(model, splits, cfg, on_step=None)
    if args.checkpoint:
        save_checkpoint(model, args.checkpoint)
    log.info("trained %s (%s); best epoch %s", cfg.variant, cfg.fusion, report.best_epoch)
    body = {k: v for k, v in report.to_dict().items() if k not in ("schema", "spec_version")}
    _emit_json(envelope("train_report", body, args), args.out)


def cmd_evaluate(args):
    model = load_checkpoint(args.checkpoint)
    batch = _load(args.data)
    if list(batch.widths) != model.modality_widths:
        raise ConfigError(f"data widths {list(batch.widths)} do not match the checkpoint {model.modality_widths}")
    metrics = evaluate(model, batch)
    _emit_json(envelope("metrics", metrics.to_dict(), args), args.out)


def cmd_grid(args):
    d = _read_json(args.config) if args.config else {}
    if args.seeds is not None:
        d["seeds"] = list(args.seeds)
    if args.lambdas is not None:
        d["lambdas"] = list(args.lambdas)
    grid = GridConfig.from_dict(d)
    splits = _splits(args)

    def progress(cell, report):
        log.info("cell %s %s lambda=%g seed=%d done%s", *cell, " (failed)" if "error" in report else "")

    result = run_experiment_grid(grid, splits, args.jobs, progress)
    if args.table_csv:
        atomic_write_text(args.table_csv, result.table_csv())
    if args.runs_csv:
        atomic_write_text(args.runs_csv, result.runs_csv())
    body = {k: v for k, v in result.to_dict(args.full).items() if k not in ("schema", "spec_version")}
    body["comparison"] = {sel: compare_to_baseline(result.rows, sel) for sel in ("val_mae", "mae")}
    _emit_json(envelope("grid_report", body, args), args.out)
    if any(r.get("error") for r in result.rows):
        log.error("%d grid cells failed", sum(1 for r in result.rows if r.get("error")))
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_gradcheck(args):
    report = run_gradcheck(_seed(args), args.instances, args.tol, args.suite)
    for s in report.suites:
        log.info("%-34s max rel err %.2e  %s", s.name, s.max_rel_error, "ok" if s.passed else "FAIL")
    _emit_json(envelope("gradcheck", report.to_dict(), args), args.out)
    return EXIT_OK if report.passed else EXIT_RUNTIME


# -- parser ----------------------------------------------------------------------


def _global_flags(p, suppress: bool):
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=default, help="random seed (default 0)")
    p.add_argument("--out", default=default, help="output path; stdout when omitted")
    p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="suppress progress messages on stderr")
    p.add_argument("--no-timestamp", action="store_true",
                   default=argparse.SUPPRESS if suppress else False,
                   help="omit creation time and wall-clock fields for byte-identical output")


def _pair_flags(p):
    p.add_argument("data", help="CSV file")
    p.add_argument("--x", type=_names, required=True, help="modality names forming X, comma separated")
    p.add_argument("--y", type=_names, required=True, help="modality names forming Y, comma separated")


def _data_flags(p):
    p.add_argument("data", help="CSV file (split 70/15/15 unless --val/--test are given)")
    p.add_argument("--val", help="validation CSV")
    p.add_argument("--test", help="test CSV")
    p.add_argument("--split", type=_floats, default=(0.7, 0.15, 0.15), help="train,val,test fractions")
    p.add_argument("--split-seed", type=int, default=0, help="seed of the row split")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="synfuse", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="command")
    sub.required = True

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        _global_flags(p, suppress=True)
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "write a synthetic dataset as CSV")
    p.add_argument("--variant", choices=VARIANTS, default="multimodal_regression")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--rho", type=float, default=0.8)
    p.add_argument("--dim", type=int, default=1)
    p.add_argument("--flip-prob", type=float, default=0.0)
    p.add_argument("--dither-sd", type=float, default=0.01)
    p.add_argument("--latent-dim", type=int, default=6)
    p.add_argument("--modality-dims", type=_ints, default=(12, 12, 12))
    p.add_argument("--noise-sd", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=2.0, help="strength of the cross-modal interaction")
    p.add_argument("--label-noise-sd", type=float, default=0.1)

    p = add("estimate-mi", cmd_estimate_mi, "neural Donsker-Varadhan mutual information estimate")
    _pair_flags(p)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=512)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--hidden", type=_ints, default=(64, 64))

    p = add("estimate-mmd", cmd_estimate_mmd, "MMD dependence between joint and shuffled rows")
    _pair_flags(p)
    p.add_argument("--kernel", choices=("gaussian", "deep"), default="gaussian")
    p.add_argument("--sigma", type=_sigma, default="median", help="'median' or a bandwidth")
    p.add_argument("--n-shuffles", type=int, default=4)
    p.add_argument("--permutations", type=int, default=0, help="permutation-test draws (0 skips the test)")
    p.add_argument("--max-rows", type=int, default=2000, help="seeded row subsample above this size")

    p = add("estimate-synergy", cmd_estimate_synergy, "bipartition synergy of the modalities")
    p.add_argument("data", help="CSV file")
    p.add_argument("--modalities", type=_names, default=["a", "v", "t"])
    p.add_argument("--measure", choices=("kl", "mmd"), default="mmd")
    p.add_argument("--kernel", choices=("gaussian", "deep"), default="gaussian")
    p.add_argument("--sigma", type=_sigma, default="median")
    p.add_argument("--n-shuffles", type=int, default=4)
    p.add_argument("--steps", type=int, default=2000, help="DV steps per split (kl)")
    p.add_argument("--batch", type=int, default=512)
    p.add_argument("--lr", type=float, default=1e-3)

    p = add("train", cmd_train, "train a fusion model")
    _data_flags(p)
    p.add_argument("--config", help="JSON file of training options")
    p.add_argument("--checkpoint", help="where to write the trained model")
    p.add_argument("--measure", choices=("none", "KL", "MMD", "kl", "mmd"))
    p.add_argument("--lam", type=float)
    p.add_argument("--fusion", choices=("concat", "tensor"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-model", type=float)
    p.add_argument("--lr-critic", type=float)
    p.add_argument("--critic-steps", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--warmup-epochs", type=int)
    p.add_argument("--loss", choices=("huber", "mse"))
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--n-shuffles", type=int)

    p = add("evaluate", cmd_evaluate, "metrics of a checkpoint on a CSV")
    p.add_argument("checkpoint")
    p.add_argument("data")

    p = add("grid", cmd_grid, "run a model x loss x lambda x seed grid")
    _data_flags(p)
    p.add_argument("--config", help="JSON grid config (models, variants, lambdas, seeds, base)")
    p.add_argument("--seeds", type=_ints)
    p.add_argument("--lambdas", type=_floats)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--table-csv", help="also write the aggregate table as CSV")
    p.add_argument("--runs-csv", help="also write one CSV row per run")
    p.add_argument("--full", action="store_true", help="include every per-run training report")

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of all analytic gradients")
    p.add_argument("--instances", type=int, default=DEFAULT_INSTANCES)
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)
    p.add_argument("--suite", action="append", choices=sorted(SUITES), help="limit to a suite (repeatable)")
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ParseError):
        return EXIT_PARSE
    if isinstance(exc, (ConfigError, UsageError)):
        return EXIT_USAGE
    return EXIT_RUNTIME


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s: %(message)s", stream=sys.stderr, force=True)
    try:
        code = args.func(args)
    except (SynfuseError, ValueError, ArithmeticError, OSError) as exc:
        print(f"synfuse {args.command}: {exc}", file=sys.stderr)
        return _exit_code(exc)
    return EXIT_OK if code is None else code


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
