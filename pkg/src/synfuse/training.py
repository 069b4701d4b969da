"""Synergy-regularized training of fusion models.

The objective is ``task_loss - lam * synergy(Z_1, ..., Z_k)`` where ``Z_i`` are
the encoder outputs. With the KL measure every step first runs a few DV ascent
steps on one persistent critic per modality split (embeddings held fixed),
then takes one Adam step on the model with the critics frozen. The synergy
gradient reaches the encoders only; the head sees the task loss alone.
"""

from __future__ import annotations

import csv
import io
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np

from .batch import ModalityBatch
from .errors import ConfigError, NumericError
from .estimators import MIN_DV_ROWS
from .fusion import FusionModel, evaluate, task_loss
from .nn import AdamState, SeededRng, adam_step
from .synergy import CriticBank, KernelBank, SynergyConfig, synergy_grad_embeddings

REPORT_SCHEMA = "synfuse.train_report"
REPORT_VERSION = 1
SPEC_VERSION = "1.0"
TRAIN_MEASURES = ("none", "KL", "MMD")
MIN_MMD_BATCH = 8


def total_loss(task: float, synergy: float, lam: float) -> float:
    """Penalized objective; larger synergy lowers it."""
    return task - lam * synergy


@dataclass
class TrainConfig:
    lam: float = 0.1
    measure: str = "none"
    critic_steps: int = 5
    epochs: int = 30
    batch_size: int = 128
    lr_model: float = 1e-3
    lr_critic: float = 1e-3
    seed: int = 0
    patience: int = 0
    warmup_epochs: int = 1
    loss: str = "huber"
    kernel: object = "median"
    kernel_train: bool = False
    kernel_steps: int = 1
    lr_kernel: float = 1e-3
    n_shuffles: int = 1
    critic_hidden: tuple = (64, 64)
    ema_rate: float = 0.01
    fusion: str = "concat"
    embed_dim: int = 4
    encoder_hidden: tuple = (64, 64)
    head_hidden: tuple = (64,)

    def __post_init__(self):
        m = str(self.measure)
        self.measure = "none" if m.lower() == "none" else m.upper()
        self.critic_hidden = tuple(self.critic_hidden)
        self.encoder_hidden = tuple(self.encoder_hidden)
        self.head_hidden = tuple(self.head_hidden)

    def validate(self) -> "TrainConfig":
        if self.measure not in TRAIN_MEASURES:
            raise ConfigError(f"measure must be one of {TRAIN_MEASURES}, got {self.measure!r}")
        if self.lam < 0 or not math.isfinite(self.lam):
            raise ConfigError(f"lambda must be a finite nonnegative number, got {self.lam}")
        if self.critic_steps < 1:
            raise ConfigError("critic_steps must be at least 1")
        if self.epochs < 0 or self.warmup_epochs < 0 or self.patience < 0:
            raise ConfigError("epochs, warmup_epochs and patience must be nonnegative")
        if self.measure == "KL" and self.batch_size < MIN_DV_ROWS:
            raise ConfigError(f"KL synergy needs batch_size >= {MIN_DV_ROWS}, got {self.batch_size}")
        if self.measure == "MMD" and self.batch_size < MIN_MMD_BATCH:
            raise ConfigError(f"MMD synergy needs batch_size >= {MIN_MMD_BATCH}, got {self.batch_size}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        return self

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.measure == "none" else float(self.lam)

    @property
    def variant(self) -> str:
        return "MLE" if self.measure == "none" else f"S_{self.measure}"

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("critic_hidden", "encoder_hidden", "head_hidden"):
            d[k] = list(d[k])
        if not isinstance(self.kernel, (str, int, float, type(None))):
            d["kernel"] = self.kernel.describe()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training options: {', '.join(sorted(unknown))}")
        return cls(**d)


def build_model(modality_widths: Sequence[int], cfg: TrainConfig) -> FusionModel:
    """Initial model; depends only on widths, architecture fields and ``cfg.seed``."""
    return FusionModel.build(
        modality_widths, cfg.fusion, cfg.embed_dim, SeededRng(cfg.seed).split("model"),
        cfg.encoder_hidden, cfg.head_hidden,
    )


class KLPenalty:
    """Amortized DV synergy: persistent critics updated before each model step."""

    def __init__(self, embed_dims, cfg: TrainConfig, rng: SeededRng):
        self.bank = CriticBank(embed_dims, rng, cfg.critic_hidden, cfg.lr_critic, cfg.ema_rate)
        self.steps = cfg.critic_steps
        self.cfg = SynergyConfig("KL")

    def update(self, z_list, rng):
        self.bank.train(z_list, rng, self.steps)

    def value_and_grad(self, z_list, rng):
        return synergy_grad_embeddings(z_list, self.cfg, rng, critics=self.bank.critics)


class MMDPenalty:
    """MMD synergy with a fixed kernel, or with adversarially trained deep kernels."""

    def __init__(self, embed_dims, cfg: TrainConfig, rng: SeededRng):
        self.cfg = SynergyConfig("MMD", kernel=cfg.kernel, n_shuffles=cfg.n_shuffles)
        self.bank = None
        self.steps = cfg.kernel_steps
        if cfg.kernel_train:
            if cfg.kernel != "deep":
                raise ConfigError("kernel_train requires kernel='deep'")
            self.bank = KernelBank(embed_dims, rng, lr=cfg.lr_kernel, n_shuffles=cfg.n_shuffles)

    def update(self, z_list, rng):
        if self.bank is not None:
            self.bank.train(z_list, rng, self.steps)

    def value_and_grad(self, z_list, rng):
        kernels = self.bank.kernels(z_list) if self.bank is not None else None
        return synergy_grad_embeddings(z_list, self.cfg, rng, kernels=kernels)


def make_penalty(cfg: TrainConfig, embed_dims, rng: SeededRng):
    if cfg.measure == "KL":
        return KLPenalty(embed_dims, cfg, rng)
    if cfg.measure == "MMD":
        return MMDPenalty(embed_dims, cfg, rng)
    return None


@dataclass
class StepRecord:
    task_loss: float
    synergy: float | None
    lambda_effective: float
    total_loss: float
    n_rows: int


def train_step(
    model: FusionModel,
    optimizer: AdamState,
    penalty,
    batch: ModalityBatch,
    cfg: TrainConfig,
    rng: SeededRng,
    lam: float | None = None,
) -> StepRecord:
    """Critic phase (KL only) then one Adam step on the penalized loss.

    ``lam`` overrides ``cfg.effective_lambda`` (used for warmup).
    """
    lam = cfg.effective_lambda if lam is None else lam
    pred, cache = model.forward(batch.modalities)
    task, g_pred = task_loss(pred, batch.labels, cfg.loss)
    syn, g_extra = None, None
    if penalty is not None:
        penalty.update(cache.z_list, rng.split("critics"))
        syn, g_syn = penalty.value_and_grad(cache.z_list, rng.split("synergy"))
        if lam > 0:
            g_extra = [-lam * g for g in g_syn]
    total = total_loss(task, 0.0 if syn is None else syn, lam)
    if not math.isfinite(total):
        raise NumericError(f"non-finite loss (task={task}, synergy={syn}, lambda={lam})")
    grads = model.backward(cache, g_pred, g_extra)
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NumericError("non-finite model gradient")
    model.set_params(adam_step(model.params(), grads, optimizer))
    return StepRecord(task, syn, lam, total, batch.n_rows)


@dataclass
class EpochRecord:
    epoch: int
    task_loss: float
    synergy: float | None
    lambda_effective: float
    total_loss: float
    n_steps: int
    val: dict | None


@dataclass
class TrainReport:
    config: dict
    seed: int
    epochs: list = field(default_factory=list)
    initial_val: dict | None = None
    best_epoch: int | None = None
    test: dict | None = None
    synergy_final: float | None = None
    wall_clock_seconds: float | None = None
    stopped_early: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        return {"schema": REPORT_SCHEMA, "schema_version": REPORT_VERSION, "spec_version": SPEC_VERSION, **d}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainReport":
        d = {k: v for k, v in d.items() if k not in ("schema", "schema_version", "spec_version")}
        d["epochs"] = [EpochRecord(**e) if isinstance(e, dict) else e for e in d.get("epochs", [])]
        return cls(**d)


def _mean_or_none(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def train(
    model: FusionModel,
    splits: dict,
    cfg: TrainConfig,
    on_step: Callable[[int, int, ModalityBatch, StepRecord], None] | None = None,
    penalty=None,
) -> TrainReport:
    """Train in place and return the report.

    ``splits`` maps ``"train"``, ``"val"`` and ``"test"`` to batches. The model
    ends up holding the parameters of the epoch with the lowest validation
    MAE. ``penalty`` replaces the synergy term built from ``cfg``.
    """
    cfg.validate()
    train_b, val_b, test_b = splits["train"], splits.get("val"), splits.get("test")
    if train_b is None or train_b.n_rows == 0:
        raise ConfigError("training split is empty")
    if cfg.patience and (val_b is None or val_b.n_rows == 0):
        raise ConfigError("early stopping needs a nonempty validation split")
    if train_b.labels is None:
        raise ConfigError("training split has no labels")
    n_batches = train_b.n_rows // cfg.batch_size
    if cfg.epochs and n_batches == 0:
        raise ConfigError(f"training split ({train_b.n_rows} rows) is smaller than one batch ({cfg.batch_size})")

    started = time.perf_counter()
    rng = SeededRng(cfg.seed)
    optimizer = AdamState.for_params(model.params(), lr=cfg.lr_model)
    if penalty is None:
        penalty = make_penalty(cfg, model.embed_dims, rng.split("penalty"))
    report = TrainReport(config=cfg.to_dict(), seed=cfg.seed)

    has_val = val_b is not None and val_b.n_rows >= 2
    if has_val:
        report.initial_val = evaluate(model, val_b).to_dict()
    best_mae, best_params, best_epoch, stale = math.inf, None, None, 0

    for epoch in range(cfg.epochs):
        erng = rng.split(f"epoch-{epoch}")
        order = erng.split("order").permutation(train_b.n_rows)
        lam = 0.0 if epoch < cfg.warmup_epochs else cfg.effective_lambda
        steps = []
        for b in range(n_batches):
            batch = train_b.rows(order[b * cfg.batch_size : (b + 1) * cfg.batch_size])
            rec = train_step(model, optimizer, penalty, batch, cfg, erng.split(f"step-{b}"), lam)
            if on_step is not None:
                on_step(epoch, b, batch, rec)
            steps.append(rec)
        task = float(np.mean([s.task_loss for s in steps]))
        syn = _mean_or_none([s.synergy for s in steps])
        val = evaluate(model, val_b).to_dict() if has_val else None
        report.epochs.append(
            EpochRecord(epoch, task, syn, lam, total_loss(task, syn or 0.0, lam), len(steps), val)
        )
        score = val["mae"] if val is not None else task
        if score < best_mae:
            best_mae, best_params, best_epoch, stale = score, model.params(), epoch, 0
        else:
            stale += 1
            if cfg.patience and stale >= cfg.patience:
                report.stopped_early = True
                break

    if best_params is not None:
        model.set_params(best_params)
    report.best_epoch = best_epoch
    if test_b is not None and test_b.n_rows >= 2:
        report.test = evaluate(model, test_b).to_dict()
    if report.epochs:
        report.synergy_final = report.epochs[-1].synergy
    report.wall_clock_seconds = time.perf_counter() - started
    return report


# -- experiment grid -------------------------------------------------------------

VARIANT_MEASURE = {"MLE": "none", "S_KL": "KL", "S_MMD": "MMD"}
AGG_METRICS = ("acc7", "acc2", "mae", "corr", "synergy_final")
RUN_COLUMNS = ("model", "loss_variant", "lambda", "seed", "acc7", "acc2", "mae", "corr", "synergy_final")


@dataclass
class GridConfig:
    models: tuple = ("concat", "tensor")
    variants: tuple = ("MLE", "S_KL", "S_MMD")
    lambdas: tuple = (0.01, 0.1, 0.5)
    seeds: tuple = (0, 1, 2, 3, 4)
    base: TrainConfig = field(default_factory=TrainConfig)

    def cells(self) -> list[tuple[str, str, float, int]]:
        out = []
        for model in self.models:
            for variant in self.variants:
                if variant not in VARIANT_MEASURE:
                    raise ConfigError(f"unknown loss variant {variant!r}; use {tuple(VARIANT_MEASURE)}")
                lams = (0.0,) if variant == "MLE" else self.lambdas
                for lam in lams:
                    for seed in self.seeds:
                        out.append((model, variant, float(lam), int(seed)))
        if not out:
            raise ConfigError("experiment grid is empty")
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "GridConfig":
        d = dict(d)
        base = TrainConfig.from_dict(d.pop("base", {}))
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown grid options: {', '.join(sorted(unknown))}")
        return cls(**{k: tuple(v) for k, v in d.items()}, base=base)


def _run_cell(args):
    cell, base, splits = args
    model_kind, variant, lam, seed = cell
    cfg = replace(base, fusion=model_kind, measure=VARIANT_MEASURE[variant], lam=lam, seed=seed)
    try:
        model = build_model(splits["train"].widths, cfg)
        return train(model, splits, cfg).to_dict()
    except Exception as exc:  # recorded, grid continues
        return {"error": f"{type(exc).__name__}: {exc}", "traceback": traceback.format_exc(),
                "config": cfg.to_dict(), "seed": seed}


def _row(cell, report: dict) -> dict:
    model_kind, variant, lam, seed = cell
    test = report.get("test") or {}
    return {
        "model": model_kind,
        "loss_variant": variant,
        "lambda": lam,
        "seed": seed,
        "acc7": test.get("acc7"),
        "acc2": test.get("acc2"),
        "mae": test.get("mae"),
        "corr": test.get("pearson_corr"),
        "synergy_final": report.get("synergy_final"),
        "val_mae": _best_val_mae(report),
        "error": report.get("error"),
    }


def _best_val_mae(report: dict):
    be = report.get("best_epoch")
    if be is None or "epochs" not in report:
        return None
    val = report["epochs"][be].get("val")
    return None if val is None else val["mae"]


def aggregate(rows: list[dict]) -> list[dict]:
    """Mean and std over seeds per (model, loss_variant, lambda), in first-seen order."""
    keys, groups = [], {}
    for r in rows:
        k = (r["model"], r["loss_variant"], r["lambda"])
        if k not in groups:
            keys.append(k)
            groups[k] = []
        groups[k].append(r)
    out = []
    for k in keys:
        rs = [r for r in groups[k] if r.get("error") is None]
        agg = {"model": k[0], "loss_variant": k[1], "lambda": k[2], "n_runs": len(rs),
               "n_failed": len(groups[k]) - len(rs)}
        for m in AGG_METRICS:
            vals = [r[m] for r in rs if r[m] is not None]
            agg[f"{m}_mean"] = float(np.mean(vals)) if vals else None
            agg[f"{m}_std"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else (0.0 if vals else None)
        out.append(agg)
    return out


@dataclass
class GridResult:
    cells: list
    reports: list
    rows: list
    table: list

    def runs_csv(self) -> str:
        return _csv(self.rows, RUN_COLUMNS)

    def table_csv(self) -> str:
        cols = ["model", "loss_variant", "lambda", "n_runs", "n_failed"]
        for m in AGG_METRICS:
            cols += [f"{m}_mean", f"{m}_std"]
        return _csv(self.table, cols)

    def to_dict(self, include_reports: bool = True) -> dict:
        d = {"schema": "synfuse.grid_report", "schema_version": 1, "spec_version": SPEC_VERSION,
             "runs": self.rows, "table": self.table}
        if include_reports:
            d["reports"] = self.reports
        return d


def _csv(rows, cols) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(cols), extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else (repr(r[k]) if isinstance(r[k], float) else r[k])) for k in cols})
    return buf.getvalue()


def run_experiment_grid(grid: GridConfig, splits: dict, n_jobs: int = 1, progress=None) -> GridResult:
    """Train every (model, variant, lambda, seed) cell; failures are recorded."""
    cells = grid.cells()
    jobs = [(cell, grid.base, splits) for cell in cells]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            reports = list(pool.map(_run_cell, jobs))
    else:
        reports = []
        for job in jobs:
            reports.append(_run_cell(job))
            if progress is not None:
                progress(job[0], reports[-1])
    rows = [_row(c, r) for c, r in zip(cells, reports)]
    return GridResult(cells, reports, rows, aggregate(rows))


def compare_to_baseline(rows: list[dict], select_by: str = "val_mae") -> list[dict]:
    """Per (model, variant, seed): the best-lambda run against the MLE run.

    The lambda is chosen by ``select_by`` (validation MAE by default).
    """
    base = {(r["model"], r["seed"]): r for r in rows if r["loss_variant"] == "MLE" and r.get("error") is None}
    best = {}
    for r in rows:
        if r["loss_variant"] == "MLE" or r.get("error") is not None:
            continue
        k = (r["model"], r["loss_variant"], r["seed"])
        if k not in best or r[select_by] < best[k][select_by]:
            best[k] = r
    out = []
    for (model, variant, seed), r in best.items():
        b = base.get((model, seed))
        if b is None:
            continue
        out.append({
            "model": model, "loss_variant": variant, "seed": seed, "lambda": r["lambda"],
            "mae": r["mae"], "mae_mle": b["mae"],
            "improvement": (b["mae"] - r["mae"]) / b["mae"],
        })
    return out
