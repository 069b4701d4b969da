"""Bipartition synergy over a set of modalities.

Synergy here is the uniform average, over every split of the modality set
into a part ``S`` and its complement with ``|S| <= n // 2``, of the dependence
between the concatenated views of ``S`` and of the complement. For three
modalities that is the mean of the three one-vs-two dependencies. Splits with
``|S| == n / 2`` are counted once, with modality 0 on the left. Modalities
are scored in name order, so relabeling them cannot change the value.

Dependence is either the DV mutual information bound (``"KL"``) or the MMD
dependence (``"MMD"``). :func:`synergy_grad_embeddings` provides the gradient
of the same quantity with respect to the embeddings, holding critics or the
kernel fixed, which is what the training loop needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from itertools import combinations
from typing import Sequence

import numpy as np

from .batch import ModalityBatch, concat_subset, default_names
from .errors import ConfigError, InsufficientSamplesError, UsageError
from .estimators import (
    MIN_DV_ROWS,
    MIN_PAIRED_ROWS,
    DeepKernel,
    DependenceEstimate,
    DvConfig,
    DvCritic,
    GaussianKernel,
    PairedSamples,
    derangement,
    dv_train_step,
    estimate_mi_dv,
    make_deep_kernel,
    median_heuristic,
    mmd2_unbiased_grad,
    mmd2_unbiased_param_grad,
    mmd_dependence,
)
from .nn import AdamState, FeedforwardNet, SeededRng, adam_step, as_rng

MEASURES = ("KL", "MMD")
MAX_MODALITIES = 8


@dataclass(frozen=True)
class Bipartition:
    left: tuple
    right: tuple

    def label(self, names: Sequence[str] | None = None) -> str:
        names = names or default_names(len(self.left) + len(self.right))
        left = ",".join(sorted(names[i] for i in self.left))
        right = ",".join(sorted(names[i] for i in self.right))
        return f"{left}|{right}"


def bipartitions(n: int) -> list[Bipartition]:
    if not 2 <= n <= MAX_MODALITIES:
        raise ConfigError(f"synergy needs between 2 and {MAX_MODALITIES} modalities, got {n}")
    out = []
    full = set(range(n))
    for k in range(1, n // 2 + 1):
        for left in combinations(range(n), k):
            if 2 * k == n and 0 not in left:
                continue
            out.append(Bipartition(tuple(left), tuple(sorted(full - set(left)))))
    return out


@dataclass
class SynergyConfig:
    """Which dependence measure and how to estimate it.

    ``kernel`` (MMD only) is ``"median"`` for a Gaussian kernel with
    median-heuristic bandwidth per split, ``"deep"`` for a fixed random deep
    kernel, a positive float bandwidth, or a kernel object.
    """

    measure: str = "MMD"
    dv: DvConfig | None = None
    kernel: object = None
    n_shuffles: int = 4
    weighting: str = "uniform"

    def __post_init__(self):
        self.measure = str(self.measure).upper()
        if self.measure not in MEASURES:
            raise ConfigError(f"measure must be one of {MEASURES}, got {self.measure!r}")
        if self.weighting != "uniform":
            raise ConfigError("only uniform partition weighting is supported")
        if self.measure == "KL":
            if self.kernel is not None:
                raise ConfigError("a kernel was supplied for the KL measure")
            if self.dv is None:
                self.dv = DvConfig()
        else:
            if self.dv is not None:
                raise ConfigError("a DV critic config was supplied for the MMD measure")
            if self.kernel is None:
                self.kernel = "median"
            if self.n_shuffles < 1:
                raise ConfigError("n_shuffles must be at least 1")

    @property
    def min_rows(self) -> int:
        return MIN_DV_ROWS if self.measure == "KL" else MIN_PAIRED_ROWS


def partition_rng(rng: SeededRng, names: Sequence[str], part: Bipartition) -> SeededRng:
    """Per-split random stream, keyed by modality names so relabeling cannot change it."""
    return rng.split("partition:" + part.label(names))


def _kernel_for(cfg: SynergyConfig, rows: np.ndarray, rng: SeededRng):
    k = cfg.kernel
    if isinstance(k, str):
        if k == "median":
            return GaussianKernel(median_heuristic(rows))
        if k == "deep":
            return make_deep_kernel(rows.shape[1], rng.split("deep-kernel"), median_heuristic(rows))
        raise ConfigError(f"unknown kernel {k!r}")
    if isinstance(k, (int, float)):
        return GaussianKernel(float(k))
    return k


def pairwise_dependence(x, y, cfg: SynergyConfig, rng: SeededRng) -> DependenceEstimate:
    if cfg.measure == "KL":
        seed = int(rng.split("dv-seed").integers(0, 2**63))
        return estimate_mi_dv(x, y, replace(cfg.dv, seed=seed))
    s = PairedSamples(x, y)
    kernel = _kernel_for(cfg, s.stacked(), rng)
    return mmd_dependence(s, kernel, rng.split("shuffles"), cfg.n_shuffles)


def tse_synergy_detail(
    batch: ModalityBatch, cfg: SynergyConfig, rng: SeededRng | int | None = None
) -> tuple[float, list[tuple[Bipartition, DependenceEstimate]]]:
    rng = as_rng(rng)
    if batch.n_rows < cfg.min_rows:
        raise InsufficientSamplesError(
            f"{cfg.measure} synergy needs at least {cfg.min_rows} rows, got {batch.n_rows}"
        )
    # score in name order so relabeling the modalities cannot change the value
    batch = batch.reorder(sorted(range(batch.n_modalities), key=lambda i: batch.names[i]))
    scored = []
    for part in bipartitions(batch.n_modalities):
        est = pairwise_dependence(
            batch.concat_subset(part.left),
            batch.concat_subset(part.right),
            cfg,
            partition_rng(rng, batch.names, part),
        )
        scored.append((part, est))
    # exactly rounded sum: the value cannot depend on partition order
    return math.fsum(est.value for _, est in scored) / len(scored), scored


def tse_synergy(batch: ModalityBatch, cfg: SynergyConfig, rng: SeededRng | int | None = None) -> float:
    return tse_synergy_detail(batch, cfg, rng)[0]


# -- differentiable path ------------------------------------------------------


def _scatter(part: Bipartition, widths, grad_left, grad_right, out):
    for side, g in ((part.left, grad_left), (part.right, grad_right)):
        start = 0
        for i in side:
            out[i] += g[:, start : start + widths[i]]
            start += widths[i]


def _check_embeddings(z_list):
    z_list = [np.asarray(z, dtype=np.float64) for z in z_list]
    n = z_list[0].shape[0]
    if any(z.shape[0] != n for z in z_list):
        raise UsageError("embeddings disagree on row count")
    return z_list, n


def synergy_grad_embeddings(
    z_list: Sequence[np.ndarray],
    cfg: SynergyConfig,
    rng: SeededRng | int | None = None,
    critics: dict | None = None,
    kernels: dict | None = None,
) -> tuple[float, list[np.ndarray]]:
    """Batch synergy of the embeddings and its gradient w.r.t. each embedding.

    KL: ``critics`` maps each :class:`Bipartition` to a trained
    :class:`DvCritic`; only the critic inputs carry gradient. MMD: kernels come
    from ``kernels`` (per split) or ``cfg.kernel``; the kernel and the
    derangements are treated as constants.
    """
    rng = as_rng(rng)
    z_list, n = _check_embeddings(z_list)
    widths = [z.shape[1] for z in z_list]
    names = default_names(len(z_list))
    parts = bipartitions(len(z_list))
    grads = [np.zeros_like(z) for z in z_list]
    total = 0.0
    for part in parts:
        prng = partition_rng(rng, names, part)
        left = concat_subset(z_list, part.left)
        right = concat_subset(z_list, part.right)
        d_l = left.shape[1]
        if cfg.measure == "KL":
            if not critics or part not in critics:
                raise UsageError(f"no critic supplied for split {part.label(names)}")
            perm = derangement(n, prng)
            value, g_joint, g_prod = critics[part].input_gradients(
                PairedSamples(left, right), PairedSamples(left, right[perm])
            )
            g_left = g_joint[:, :d_l] + g_prod[:, :d_l]
            g_right = g_joint[:, d_l:].copy()
            g_right[perm] += g_prod[:, d_l:]
        else:
            joint = np.hstack([left, right])
            kernel = kernels[part] if kernels and part in kernels else _kernel_for(cfg, joint, prng)
            value, g_left, g_right = 0.0, np.zeros_like(left), np.zeros_like(right)
            srng = prng.split("shuffles")  # same stream as mmd_dependence in tse_synergy
            for _ in range(cfg.n_shuffles):
                perm = derangement(n, srng)
                v, g_a, g_b = mmd2_unbiased_grad(joint, np.hstack([left, right[perm]]), kernel)
                value += v / cfg.n_shuffles
                g_left += (g_a[:, :d_l] + g_b[:, :d_l]) / cfg.n_shuffles
                g_right += g_a[:, d_l:] / cfg.n_shuffles
                g_right[perm] += g_b[:, d_l:] / cfg.n_shuffles
        _scatter(part, widths, g_left, g_right, grads)
        total += value
    k = len(parts)
    return total / k, [g / k for g in grads]


class CriticBank:
    """One persistent DV critic per split, trained alternately with a model."""

    def __init__(
        self,
        widths: Sequence[int],
        rng: SeededRng,
        hidden: Sequence[int] = (64, 64),
        lr: float = 1e-3,
        ema_rate: float = 0.01,
        activation: str = "tanh",
    ):
        self.parts = bipartitions(len(widths))
        self.critics = {}
        for part in self.parts:
            d_l = sum(widths[i] for i in part.left)
            d_r = sum(widths[i] for i in part.right)
            self.critics[part] = DvCritic(
                d_l, d_r, rng.split("critic:" + part.label()), hidden, activation, lr, ema_rate
            )

    def train(self, z_list: Sequence[np.ndarray], rng: SeededRng, steps: int = 1) -> list[float]:
        """``steps`` DV ascent steps per critic on fixed embeddings."""
        z_list, n = _check_embeddings(z_list)
        values = []
        for part in self.parts:
            left = concat_subset(z_list, part.left)
            right = concat_subset(z_list, part.right)
            joint = PairedSamples(left, right)
            prng = rng.split("critic-train:" + part.label())
            for _ in range(steps):
                product = PairedSamples(left, right[derangement(n, prng)])
                values.append(dv_train_step(self.critics[part], joint, product))
        return values


class KernelBank:
    """One deep kernel per split whose feature map is trained to maximize the MMD dependence.

    Both bandwidths follow the median heuristic on the current batch (raw
    joint rows and their features) and are treated as constants.
    """

    def __init__(
        self,
        widths: Sequence[int],
        rng: SeededRng,
        hidden: Sequence[int] = (64,),
        features: int = 16,
        lr: float = 1e-3,
        eps_floor: float = 0.1,
        n_shuffles: int = 1,
    ):
        self.parts = bipartitions(len(widths))
        total = int(sum(widths))
        self.eps_floor = eps_floor
        self.n_shuffles = n_shuffles
        self.phis, self.optimizers = {}, {}
        for part in self.parts:
            phi = FeedforwardNet.mlp(total, features, rng.split("phi:" + part.label()), hidden)
            self.phis[part] = phi
            self.optimizers[part] = AdamState.for_params(phi.params(), lr=lr)

    def _kernel(self, part, joint):
        phi = self.phis[part]
        return DeepKernel(phi, median_heuristic(phi(joint)), median_heuristic(joint), self.eps_floor)

    def kernels(self, z_list) -> dict:
        z_list, _ = _check_embeddings(z_list)
        out = {}
        for part in self.parts:
            joint = np.hstack([concat_subset(z_list, part.left), concat_subset(z_list, part.right)])
            out[part] = self._kernel(part, joint)
        return out

    def train(self, z_list, rng: SeededRng, steps: int = 1) -> list[float]:
        z_list, n = _check_embeddings(z_list)
        values = []
        for part in self.parts:
            left = concat_subset(z_list, part.left)
            right = concat_subset(z_list, part.right)
            joint = np.hstack([left, right])
            prng = rng.split("kernel-train:" + part.label())
            phi = self.phis[part]
            for _ in range(steps):
                kernel = self._kernel(part, joint)
                value, grads = 0.0, None
                for _ in range(self.n_shuffles):
                    prod = np.hstack([left, right[derangement(n, prng)]])
                    v, g = mmd2_unbiased_param_grad(joint, prod, kernel)
                    value += v / self.n_shuffles
                    grads = g if grads is None else [a + b for a, b in zip(grads, g)]
                ascent = [-g / self.n_shuffles for g in grads]
                phi.set_params(adam_step(phi.params(), ascent, self.optimizers[part]))
                values.append(value)
        return values
