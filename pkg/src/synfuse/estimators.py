"""Pairwise dependence estimators.

Two routes to measuring how far paired samples ``(x_i, y_i)`` are from
independence:

* a neural Donsker-Varadhan (MINE-style) lower bound on mutual information,
  in nats, with the exponential-moving-average denominator correction;
* the squared MMD between joint rows ``[x_i, y_i]`` and product-of-marginals
  rows ``[x_i, y_pi(i)]`` under a Gaussian or deep kernel.

Product-of-marginals samples always come from a derangement of ``y``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import ConfigError, InsufficientSamplesError, NumericError, ShapeError
from .nn import AdamState, FeedforwardNet, SeededRng, adam_step, as_rng

MIN_PAIRED_ROWS = 4
MIN_DV_ROWS = 64
MIN_DV_STEPS = 100


def _as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D sample matrix, got shape {a.shape}")
    return a


@dataclass
class PairedSamples:
    """Row ``i`` of ``x`` is paired with row ``i`` of ``y``."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = _as_matrix(self.x)
        self.y = _as_matrix(self.y)
        if self.x.shape[0] != self.y.shape[0]:
            raise ShapeError(f"x has {self.x.shape[0]} rows but y has {self.y.shape[0]}")
        if self.x.shape[0] < MIN_PAIRED_ROWS:
            raise InsufficientSamplesError(
                f"need at least {MIN_PAIRED_ROWS} paired rows, got {self.x.shape[0]}"
            )

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def stacked(self) -> np.ndarray:
        return np.hstack([self.x, self.y])


@dataclass
class DependenceEstimate:
    value: float
    n_samples: int
    measure: str  # "KL" (nats) or "MMD" (squared MMD)
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def derangement(n: int, rng: SeededRng) -> np.ndarray:
    """Uniform random permutation of ``range(n)`` with no fixed points."""
    if n < 2:
        raise InsufficientSamplesError(f"no derangement exists for n={n}")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def shuffle_product_marginals(s: PairedSamples, rng: SeededRng) -> PairedSamples:
    """Pair each ``x_i`` with some ``y_j``, ``j != i``; both marginals are kept."""
    if s.n < MIN_PAIRED_ROWS:
        raise InsufficientSamplesError(f"need at least {MIN_PAIRED_ROWS} rows to shuffle")
    perm = derangement(s.n, rng)
    return PairedSamples(s.x, s.y[perm])


# -- Donsker-Varadhan -------------------------------------------------------


def logmeanexp(t: np.ndarray) -> float:
    t = np.asarray(t, dtype=np.float64).ravel()
    top = np.max(t)
    return float(top + np.log(np.mean(np.exp(t - top))))


def dv_value(t_joint: np.ndarray, t_product: np.ndarray) -> float:
    """``mean(T_joint) - log mean(exp T_product)``."""
    if not (np.all(np.isfinite(t_joint)) and np.all(np.isfinite(t_product))):
        bad = int(np.sum(~np.isfinite(t_joint)) + np.sum(~np.isfinite(t_product)))
        raise NumericError(f"critic produced {bad} non-finite outputs")
    return float(np.mean(t_joint) - logmeanexp(t_product))


class DvCritic:
    """Witness network ``T(x, y)`` plus the running denominator of MINE.

    The moving average of ``mean(exp T)`` over product batches is stored in
    log space so large critic outputs cannot overflow it.
    """

    def __init__(
        self,
        d_x: int,
        d_y: int,
        rng: SeededRng,
        hidden: Sequence[int] = (64, 64),
        activation: str = "tanh",
        lr: float = 1e-3,
        ema_rate: float = 0.01,
    ):
        if not 0.0 < ema_rate < 1.0:
            raise ConfigError(f"ema_rate must lie in (0, 1), got {ema_rate}")
        self.d_x, self.d_y = d_x, d_y
        self.net = FeedforwardNet.mlp(d_x + d_y, 1, rng, hidden, activation)
        self.ema_rate = ema_rate
        self.log_ema: float | None = None
        self.optimizer = AdamState.for_params(self.net.params(), lr=lr)

    @property
    def ema_denominator(self) -> float | None:
        return None if self.log_ema is None else float(np.exp(self.log_ema))

    def _check(self, s: PairedSamples):
        if s.x.shape[1] != self.d_x or s.y.shape[1] != self.d_y:
            raise ShapeError(
                f"critic expects widths ({self.d_x}, {self.d_y}), "
                f"got ({s.x.shape[1]}, {s.y.shape[1]})"
            )

    def scores(self, s: PairedSamples) -> np.ndarray:
        self._check(s)
        return self.net(s.stacked())[:, 0]

    def input_gradients(
        self, joint: PairedSamples, product: PairedSamples
    ) -> tuple[float, np.ndarray, np.ndarray]:
        """Bound value and its gradient w.r.t. the joint and product critic inputs.

        Uses the exact batch denominator; critic parameters are not touched.
        """
        value, _, g_in = self._exact_backward(joint, product)
        return value, g_in[: joint.n], g_in[joint.n :]

    def bound_param_grad(
        self, joint: PairedSamples, product: PairedSamples
    ) -> tuple[float, list[np.ndarray]]:
        """Bound value and its gradient w.r.t. the critic parameters (exact batch denominator)."""
        value, grads, _ = self._exact_backward(joint, product)
        return value, grads

    def _exact_backward(self, joint: PairedSamples, product: PairedSamples):
        # d bound / d T is 1/n on joint rows and minus the softmax of T on product rows
        self._check(joint)
        self._check(product)
        n_j = joint.n
        out, cache = self.net.forward(np.vstack([joint.stacked(), product.stacked()]))
        t = out[:, 0]
        value = dv_value(t[:n_j], t[n_j:])
        w = np.exp(t[n_j:] - np.max(t[n_j:]))
        w /= w.sum()
        g = np.concatenate([np.full(n_j, 1.0 / n_j), -w])[:, None]
        grads, g_in = self.net.backward(cache, g)
        return value, grads, g_in


def dv_bound(critic: DvCritic, joint: PairedSamples, product: PairedSamples) -> float:
    return dv_value(critic.scores(joint), critic.scores(product))


def dv_train_step(critic: DvCritic, joint: PairedSamples, product: PairedSamples) -> float:
    """One Adam ascent step on the DV bound; returns the pre-step batch bound.

    The log-denominator gradient ``grad mean(e^T) / mean(e^T)`` is computed with
    the moving average in place of the batch mean. The average starts at the
    first batch's denominator and absorbs each batch after its step.
    """
    critic._check(joint)
    critic._check(product)
    n_j, n_p = joint.n, product.n
    rows = np.vstack([joint.stacked(), product.stacked()])
    out, cache = critic.net.forward(rows)
    t = out[:, 0]
    value = dv_value(t[:n_j], t[n_j:])
    log_batch = logmeanexp(t[n_j:])
    log_denom = log_batch if critic.log_ema is None else critic.log_ema
    # descent direction on -bound
    g = np.empty((n_j + n_p, 1))
    g[:n_j, 0] = -1.0 / n_j
    g[n_j:, 0] = np.exp(t[n_j:] - log_denom) / n_p
    if not np.all(np.isfinite(g)):
        raise NumericError("DV gradient weights overflowed; critic outputs diverged")
    grads, _ = critic.net.backward(cache, g)
    critic.net.set_params(adam_step(critic.net.params(), grads, critic.optimizer))
    if critic.log_ema is None:
        critic.log_ema = log_batch
    else:
        r = critic.ema_rate
        critic.log_ema = float(np.logaddexp(np.log1p(-r) + critic.log_ema, np.log(r) + log_batch))
    return value


@dataclass
class DvConfig:
    steps: int = 2000
    batch: int = 512
    lr: float = 1e-3
    ema_rate: float = 0.01
    seed: int = 0
    hidden: tuple = (64, 64)
    activation: str = "tanh"
    eval_fraction: float = 0.1
    standardize: bool = True

    def validate(self):
        if self.steps < MIN_DV_STEPS:
            raise ConfigError(f"steps must be at least {MIN_DV_STEPS}, got {self.steps}")
        if self.batch < MIN_PAIRED_ROWS:
            raise ConfigError(f"batch must be at least {MIN_PAIRED_ROWS}")
        if not 0.0 < self.eval_fraction <= 1.0:
            raise ConfigError("eval_fraction must lie in (0, 1]")


def _standardize(a: np.ndarray) -> np.ndarray:
    sd = a.std(axis=0)
    sd[sd == 0] = 1.0
    return (a - a.mean(axis=0)) / sd


def estimate_mi_dv(x, y, config: DvConfig | None = None) -> DependenceEstimate:
    """Train a fresh critic on ``(x, y)`` and report the DV bound in nats.

    The reported value averages the full-data bound (against a fresh
    derangement each time) over the final ``eval_fraction`` of training steps.
    """
    cfg = config or DvConfig()
    cfg.validate()
    x, y = _as_matrix(x), _as_matrix(y)
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"x has {x.shape[0]} rows but y has {y.shape[0]}")
    n = x.shape[0]
    if n < MIN_DV_ROWS:
        raise InsufficientSamplesError(
            f"DV estimation needs at least {MIN_DV_ROWS} rows, got {n}"
        )
    if cfg.standardize:
        x, y = _standardize(x), _standardize(y)
    rng = SeededRng(cfg.seed)
    critic = DvCritic(
        x.shape[1], y.shape[1], rng.split("critic-init"), cfg.hidden, cfg.activation,
        cfg.lr, cfg.ema_rate,
    )
    batch_rng, shuffle_rng, eval_rng = rng.split("batches"), rng.split("shuffles"), rng.split("eval")
    full = PairedSamples(x, y)
    batch = min(cfg.batch, n)
    n_eval = max(1, int(round(cfg.eval_fraction * cfg.steps)))
    evals = []
    for step in range(cfg.steps):
        idx = batch_rng.generator.choice(n, size=batch, replace=False)
        joint = PairedSamples(x[idx], y[idx])
        dv_train_step(critic, joint, shuffle_product_marginals(joint, shuffle_rng))
        if step >= cfg.steps - n_eval:
            evals.append(dv_bound(critic, full, shuffle_product_marginals(full, eval_rng)))
    return DependenceEstimate(
        float(np.mean(evals)), n, "KL",
        {"steps": cfg.steps, "batch": batch, "n_eval": len(evals)},
    )


# -- kernels and MMD ----------------------------------------------------------


@dataclass
class GaussianKernel:
    """``exp(-|a - b|^2 / (2 sigma^2))``."""

    sigma: float

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ConfigError(f"kernel bandwidth must be positive, got {self.sigma}")

    def gram(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * self.sigma**2))

    def gram_grad(self, a, b, upstream, gram=None):
        """Pull ``dL/dK`` back to ``dL/da`` and ``dL/db``."""
        k = self.gram(a, b) if gram is None else gram
        gk = upstream * k
        s2 = self.sigma**2
        da = -(gk.sum(axis=1)[:, None] * a - gk @ b) / s2
        db = (gk.T @ a - gk.sum(axis=0)[:, None] * b) / s2
        return da, db

    def describe(self) -> dict:
        return {"kind": "gaussian", "sigma": self.sigma}


def gaussian_kernel(a, b, sigma: float) -> float:
    if not sigma > 0:
        raise ConfigError(f"kernel bandwidth must be positive, got {sigma}")
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.exp(-np.dot(d.ravel(), d.ravel()) / (2.0 * sigma**2)))


@dataclass
class DeepKernel:
    """Feature-space Gaussian blended with a raw-input Gaussian.

    ``k(a, b) = [(1 - eps) k_phi(phi(a), phi(b)) + eps] * k_raw(a, b)``, which
    stays characteristic for any feature map ``phi``.
    """

    phi: FeedforwardNet
    sigma_feature: float
    sigma_raw: float
    eps_floor: float = 0.1

    def __post_init__(self):
        self._feat = GaussianKernel(self.sigma_feature)
        self._raw = GaussianKernel(self.sigma_raw)
        if not 0.0 < self.eps_floor <= 1.0:
            raise ConfigError(f"eps_floor must lie in (0, 1], got {self.eps_floor}")

    def _parts(self, a, b):
        fa, ca = self.phi.forward(a)
        fb, cb = self.phi.forward(b)
        kf = self._feat.gram(fa, fb)
        kr = self._raw.gram(a, b)
        return fa, ca, fb, cb, kf, kr

    def gram(self, a, b):
        if a.shape[1] != self.phi.d_in:
            raise ShapeError(f"feature map expects width {self.phi.d_in}, got {a.shape[1]}")
        _, _, _, _, kf, kr = self._parts(a, b)
        return ((1.0 - self.eps_floor) * kf + self.eps_floor) * kr

    def gram_grad(self, a, b, upstream, gram=None):
        return self.gram_grad_full(a, b, upstream)[:2]

    def gram_grad_full(self, a, b, upstream):
        """Input gradients plus the gradient w.r.t. the feature-map parameters."""
        fa, ca, fb, cb, kf, kr = self._parts(a, b)
        up_f = upstream * kr * (1.0 - self.eps_floor)
        up_r = upstream * ((1.0 - self.eps_floor) * kf + self.eps_floor)
        dfa, dfb = self._feat.gram_grad(fa, fb, up_f, kf)
        dra, drb = self._raw.gram_grad(a, b, up_r, kr)
        pa, ga = self.phi.backward(ca, dfa)
        pb, gb = self.phi.backward(cb, dfb)
        return dra + ga, drb + gb, [x + y for x, y in zip(pa, pb)]

    def describe(self) -> dict:
        return {
            "kind": "deep",
            "sigma_feature": self.sigma_feature,
            "sigma_raw": self.sigma_raw,
            "eps_floor": self.eps_floor,
            "phi": self.phi.describe(),
        }


def deep_kernel(spec: DeepKernel, a, b) -> float:
    a = _as_matrix(np.asarray(a, dtype=np.float64).reshape(1, -1))
    b = _as_matrix(np.asarray(b, dtype=np.float64).reshape(1, -1))
    return float(spec.gram(a, b)[0, 0])


def make_deep_kernel(
    width: int,
    rng: SeededRng,
    sigma_raw: float,
    sigma_feature: float = 1.0,
    features: int = 16,
    hidden: Sequence[int] = (64, 64),
    eps_floor: float = 0.1,
) -> DeepKernel:
    """Deep kernel with an untrained random feature map."""
    phi = FeedforwardNet.mlp(width, features, rng, hidden, "relu")
    return DeepKernel(phi, sigma_feature, sigma_raw, eps_floor)


def median_heuristic(rows, max_rows: int = 1000) -> float:
    """Median pairwise Euclidean distance, on a fixed subsample when large."""
    rows = _as_matrix(rows)
    if rows.shape[0] < 2:
        raise InsufficientSamplesError("median heuristic needs at least 2 rows")
    if rows.shape[0] > max_rows:
        pick = np.sort(np.random.default_rng(0).choice(rows.shape[0], max_rows, replace=False))
        rows = rows[pick]
    d = pdist(rows)
    sigma = float(np.median(d))
    if sigma <= 0.0:
        sigma = float(np.mean(d))
    if sigma <= 0.0:
        sigma = 1.0
    return sigma


def _offdiag_mean(k: np.ndarray) -> float:
    n = k.shape[0]
    return float((k.sum() - np.trace(k)) / (n * (n - 1)))


def _check_mmd_inputs(a, b):
    a, b = _as_matrix(a), _as_matrix(b)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise InsufficientSamplesError(
            f"unbiased MMD needs at least 2 rows per sample, got {a.shape[0]} and {b.shape[0]}"
        )
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"sample widths differ: {a.shape[1]} vs {b.shape[1]}")
    return a, b


def mmd2_unbiased(a, b, kernel) -> float:
    """Unbiased U-statistic estimate of squared MMD between two samples."""
    a, b = _check_mmd_inputs(a, b)
    return _offdiag_mean(kernel.gram(a, a)) + _offdiag_mean(kernel.gram(b, b)) - 2.0 * float(
        np.mean(kernel.gram(a, b))
    )


def mmd2_unbiased_grad(a, b, kernel) -> tuple[float, np.ndarray, np.ndarray]:
    """Value of :func:`mmd2_unbiased` and its gradients w.r.t. ``a`` and ``b``."""
    a, b = _check_mmd_inputs(a, b)
    n, m = a.shape[0], b.shape[0]
    kaa, kbb, kab = kernel.gram(a, a), kernel.gram(b, b), kernel.gram(a, b)
    value = _offdiag_mean(kaa) + _offdiag_mean(kbb) - 2.0 * float(np.mean(kab))
    g_aa = (1.0 - np.eye(n)) / (n * (n - 1))
    g_bb = (1.0 - np.eye(m)) / (m * (m - 1))
    g_ab = np.full((n, m), -2.0 / (n * m))
    d1, d2 = kernel.gram_grad(a, a, g_aa, kaa)
    e1, e2 = kernel.gram_grad(b, b, g_bb, kbb)
    f1, f2 = kernel.gram_grad(a, b, g_ab, kab)
    return value, d1 + d2 + f1, e1 + e2 + f2


def mmd2_unbiased_param_grad(a, b, kernel: DeepKernel) -> tuple[float, list[np.ndarray]]:
    """Value of :func:`mmd2_unbiased` and its gradient w.r.t. the feature-map parameters."""
    a, b = _check_mmd_inputs(a, b)
    n, m = a.shape[0], b.shape[0]
    value = mmd2_unbiased(a, b, kernel)
    terms = (
        (a, a, (1.0 - np.eye(n)) / (n * (n - 1))),
        (b, b, (1.0 - np.eye(m)) / (m * (m - 1))),
        (a, b, np.full((n, m), -2.0 / (n * m))),
    )
    total = None
    for left, right, up in terms:
        g = kernel.gram_grad_full(left, right, up)[2]
        total = g if total is None else [x + y for x, y in zip(total, g)]
    return value, total


def resolve_kernel(kernel, rows: np.ndarray):
    """``None`` or ``"median"`` becomes a Gaussian kernel with median-heuristic bandwidth."""
    if kernel is None or (isinstance(kernel, str) and kernel == "median"):
        return GaussianKernel(median_heuristic(rows))
    return kernel


def mmd_dependence(
    s: PairedSamples, kernel=None, rng: SeededRng | int | None = None, n_shuffles: int = 4
) -> DependenceEstimate:
    """Squared MMD between joint rows and derangement-shuffled rows.

    The statistic is averaged over ``n_shuffles`` independent derangements.
    """
    if n_shuffles < 1:
        raise ConfigError("n_shuffles must be at least 1")
    rng = as_rng(rng)
    joint = s.stacked()
    kernel = resolve_kernel(kernel, joint)
    n = s.n
    k_joint = _offdiag_mean(kernel.gram(joint, joint))
    values = []
    for _ in range(n_shuffles):
        prod = np.hstack([s.x, s.y[derangement(n, rng)]])
        values.append(
            k_joint + _offdiag_mean(kernel.gram(prod, prod)) - 2.0 * float(np.mean(kernel.gram(joint, prod)))
        )
    return DependenceEstimate(
        float(np.mean(values)), n, "MMD",
        {"n_shuffles": n_shuffles, "kernel": kernel.describe()},
    )


def permutation_null(
    s: PairedSamples, kernel=None, rng: SeededRng | int | None = None, n_perm: int = 99,
    n_shuffles: int = 4,
) -> tuple[float, np.ndarray]:
    """Observed MMD dependence and its null draws.

    Each null draw recomputes the statistic after randomly re-pairing ``y``,
    which destroys any dependence while keeping both marginals. The kernel is
    resolved once on the observed joint rows and shared by all draws.
    """
    rng = as_rng(rng)
    kernel = resolve_kernel(kernel, s.stacked())
    observed = mmd_dependence(s, kernel, rng.split("observed"), n_shuffles).value
    nulls = np.empty(n_perm)
    for i in range(n_perm):
        prng = rng.split(f"null-{i}")
        shuffled = PairedSamples(s.x, s.y[prng.permutation(s.n)])
        nulls[i] = mmd_dependence(shuffled, kernel, prng, n_shuffles).value
    return observed, nulls


def pvalue_from_null(observed: float, nulls: np.ndarray) -> float:
    nulls = np.asarray(nulls)
    return float((1 + np.sum(nulls >= observed)) / (nulls.size + 1))


def permutation_pvalue(
    s: PairedSamples, kernel=None, rng: SeededRng | int | None = None, n_perm: int = 99,
    n_shuffles: int = 4,
) -> float:
    if n_perm < 19:
        raise ConfigError(f"n_perm must be at least 19, got {n_perm}")
    observed, nulls = permutation_null(s, kernel, rng, n_perm, n_shuffles)
    return pvalue_from_null(observed, nulls)
