"""Finite-difference verification of every hand-written gradient.

Each suite draws small random instances, computes the analytic gradient and
compares it with central differences coordinate by coordinate using
:func:`synfuse.nn.max_relative_error`. Piecewise-linear pieces (ReLU, Huber)
are only checked at points at least ``KINK_MARGIN`` away from a kink, so a
finite-difference step never straddles one.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .estimators import (
    DeepKernel,
    DvCritic,
    GaussianKernel,
    PairedSamples,
    dv_bound,
    mmd2_unbiased,
    mmd2_unbiased_grad,
    mmd2_unbiased_param_grad,
)
from .fusion import FusionModel, task_loss
from .nn import FeedforwardNet, SeededRng, finite_diff_grad, max_relative_error
from .synergy import SynergyConfig, bipartitions, synergy_grad_embeddings
from .batch import concat_subset

DEFAULT_TOL = 1e-4
DEFAULT_INSTANCES = 20
FD_EPS = 1e-5
KINK_MARGIN = 1e-3
_MAX_DRAWS = 50


@dataclass
class SuiteResult:
    name: str
    n_instances: int
    max_rel_error: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def to_dict(self) -> dict:
        return {**asdict(self), "passed": self.passed}


@dataclass
class GradcheckReport:
    suites: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.suites)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "suites": [s.to_dict() for s in self.suites]}


def _net(rng: SeededRng, d_in: int, d_out: int, hidden, activation: str, out_activation="identity"):
    net = FeedforwardNet.build([d_in, *hidden, d_out], rng, activation, out_activation)
    # nonzero biases so kinks and saturation are exercised away from the origin
    params = net.params()
    for k in range(1, len(params), 2):
        params[k] = rng.normal(size=params[k].shape, scale=0.3)
    net.set_params(params)
    return net


def _relu_clear(net: FeedforwardNet, x: np.ndarray) -> bool:
    _, cache = net.forward(x)
    for layer, pre in zip(net.layers, cache.preacts):
        if layer.activation == "relu" and np.min(np.abs(pre)) < KINK_MARGIN:
            return False
    return True


def _draw(make: Callable[[SeededRng], tuple | None], rng: SeededRng, i: int):
    """First kink-free instance from ``make`` (which returns None to reject)."""
    for attempt in range(_MAX_DRAWS):
        inst = make(rng.split(f"instance-{i}-{attempt}"))
        if inst is not None:
            return inst
    raise RuntimeError("could not draw a kink-free gradcheck instance")


def _with_params(net: FeedforwardNet, fn: Callable[[], float]):
    def scalar(params):
        saved = net.params()
        net.set_params(params)
        try:
            return fn()
        finally:
            net.set_params(saved)

    return scalar


# -- suites ----------------------------------------------------------------------


def _check_nets(rng: SeededRng, i: int) -> float:
    acts = ("relu", "tanh", "identity")

    def make(r):
        d_in, d_out = int(r.integers(1, 5)), int(r.integers(1, 4))
        hidden = tuple(int(h) for h in r.integers(1, 6, size=int(r.integers(0, 3))))
        net = _net(r, d_in, d_out, hidden, acts[i % 3], acts[(i // 3) % 3])
        x = r.normal(size=(int(r.integers(1, 6)), d_in))
        up = r.normal(size=(x.shape[0], d_out))
        return (net, x, up) if _relu_clear(net, x) else None

    net, x, up = _draw(make, rng, i)
    out, cache = net.forward(x)
    grads, g_in = net.backward(cache, up)
    num = finite_diff_grad(_with_params(net, lambda: float(np.sum(net(x) * up))), net.params(), FD_EPS)
    num_in = finite_diff_grad(lambda xx: float(np.sum(net(xx) * up)), x, FD_EPS)
    return max(max_relative_error(grads, num), max_relative_error(g_in, num_in))


def _check_dv_critic(rng: SeededRng, i: int) -> float:
    def make(r):
        d_x, d_y, n = int(r.integers(1, 4)), int(r.integers(1, 4)), int(r.integers(4, 9))
        critic = DvCritic(d_x, d_y, r.split("critic"), hidden=(5, 4), activation=("tanh", "relu")[i % 2])
        critic.net = _net(r.split("net"), d_x + d_y, 1, (5, 4), ("tanh", "relu")[i % 2])
        x, y = r.normal(size=(n, d_x)), r.normal(size=(n, d_y))
        joint = PairedSamples(x, y)
        product = PairedSamples(x, y[np.roll(np.arange(n), 1)])
        ok = _relu_clear(critic.net, joint.stacked()) and _relu_clear(critic.net, product.stacked())
        return (critic, joint, product) if ok else None

    critic, joint, product = _draw(make, rng, i)
    _, grads = critic.bound_param_grad(joint, product)
    num = finite_diff_grad(
        _with_params(critic.net, lambda: dv_bound(critic, joint, product)), critic.net.params(), FD_EPS
    )
    return max_relative_error(grads, num)


def _embeddings(r: SeededRng, k: int, n: int):
    return [r.normal(size=(n, int(r.integers(1, 4)))) for _ in range(k)]


def _check_synergy_kl(rng: SeededRng, i: int) -> float:
    r = rng.split(f"instance-{i}")
    k = 2 + i % 3
    z = _embeddings(r, k, int(r.integers(4, 9)))
    critics = {}
    for part in bipartitions(k):
        d_l = concat_subset(z, part.left).shape[1]
        d_r = concat_subset(z, part.right).shape[1]
        c = DvCritic(d_l, d_r, r.split("c" + part.label()), hidden=(6,), activation="tanh")
        c.net = _net(r.split("n" + part.label()), d_l + d_r, 1, (6,), "tanh")
        critics[part] = c
    cfg = SynergyConfig("KL")
    seed = r.split("synergy")
    _, grads = synergy_grad_embeddings(z, cfg, seed, critics=critics)
    num = finite_diff_grad(lambda zz: synergy_grad_embeddings(zz, cfg, seed, critics=critics)[0], z, FD_EPS)
    return max_relative_error(grads, num)


def _mmd_kernels(r: SeededRng, z, deep: bool):
    kernels = {}
    total = sum(x.shape[1] for x in z)
    for part in bipartitions(len(z)):
        if deep:
            phi = _net(r.split("phi" + part.label()), total, 3, (5,), "tanh")
            kernels[part] = DeepKernel(phi, float(r.uniform(0.5, 2.0)), float(r.uniform(0.5, 3.0)), 0.1)
        else:
            kernels[part] = GaussianKernel(float(r.uniform(0.5, 3.0)))
    return kernels


def _synergy_mmd_check(deep: bool):
    def check(rng: SeededRng, i: int) -> float:
        r = rng.split(f"instance-{i}")
        k = 2 + i % 3
        z = _embeddings(r, k, int(r.integers(4, 9)))
        kernels = _mmd_kernels(r, z, deep)
        cfg = SynergyConfig("MMD", n_shuffles=1 + i % 2)
        seed = r.split("synergy")
        _, grads = synergy_grad_embeddings(z, cfg, seed, kernels=kernels)
        num = finite_diff_grad(
            lambda zz: synergy_grad_embeddings(zz, cfg, seed, kernels=kernels)[0], z, FD_EPS
        )
        return max_relative_error(grads, num)

    return check


def _check_mmd_inputs_and_params(rng: SeededRng, i: int) -> float:
    r = rng.split(f"instance-{i}")
    d = int(r.integers(1, 4))
    a = r.normal(size=(int(r.integers(2, 7)), d))
    b = r.normal(size=(int(r.integers(2, 7)), d)) + 0.5
    if i % 2:
        kernel = GaussianKernel(float(r.uniform(0.5, 3.0)))
    else:
        kernel = DeepKernel(_net(r.split("phi"), d, 3, (4,), "tanh"), 1.3, 1.7, 0.2)
    _, ga, gb = mmd2_unbiased_grad(a, b, kernel)
    na, nb = finite_diff_grad(lambda ps: mmd2_unbiased(ps[0], ps[1], kernel), [a, b], FD_EPS)
    err = max_relative_error([ga, gb], [na, nb])
    if isinstance(kernel, DeepKernel):
        _, gp = mmd2_unbiased_param_grad(a, b, kernel)
        num = finite_diff_grad(_with_params(kernel.phi, lambda: mmd2_unbiased(a, b, kernel)), kernel.phi.params(), FD_EPS)
        err = max(err, max_relative_error(gp, num))
    return err


def _check_fusion_loss(rng: SeededRng, i: int) -> float:
    fusion = ("concat", "tensor")[i % 2]
    kind = ("huber", "mse")[(i // 2) % 2]
    penalized = i % 4 == 3

    def make(r):
        k = 2 + int(r.integers(0, 2))
        widths = [int(w) for w in r.integers(1, 4, size=k)]
        embed = [int(e) for e in r.integers(1, 3, size=k)]
        encoders = [_net(r.split(f"enc{j}"), w, e, (4,), "tanh") for j, (w, e) in enumerate(zip(widths, embed))]
        fused = sum(embed) if fusion == "concat" else int(np.prod([e + 1 for e in embed]))
        head = _net(r.split("head"), fused, 1, (4,), "relu")
        model = FusionModel(encoders, fusion, head)
        n = int(r.integers(4, 8))
        mods = [r.normal(size=(n, w)) for w in widths]
        y = r.uniform(-3, 3, size=n)
        pred, cache = model.forward(mods)
        if not _relu_clear(head, cache.fused):
            return None
        if kind == "huber" and np.min(np.abs(np.abs(pred - y) - 1.0)) < KINK_MARGIN:
            return None
        kernels = _mmd_kernels(r.split("kernels"), cache.z_list, deep=False)
        return model, mods, y, kernels

    model, mods, y, kernels = _draw(make, rng, i)
    lam = 0.5 if penalized else 0.0
    cfg = SynergyConfig("MMD")
    seed = rng.split(f"synergy-{i}")

    def objective():
        pred, cache = model.forward(mods)
        loss = task_loss(pred, y, kind)[0]
        if penalized:
            loss -= lam * synergy_grad_embeddings(cache.z_list, cfg, seed, kernels=kernels)[0]
        return loss

    pred, cache = model.forward(mods)
    _, g_pred = task_loss(pred, y, kind)
    extra = None
    if penalized:
        _, g_syn = synergy_grad_embeddings(cache.z_list, cfg, seed, kernels=kernels)
        extra = [-lam * g for g in g_syn]
    grads = model.backward(cache, g_pred, extra)

    def scalar(params):
        saved = model.params()
        model.set_params(params)
        try:
            return objective()
        finally:
            model.set_params(saved)

    return max_relative_error(grads, finite_diff_grad(scalar, model.params(), FD_EPS))


SUITES = {
    "nets": _check_nets,
    "dv_bound_critic": _check_dv_critic,
    "synergy_kl_embeddings": _check_synergy_kl,
    "synergy_mmd_gaussian_embeddings": _synergy_mmd_check(deep=False),
    "synergy_mmd_deep_embeddings": _synergy_mmd_check(deep=True),
    "mmd_inputs_and_kernel_params": _check_mmd_inputs_and_params,
    "fusion_losses": _check_fusion_loss,
}


def run_gradcheck(
    seed: int = 0,
    instances: int = DEFAULT_INSTANCES,
    tol: float = DEFAULT_TOL,
    suites=None,
) -> GradcheckReport:
    """Run the named suites (all by default) on ``instances`` random instances each."""
    names = list(SUITES) if suites is None else list(suites)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown gradcheck suites: {', '.join(unknown)}")
    root = SeededRng(seed).split("gradcheck")
    report = GradcheckReport()
    for name in names:
        t0 = time.perf_counter()
        srng = root.split(name)
        worst = max(SUITES[name](srng, i) for i in range(instances))
        report.suites.append(SuiteResult(name, instances, worst, tol, time.perf_counter() - t0))
    return report
