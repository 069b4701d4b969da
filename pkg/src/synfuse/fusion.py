"""Multimodal fusion models and sentiment-style regression metrics.

A :class:`FusionModel` encodes each modality with its own network, fuses the
embeddings (column concatenation or tensor fusion) and maps the fused vector
to one regression score in [-3, 3].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .batch import ModalityBatch
from .errors import ConfigError, ParseError, ShapeError, UsageError
from .nn import FeedforwardNet, Layer, SeededRng

FUSIONS = ("concat", "tensor")
CHECKPOINT_FORMAT = "synfuse.checkpoint"
CHECKPOINT_VERSION = 1
LABEL_RANGE = 3.0


def _check_list(z_list):
    if len(z_list) == 0:
        raise UsageError("fusion needs at least one embedding")
    n = z_list[0].shape[0]
    if any(z.shape[0] != n for z in z_list):
        raise ShapeError("embeddings disagree on row count")
    return n


def concat_fusion(z_list: Sequence[np.ndarray]) -> np.ndarray:
    _check_list(z_list)
    return np.hstack(z_list)


def _augment(z: np.ndarray) -> np.ndarray:
    return np.hstack([z, np.ones((z.shape[0], 1))])


def tensor_fusion(z_list: Sequence[np.ndarray]) -> np.ndarray:
    """Row-wise outer product of ``[z_i, 1]`` over modalities, flattened C-order.

    For two scalars this yields ``[ab, a, b, 1]``.
    """
    n = _check_list(z_list)
    out = _augment(z_list[0])
    for z in z_list[1:]:
        out = (out[:, :, None] * _augment(z)[:, None, :]).reshape(n, -1)
    return out


def tensor_fusion_backward(z_list: Sequence[np.ndarray], grad_fused: np.ndarray) -> list[np.ndarray]:
    n = _check_list(z_list)
    aug = [_augment(z) for z in z_list]
    k = len(aug)
    g = grad_fused.reshape((n,) + tuple(a.shape[1] for a in aug))
    letters = "abcdefghijklmnopqrstuvwxy"[:k]
    grads = []
    for i in range(k):
        operands = [g] + [aug[j] for j in range(k) if j != i]
        subs = ["z" + letters] + ["z" + letters[j] for j in range(k) if j != i]
        ga = np.einsum(",".join(subs) + "->z" + letters[i], *operands, optimize=True)
        grads.append(ga[:, :-1])
    return grads


def fused_width(fusion: str, embed_dims: Sequence[int]) -> int:
    if fusion == "concat":
        return int(sum(embed_dims))
    return int(math.prod(d + 1 for d in embed_dims))


@dataclass
class ModelCache:
    enc_caches: list
    z_list: list
    fused: np.ndarray
    head_cache: object


class FusionModel:
    def __init__(self, encoders: Sequence[FeedforwardNet], fusion: str, head: FeedforwardNet):
        if fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {fusion!r}")
        self.encoders = list(encoders)
        self.fusion = fusion
        self.head = head
        want = fused_width(fusion, self.embed_dims)
        if head.d_in != want:
            raise ShapeError(f"head expects width {head.d_in} but {fusion} fusion yields {want}")
        if head.d_out != 1:
            raise ShapeError("head must produce a single regression output")

    @classmethod
    def build(
        cls,
        modality_widths: Sequence[int],
        fusion: str = "concat",
        embed_dims: Sequence[int] | int = 4,
        rng: SeededRng | None = None,
        encoder_hidden: Sequence[int] = (64, 64),
        head_hidden: Sequence[int] = (64,),
    ) -> "FusionModel":
        rng = rng or SeededRng(0)
        if isinstance(embed_dims, int):
            embed_dims = [embed_dims] * len(modality_widths)
        encoders = [
            FeedforwardNet.mlp(w, d, rng.split(f"encoder-{i}"), encoder_hidden)
            for i, (w, d) in enumerate(zip(modality_widths, embed_dims))
        ]
        head = FeedforwardNet.mlp(fused_width(fusion, embed_dims), 1, rng.split("head"), head_hidden)
        return cls(encoders, fusion, head)

    @property
    def modality_widths(self) -> list[int]:
        return [e.d_in for e in self.encoders]

    @property
    def embed_dims(self) -> list[int]:
        return [e.d_out for e in self.encoders]

    @property
    def nets(self) -> list[FeedforwardNet]:
        return [*self.encoders, self.head]

    def params(self) -> list[np.ndarray]:
        out = []
        for net in self.nets:
            out.extend(net.params())
        return out

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        i = 0
        for net in self.nets:
            k = 2 * len(net.layers)
            net.set_params(params[i : i + k])
            i += k

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, flat: np.ndarray) -> None:
        i = 0
        for net in self.nets:
            net.set_flat(flat[i : i + net.n_params])
            i += net.n_params
        if i != flat.size:
            raise ShapeError("flat parameter vector has the wrong length")

    def copy(self) -> "FusionModel":
        return FusionModel([e.copy() for e in self.encoders], self.fusion, self.head.copy())

    def encode(self, modalities: Sequence[np.ndarray]) -> tuple[list[np.ndarray], list]:
        if len(modalities) != len(self.encoders):
            raise ShapeError(f"model has {len(self.encoders)} encoders, batch has {len(modalities)} modalities")
        out, caches = [], []
        for enc, x in zip(self.encoders, modalities):
            z, c = enc.forward(x)
            out.append(z)
            caches.append(c)
        return out, caches

    def fuse(self, z_list):
        return concat_fusion(z_list) if self.fusion == "concat" else tensor_fusion(z_list)

    def forward(self, modalities: Sequence[np.ndarray]) -> tuple[np.ndarray, ModelCache]:
        z_list, enc_caches = self.encode(modalities)
        fused = self.fuse(z_list)
        out, head_cache = self.head.forward(fused)
        return out[:, 0], ModelCache(enc_caches, z_list, fused, head_cache)

    def backward(
        self,
        cache: ModelCache,
        grad_pred: np.ndarray,
        grad_z_extra: Sequence[np.ndarray] | None = None,
    ) -> list[np.ndarray]:
        """Parameter gradients in :meth:`params` order.

        ``grad_z_extra`` is added to the embedding gradients coming from the
        head and reaches the encoders only.
        """
        head_grads, g_fused = self.head.backward(cache.head_cache, np.asarray(grad_pred)[:, None])
        if self.fusion == "concat":
            g_z, start = [], 0
            for z in cache.z_list:
                g_z.append(g_fused[:, start : start + z.shape[1]])
                start += z.shape[1]
        else:
            g_z = tensor_fusion_backward(cache.z_list, g_fused)
        if grad_z_extra is not None:
            g_z = [a + b for a, b in zip(g_z, grad_z_extra)]
        grads = []
        for enc, c, g in zip(self.encoders, cache.enc_caches, g_z):
            grads.extend(enc.backward(c, g)[0])
        grads.extend(head_grads)
        return grads

    def predict(self, batch: ModalityBatch | Sequence[np.ndarray], clamp: bool = True) -> np.ndarray:
        mods = batch.modalities if isinstance(batch, ModalityBatch) else batch
        pred = self.forward(mods)[0]
        return np.clip(pred, -LABEL_RANGE, LABEL_RANGE) if clamp else pred


def predict(model: FusionModel, batch, clamp: bool = True) -> np.ndarray:
    return model.predict(batch, clamp)


# -- task losses ---------------------------------------------------------------


def task_loss(pred: np.ndarray, target: np.ndarray, kind: str = "huber", delta: float = 1.0):
    """Mean loss and its gradient w.r.t. ``pred``."""
    r = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    n = r.size
    if kind == "huber":
        a = np.abs(r)
        loss = np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))
        return float(loss.mean()), np.clip(r, -delta, delta) / n
    if kind == "mse":
        return float(np.mean(r * r)), 2.0 * r / n
    raise ConfigError(f"unknown task loss {kind!r}; use 'huber' or 'mse'")


# -- metrics -------------------------------------------------------------------


@dataclass
class MetricsReport:
    mae: float
    pearson_corr: float | None
    acc2: float | None
    acc7: float
    n_eval: int
    n_dropped_zero_labels: int

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(preds, labels) -> MetricsReport:
    """MAE, Pearson correlation, binary and 7-class accuracy.

    Acc2 ignores rows whose label is exactly 0 and calls a prediction positive
    iff it is > 0. Acc7 clamps both sides to [-3, 3] and rounds to the nearest
    integer (half to even, as ``numpy.round``). Correlation is ``None`` when
    either side is constant.
    """
    p = np.asarray(preds, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.shape != y.shape or p.size < 2:
        raise ShapeError("predictions and labels must have equal length of at least 2")
    mae = float(np.mean(np.abs(p - y)))
    pc, yc = p - p.mean(), y - y.mean()
    denom = math.sqrt(float(pc @ pc) * float(yc @ yc))
    corr = float(np.clip(pc @ yc / denom, -1.0, 1.0)) if denom > 0 else None
    nonzero = y != 0
    n_dropped = int(np.sum(~nonzero))
    acc2 = float(np.mean((p[nonzero] > 0) == (y[nonzero] > 0))) if nonzero.any() else None
    bins_p = np.round(np.clip(p, -LABEL_RANGE, LABEL_RANGE))
    bins_y = np.round(np.clip(y, -LABEL_RANGE, LABEL_RANGE))
    acc7 = float(np.mean(bins_p == bins_y))
    return MetricsReport(mae, corr, acc2, acc7, int(p.size), n_dropped)


def evaluate(model: FusionModel, batch: ModalityBatch) -> MetricsReport:
    if batch.labels is None:
        raise ConfigError("evaluation needs labels")
    return compute_metrics(model.predict(batch, clamp=True), batch.labels)


# -- checkpoints ---------------------------------------------------------------


def checkpoint_dict(model: FusionModel) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "modality_widths": model.modality_widths,
        "embed_dims": model.embed_dims,
        "fusion": model.fusion,
        "encoders": [e.describe() for e in model.encoders],
        "head": model.head.describe(),
        "params": [float(v) for v in model.get_flat()],
    }


def _net_from(desc) -> FeedforwardNet:
    layers = []
    for d in desc:
        out_w, in_w = d["shape"]
        layers.append(Layer(np.zeros((out_w, in_w)), np.zeros(out_w), d["activation"]))
    return FeedforwardNet(layers)


def model_from_checkpoint(d: dict) -> FusionModel:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"not a {CHECKPOINT_FORMAT} file")
    if d.get("format_version") != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {d.get('format_version')!r}")
    try:
        model = FusionModel([_net_from(e) for e in d["encoders"]], d["fusion"], _net_from(d["head"]))
        flat = np.array(d["params"], dtype=np.float64)
        model.set_flat(flat)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed checkpoint: {exc}") from None
    if model.modality_widths != list(d["modality_widths"]) or model.embed_dims != list(d["embed_dims"]):
        raise ParseError("checkpoint widths disagree with its layer shapes")
    return model


def save_checkpoint(model: FusionModel, path) -> None:
    from .data import atomic_write_text

    atomic_write_text(path, json.dumps(checkpoint_dict(model)) + "\n")


def load_checkpoint(path) -> FusionModel:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"checkpoint is not valid JSON ({exc.msg})", line=exc.lineno, path=path) from None
    return model_from_checkpoint(d)
