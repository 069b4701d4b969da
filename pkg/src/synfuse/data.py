"""Synthetic datasets with known ground truth, and CSV interchange.

CSV layout (UTF-8, comma separated, header first)::

    id,a_0,...,a_{da-1},v_0,...,v_{dv-1},t_0,...,t_{dt-1},label

Modality groups are recognised by the ``<name>_<k>`` column prefix and must
be contiguous with ``k`` counting up from 0. Floats are written with 17
significant digits so a save/load round trip is bit exact.
"""

from __future__ import annotations

import csv
import io
import math
import os
import re
import tempfile
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .batch import AVT_NAMES, ModalityBatch
from .errors import ConfigError, ParseError
from .estimators import PairedSamples
from .nn import SeededRng

VARIANTS = ("gaussian_pair", "xor_triple", "multimodal_regression")

# latent coordinates withheld from each modality; see gen_multimodal
_HIDDEN_LATENT = (1, 0, 2)


@dataclass
class SyntheticSpec:
    variant: str = "multimodal_regression"
    n: int = 1000
    seed: int = 0
    # gaussian_pair
    rho: float = 0.8
    dim: int = 1
    # xor_triple
    flip_prob: float = 0.0
    dither_sd: float = 0.01
    # multimodal_regression
    latent_dim: int = 6
    modality_dims: tuple = (12, 12, 12)
    noise_sd: float = 1.0
    synergy_strength: float = 2.0
    label_noise_sd: float = 0.1

    def validate(self) -> "SyntheticSpec":
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.n < 8:
            raise ConfigError(f"n must be at least 8, got {self.n}")
        if self.variant == "gaussian_pair":
            if not -1.0 < self.rho < 1.0:
                raise ConfigError(f"rho must lie strictly inside (-1, 1), got {self.rho}")
            if self.dim < 1:
                raise ConfigError("dim must be positive")
        elif self.variant == "xor_triple":
            if not 0.0 <= self.flip_prob <= 0.5:
                raise ConfigError(f"flip_prob must lie in [0, 0.5], got {self.flip_prob}")
            if not self.dither_sd > 0:
                raise ConfigError("dither_sd must be positive")
        else:
            if self.latent_dim < 4:
                raise ConfigError("latent_dim must be at least 4 (three interaction coordinates plus one shared)")
            if len(self.modality_dims) != 3:
                raise ConfigError("multimodal_regression has exactly three modalities")
            need = self.latent_dim - 1
            for name, d in zip(AVT_NAMES, self.modality_dims):
                if d < need:
                    raise ConfigError(
                        f"modality {name} has width {d}; at least {need} needed to expose "
                        f"{need} latent coordinates"
                    )
            if self.noise_sd < 0 or self.label_noise_sd < 0 or self.synergy_strength < 0:
                raise ConfigError("noise levels and synergy_strength must be nonnegative")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modality_dims"] = list(self.modality_dims)
        return d


def gaussian_mi(rho: float, dim: int = 1) -> float:
    """Mutual information of a ``dim``-fold product of correlated Gaussian pairs, nats."""
    return -0.5 * dim * math.log(1.0 - rho * rho)


def gen_gaussian_pair(spec: SyntheticSpec) -> PairedSamples:
    spec = spec.validate()
    if spec.variant != "gaussian_pair":
        raise ConfigError("dataset variant must be gaussian_pair")
    g = SeededRng(spec.seed).generator
    x = g.normal(size=(spec.n, spec.dim))
    y = spec.rho * x + math.sqrt(1.0 - spec.rho**2) * g.normal(size=(spec.n, spec.dim))
    return PairedSamples(x, y)


def gen_xor_triple(spec: SyntheticSpec) -> ModalityBatch:
    """Two fair bits and their (optionally flipped) parity, each plus Gaussian dither."""
    spec = spec.validate()
    if spec.variant != "xor_triple":
        raise ConfigError("dataset variant must be xor_triple")
    g = SeededRng(spec.seed).generator
    b1 = g.integers(0, 2, spec.n)
    b2 = g.integers(0, 2, spec.n)
    flip = g.random(spec.n) < spec.flip_prob
    b3 = np.bitwise_xor(np.bitwise_xor(b1, b2), flip.astype(b1.dtype))
    bits = np.stack([b1, b2, b3], axis=1).astype(np.float64)
    noisy = bits + spec.dither_sd * g.normal(size=bits.shape)
    return ModalityBatch(
        [noisy[:, [k]] for k in range(3)], np.zeros(spec.n), AVT_NAMES,
        meta={"bits": bits.astype(np.int64)},
    )


def gen_multimodal(spec: SyntheticSpec) -> ModalityBatch:
    """Three noisy linear views of a latent vector and a squashed regression label.

    The label is ``w.u + beta * sign(u0) * sign(u1) * |u2|`` plus noise, mapped
    into [-3, 3] by ``3 tanh(./s)`` with ``s`` the empirical label sd. ``w``
    only loads on coordinates 3.. which every view sees. Audio withholds
    ``u1``, visual withholds ``u0``, text withholds ``u2``, so the interaction
    term is only fully recoverable by combining at least two views.
    """
    spec = spec.validate()
    if spec.variant != "multimodal_regression":
        raise ConfigError("dataset variant must be multimodal_regression")
    rng = SeededRng(spec.seed)
    g_struct = rng.split("structure").generator
    g_draw = rng.split("draws").generator
    L = spec.latent_dim
    mixing = []
    for d, hidden in zip(spec.modality_dims, _HIDDEN_LATENT):
        a = g_struct.normal(size=(d, L)) / math.sqrt(L - 1)
        a[:, hidden] = 0.0
        mixing.append(a)
    w = np.zeros(L)
    w[3:] = g_struct.normal(size=L - 3)
    w /= np.linalg.norm(w)

    u = g_draw.normal(size=(spec.n, L))
    views = [u @ a.T + spec.noise_sd * g_draw.normal(size=(spec.n, a.shape[0])) for a in mixing]
    interaction = np.sign(u[:, 0]) * np.sign(u[:, 1]) * np.abs(u[:, 2])
    raw = u @ w + spec.synergy_strength * interaction + spec.label_noise_sd * g_draw.normal(size=spec.n)
    scale = raw.std()
    labels = 3.0 * np.tanh(raw / (scale if scale > 0 else 1.0))
    return ModalityBatch(views, labels, AVT_NAMES, meta={"latent": u, "mixing": mixing, "w": w})


def generate(spec: SyntheticSpec) -> ModalityBatch:
    """Any variant as a :class:`ModalityBatch` (gaussian pairs become modalities a, v)."""
    spec.validate()
    if spec.variant == "gaussian_pair":
        s = gen_gaussian_pair(spec)
        return ModalityBatch([s.x, s.y], np.zeros(s.n), ("a", "v"))
    if spec.variant == "xor_triple":
        return gen_xor_triple(spec)
    return gen_multimodal(spec)


def split_indices(n: int, fractions=(0.7, 0.15, 0.15), seed: int = 0) -> tuple[np.ndarray, ...]:
    """Disjoint shuffled index sets, sizes by rounding down all but the last."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError("split fractions must sum to 1")
    perm = SeededRng(seed).split("split").permutation(n)
    sizes = [int(math.floor(f * n)) for f in fractions[:-1]]
    out, start = [], 0
    for s in sizes:
        out.append(np.sort(perm[start : start + s]))
        start += s
    out.append(np.sort(perm[start:]))
    return tuple(out)


# -- CSV ---------------------------------------------------------------------

_COL = re.compile(r"^([A-Za-z][A-Za-z0-9]*)_(\d+)$")


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v: float) -> str:
    return "%.17g" % v


def dumps_csv(batch: ModalityBatch) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["id"]
    for name, w in zip(batch.names, batch.widths):
        header += [f"{name}_{k}" for k in range(w)]
    header.append("label")
    writer.writerow(header)
    labels = batch.labels if batch.labels is not None else np.zeros(batch.n_rows)
    feats = np.hstack(batch.modalities)
    for rid, row, lab in zip(batch.ids, feats, labels):
        writer.writerow([str(int(rid))] + [_fmt(v) for v in row] + [_fmt(lab)])
    return buf.getvalue()


def save_csv(batch: ModalityBatch, path) -> None:
    atomic_write_text(path, dumps_csv(batch))


def _parse_header(header: list[str], path) -> tuple[list[str], list[int]]:
    if not header or header == [""]:
        raise ParseError("empty file; expected a header row", line=1, path=path)
    if header[0] != "id":
        raise ParseError(f"first column must be 'id', found {header[0]!r}", line=1, path=path)
    if header[-1] != "label":
        raise ParseError("missing required column 'label' (must be last)", line=1, path=path)
    names, widths = [], []
    for col in header[1:-1]:
        m = _COL.match(col)
        if not m:
            raise ParseError(f"column {col!r} is not of the form <modality>_<index>", line=1, path=path)
        name, k = m.group(1), int(m.group(2))
        if names and names[-1] == name:
            if k != widths[-1]:
                raise ParseError(f"column {col!r} out of order; expected {name}_{widths[-1]}", line=1, path=path)
            widths[-1] += 1
        else:
            if name in names:
                raise ParseError(f"modality {name!r} columns are not contiguous", line=1, path=path)
            if k != 0:
                raise ParseError(f"modality {name!r} must start at {name}_0", line=1, path=path)
            names.append(name)
            widths.append(1)
    if not names:
        raise ParseError("no modality columns between 'id' and 'label'", line=1, path=path)
    return names, widths


def loads_csv(text: str, path=None) -> ModalityBatch:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty file; expected a header row", line=1, path=path) from None
    names, widths = _parse_header([h.strip() for h in header], path)
    n_fields = 2 + sum(widths)
    ids, rows, labels = [], [], []
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != n_fields:
            raise ParseError(f"expected {n_fields} fields, found {len(rec)}", line=lineno, path=path)
        try:
            ids.append(int(rec[0]))
        except ValueError:
            raise ParseError(f"id {rec[0]!r} is not an integer", line=lineno, path=path) from None
        try:
            vals = [float(v) for v in rec[1:]]
        except ValueError as exc:
            raise ParseError(f"unparseable number ({exc})", line=lineno, path=path) from None
        if not all(math.isfinite(v) for v in vals):
            raise ParseError("non-finite value", line=lineno, path=path)
        rows.append(vals[:-1])
        labels.append(vals[-1])
    if not rows:
        raise ParseError("no data rows after header", line=2, path=path)
    feats = np.array(rows, dtype=np.float64)
    mods, start = [], 0
    for w in widths:
        mods.append(feats[:, start : start + w])
        start += w
    return ModalityBatch(mods, np.array(labels), tuple(names), np.array(ids, dtype=np.int64))


def load_csv(path) -> ModalityBatch:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"not valid UTF-8 ({exc.reason})", line=1, path=path) from None
    return loads_csv(text, path)


def select_modalities(batch: ModalityBatch, names) -> ModalityBatch:
    """Sub-batch holding only the named modalities, in the order given."""
    order = []
    for n in names:
        if n not in batch.names:
            raise ConfigError(f"no modality {n!r} in data (have {', '.join(batch.names)})")
        order.append(batch.names.index(n))
    return batch.reorder(order)
