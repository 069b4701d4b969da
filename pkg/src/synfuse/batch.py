from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ShapeError, UsageError

AVT_NAMES = ("a", "v", "t")


def default_names(k: int) -> tuple[str, ...]:
    return AVT_NAMES if k == 3 else tuple(f"m{i}" for i in range(k))


@dataclass
class ModalityBatch:
    """Row-aligned per-modality feature matrices, optional labels and row ids.

    For three modalities the convention is audio=0, visual=1, text=2 with
    names ``a``, ``v``, ``t``.
    """

    modalities: list
    labels: np.ndarray | None = None
    names: tuple = ()
    ids: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        mods = []
        for m in self.modalities:
            m = np.asarray(m, dtype=np.float64)
            if m.ndim == 1:
                m = m[:, None]
            mods.append(m)
        if not mods:
            raise ShapeError("a batch needs at least one modality")
        n = mods[0].shape[0]
        if any(m.shape[0] != n for m in mods):
            raise ShapeError(f"modalities disagree on row count: {[m.shape[0] for m in mods]}")
        self.modalities = mods
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
            if self.labels.shape[0] != n:
                raise ShapeError(f"{self.labels.shape[0]} labels for {n} rows")
        self.names = tuple(self.names) if self.names else default_names(len(mods))
        if len(self.names) != len(mods):
            raise ShapeError("one name per modality is required")
        if self.ids is None:
            self.ids = np.arange(n)
        self.ids = np.asarray(self.ids).reshape(-1)
        if self.ids.shape[0] != n:
            raise ShapeError("one id per row is required")

    @property
    def n_rows(self) -> int:
        return self.modalities[0].shape[0]

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(m.shape[1] for m in self.modalities)

    def __len__(self):
        return self.n_rows

    def rows(self, idx) -> "ModalityBatch":
        idx = np.asarray(idx)
        return ModalityBatch(
            [m[idx] for m in self.modalities],
            None if self.labels is None else self.labels[idx],
            self.names,
            self.ids[idx],
            dict(self.meta),
        )

    def reorder(self, order: Sequence[int]) -> "ModalityBatch":
        """Same rows, modalities relabeled so that new index ``i`` is old ``order[i]``."""
        return ModalityBatch(
            [self.modalities[i] for i in order],
            self.labels,
            tuple(self.names[i] for i in order),
            self.ids,
            dict(self.meta),
        )

    def concat_subset(self, subset: Sequence[int]) -> np.ndarray:
        return concat_subset(self.modalities, subset)


def concat_subset(modalities: Sequence[np.ndarray], subset: Sequence[int]) -> np.ndarray:
    """Column-concatenate the chosen modalities in increasing index order."""
    subset = sorted(subset)
    if not subset:
        raise UsageError("subset of modalities must be nonempty")
    if subset[0] < 0 or subset[-1] >= len(modalities):
        raise UsageError(f"modality index out of range in {subset}")
    if len(subset) == 1:
        return modalities[subset[0]]
    return np.hstack([modalities[i] for i in subset])
