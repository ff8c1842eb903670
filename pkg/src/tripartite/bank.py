"""Per-class memory bank of projected features (last write wins)."""

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

_UNIT_TOL = 1e-9


@dataclass
class MemoryBank:
    """``K`` slots of unit projections; a slot is read only once written."""

    slots: np.ndarray
    initialized: np.ndarray

    @classmethod
    def empty(cls, K, dim):
        return cls(np.zeros((K, dim)), np.zeros(K, dtype=bool))

    @property
    def K(self):
        return self.slots.shape[0]

    @property
    def dim(self):
        return self.slots.shape[1]

    def copy(self):
        return MemoryBank(self.slots.copy(), self.initialized.copy())

    def __eq__(self, other):
        if not isinstance(other, MemoryBank):
            return NotImplemented
        return (
            np.array_equal(self.initialized, other.initialized)
            and np.array_equal(self.slots, other.slots)
        )


def bank_update(bank, labels, projections):
    """Return a new bank where each class present in the batch holds its last projection.

    "Last" is batch order: for labels ``[1, 1, 3]`` slot 1 takes the second row.
    Classes absent from the batch keep their previous slot (and flag).
    Non-unit projections are normalized and logged.
    """
    labels = np.asarray(labels, dtype=np.int64)
    out = bank.copy()
    if labels.size == 0:
        return out
    projections = np.asarray(projections, dtype=np.float64).reshape(len(labels), -1)
    if projections.shape[1] != bank.dim:
        raise ValueError(f"projection dim {projections.shape[1]} != bank dim {bank.dim}")

    rev = labels[::-1]
    classes, first_in_rev = np.unique(rev, return_index=True)
    last = labels.size - 1 - first_in_rev
    rows = projections[last]
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero projection cannot be stored in the memory bank")
    off = np.abs(norms - 1.0) > _UNIT_TOL
    if np.any(off):
        log.warning("bank_update: normalizing %d non-unit projection(s)", int(off.sum()))
        rows = rows / norms[:, None]
    out.slots[classes] = rows
    out.initialized[classes] = True
    return out
