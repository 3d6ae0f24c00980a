"""Patient-grouped stratified splitting, k-fold and stratified subsampling."""

from __future__ import annotations

import logging
import warnings

import numpy as np

from ..errors import ContractError
from .dataset import LabeledImageSet
from .synthetic import largest_remainder

logger = logging.getLogger(__name__)


def _patient_table(ds: LabeledImageSet):
    """Per patient: id, dominant label, sample count."""
    pids, inverse = np.unique(ds.patient_ids, return_inverse=True)
    k = max(ds.num_classes, int(ds.labels.max()) + 1 if len(ds) else 1)
    counts = np.zeros((len(pids), k), dtype=np.int64)
    np.add.at(counts, (inverse, ds.labels), 1)
    return pids, counts.argmax(axis=1), counts.sum(axis=1)


def split_stratified_by_patient(ds: LabeledImageSet, test_fraction: float = 0.3, seed: int = 0):
    """Assign whole patients to train or test, class by class.

    Within each class patients are visited in a seeded random order and moved
    to the test side whenever that brings the running test count closer to its
    target.  The rounding error of each class carries into the next class's
    target, which bounds the overall deviation by half the largest patient.
    """
    if not 0 < test_fraction < 1:
        raise ContractError("test_fraction must lie strictly between 0 and 1")
    if len(ds) == 0:
        raise ContractError("cannot split an empty dataset")
    rng = np.random.default_rng(seed)
    pids, plabel, psize = _patient_table(ds)
    in_test = np.zeros(len(pids), dtype=bool)
    carried = 0.0
    notes = []
    for cls in np.unique(plabel):
        members = np.flatnonzero(plabel == cls)
        if len(members) < 2:
            msg = f"class {cls} has a single patient; stratification is best effort"
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            notes.append(msg)
        target = test_fraction * psize[members].sum() + carried
        current = 0
        for p in members[rng.permutation(len(members))]:
            if abs(current + psize[p] - target) < abs(current - target):
                in_test[p] = True
                current += psize[p]
        carried = target - current
    if len(pids) >= 2:
        if not in_test.any():
            in_test[int(np.argmin(psize))] = True
        elif in_test.all():
            in_test[int(np.argmin(psize))] = False
    test_pids = set(pids[in_test].tolist())
    mask = np.array([p in test_pids for p in ds.patient_ids.tolist()], dtype=bool)
    train, test = ds.subset(np.flatnonzero(~mask)), ds.subset(np.flatnonzero(mask))
    train.notes = test.notes = notes
    return train, test


def kfold_by_patient(ds: LabeledImageSet, k: int = 5, seed: int = 0):
    """``k`` (train, validation) pairs whose validation folds partition the patients."""
    pids, plabel, psize = _patient_table(ds)
    if k < 2:
        raise ContractError("k must be at least 2")
    if k > len(pids):
        raise ContractError(f"k={k} exceeds the number of patients ({len(pids)})")
    rng = np.random.default_rng(seed)
    fold_of = np.full(len(pids), -1, dtype=np.int64)
    totals = np.zeros(k, dtype=np.int64)
    for cls in np.unique(plabel):
        members = np.flatnonzero(plabel == cls)
        members = members[rng.permutation(len(members))]
        members = members[np.argsort(-psize[members], kind="stable")]
        per_class = np.zeros(k, dtype=np.int64)
        for p in members:
            f = min(range(k), key=lambda j: (per_class[j], totals[j], j))
            fold_of[p] = f
            per_class[f] += psize[p]
            totals[f] += psize[p]
    for f in range(k):
        if not np.any(fold_of == f):
            donor = int(np.argmax([np.sum(fold_of == j) for j in range(k)]))
            victim = np.flatnonzero(fold_of == donor)[0]
            fold_of[victim] = f
    lookup = dict(zip(pids.tolist(), fold_of.tolist()))
    sample_fold = np.array([lookup[p] for p in ds.patient_ids.tolist()], dtype=np.int64)
    return [(ds.subset(np.flatnonzero(sample_fold != f)), ds.subset(np.flatnonzero(sample_fold == f)))
            for f in range(k)]


def subsample_fraction(ds: LabeledImageSet, fraction: float, seed: int = 0) -> LabeledImageSet:
    """Class-stratified random subsample holding ``fraction`` of the samples."""
    if not 0 < fraction <= 1:
        raise ContractError("fraction must lie in (0, 1]")
    if fraction == 1:
        return ds
    rng = np.random.default_rng(seed)
    counts = np.bincount(ds.labels, minlength=ds.num_classes)
    present = np.flatnonzero(counts)
    total = int(round(fraction * len(ds)))
    take = largest_remainder(total, counts[present]) if total > 0 else np.zeros(len(present), int)
    if np.any(take == 0):
        empty = present[take == 0].tolist()
        raise ContractError(f"fraction {fraction} leaves classes {empty} without samples")
    chosen = []
    for cls, m in zip(present, take):
        idx = np.flatnonzero(ds.labels == cls)
        chosen.append(np.sort(rng.choice(idx, size=int(m), replace=False)))
    return ds.subset(np.sort(np.concatenate(chosen)))


SAMPLE_EFFICIENCY_GRID = (0.1, 0.2, 0.3, 0.4, 0.5)
