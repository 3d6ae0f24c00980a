"""Synthetic brain-slice-like images whose class is a spatial relationship.

Each image holds an elliptical "skull" ring with faint interior texture and
one bright blob.  The blob sits on the ring (class 0), well inside it
(class 1) or in a fixed inferior region (class 2).  Images of one patient
share the ring geometry, so patient-level splits matter.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError
from .dataset import CLASS_NAMES, LabeledImageSet

DEFAULT_PRIORS = (0.23, 0.47, 0.30)
_PATIENT_STREAM, _IMAGE_STREAM, _LAYOUT_STREAM = 1, 2, 3


def largest_remainder(total: int, weights) -> np.ndarray:
    """Integer apportionment of ``total`` proportional to ``weights`` (ties to lower index)."""
    w = np.asarray(weights, dtype=np.float64)
    exact = total * w / w.sum()
    base = np.floor(exact).astype(np.int64)
    short = total - int(base.sum())
    frac = exact - base
    order = sorted(range(len(w)), key=lambda k: (-frac[k], k))
    for k in order[:short]:
        base[k] += 1
    return base


def _stream(seed: int, tag: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, tag, int(index)])


def _patient_classes(patients: int, class_counts: np.ndarray, priors) -> np.ndarray:
    per = largest_remainder(patients, priors)
    per = np.minimum(per, class_counts)
    for k in range(len(per)):
        if class_counts[k] > 0 and per[k] == 0:
            per[k] = 1
    while per.sum() > patients:
        k = int(np.argmax(np.where(per > 1, per, -1)))
        per[k] -= 1
    while per.sum() < patients:
        room = class_counts - per
        k = int(np.argmax(room))
        per[k] += 1
    return per


def render_slice(params: dict, blob_xy, rng: np.random.Generator, size: int = 28) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx, cy, rx, ry = params["cx"], params["cy"], params["rx"], params["ry"]
    d = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)
    r_mean = 0.5 * (rx + ry)
    ring = params["ring_int"] * np.exp(-(((d - 1.0) * r_mean) / params["thick"]) ** 2)
    tissue = params["tissue_int"] * (d < 1.0) * (1.0 + 0.3 * np.sin(xx * params["fx"] + yy * params["fy"]))
    bx, by = blob_xy
    sigma = rng.uniform(1.1, 1.7)
    blob = rng.uniform(0.7, 1.0) * np.exp(-((xx - bx) ** 2 + (yy - by) ** 2) / (2 * sigma ** 2))
    img = ring + tissue + blob + rng.normal(0.0, params["noise"], size=(size, size))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _patient_params(seed: int, pid: int, size: int) -> dict:
    rng = _stream(seed, _PATIENT_STREAM, pid)
    c = (size - 1) / 2.0
    scale = size / 28.0
    return {
        "cx": c + rng.uniform(-1.2, 1.2) * scale,
        "cy": c + rng.uniform(-1.2, 1.2) * scale,
        "rx": rng.uniform(10.0, 12.0) * scale,
        "ry": rng.uniform(10.5, 12.5) * scale,
        "thick": rng.uniform(1.0, 1.6) * scale,
        "ring_int": rng.uniform(0.55, 0.85),
        "tissue_int": rng.uniform(0.12, 0.25),
        "fx": rng.uniform(0.2, 0.6),
        "fy": rng.uniform(0.2, 0.6),
        "noise": rng.uniform(0.03, 0.07),
    }


def blob_position(label: int, params: dict, rng: np.random.Generator):
    cx, cy, rx, ry = params["cx"], params["cy"], params["rx"], params["ry"]
    if label == 0:
        theta = rng.uniform(0, 2 * np.pi)
        rho = rng.uniform(0.92, 1.05)
    elif label == 1:
        # interior, kept clear of the inferior region
        theta = rng.uniform(0, 2 * np.pi)
        rho = 0.38 * np.sqrt(rng.uniform(0, 1))
    else:
        theta = np.pi / 2 + rng.uniform(-0.25, 0.25)
        rho = rng.uniform(0.62, 0.72)
    return cx + rho * rx * np.cos(theta), cy + rho * ry * np.sin(theta)


def gen_synthetic(n: int, priors=DEFAULT_PRIORS, patients: int = 233, seed: int = 0,
                  size: int = 28) -> LabeledImageSet:
    """Deterministic synthetic set with ``n`` images from ``patients`` patients."""
    priors = np.asarray(priors, dtype=np.float64)
    if priors.ndim != 1 or priors.size == 0 or np.any(priors <= 0):
        raise ContractError("priors must be a non-empty vector of positive values")
    if abs(priors.sum() - 1.0) > 1e-6:
        raise ContractError(f"priors must sum to 1, got {priors.sum()}")
    if n < 1 or patients < 1 or patients > n:
        raise ContractError("need 1 <= patients <= n")
    k = priors.size
    counts = largest_remainder(n, priors)
    layout = _stream(seed, _LAYOUT_STREAM, 0)
    labels = np.concatenate([np.full(c, i, dtype=np.int64) for i, c in enumerate(counts)])
    pids = np.empty(n, dtype=np.int64)
    if patients >= k:
        per = _patient_classes(patients, counts, priors)
        ids = layout.permutation(patients)
        start_pid = 0
        start = 0
        for cls in range(k):
            m, p = int(counts[cls]), int(per[cls])
            if m == 0:
                continue
            cls_ids = ids[start_pid:start_pid + p]
            start_pid += p
            # every patient gets >= 1 slice, the rest spread with random weights
            extra = layout.multinomial(m - p, layout.dirichlet(np.full(p, 2.0)))
            sizes = 1 + extra
            pids[start:start + m] = np.repeat(cls_ids, sizes)
            start += m
    else:
        pids[:] = np.arange(n) % patients
    order = layout.permutation(n)
    labels, pids = labels[order], pids[order]
    params = {int(p): _patient_params(seed, int(p), size) for p in np.unique(pids)}
    images = np.empty((n, 1, size, size), dtype=np.float32)
    for i in range(n):
        rng = _stream(seed, _IMAGE_STREAM, i)
        pp = params[int(pids[i])]
        images[i, 0] = render_slice(pp, blob_position(int(labels[i]), pp, rng), rng, size)
    names = CLASS_NAMES if k == len(CLASS_NAMES) else tuple(f"class-{i}" for i in range(k))
    return LabeledImageSet(images, labels, pids, names)
