from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError

CLASS_NAMES = ("meningioma-like", "glioma-like", "pituitary-like")


@dataclass
class LabeledImageSet:
    """Images ``[N, C, H, W]`` (or any per-sample shape) with labels and patient ids."""

    images: np.ndarray
    labels: np.ndarray
    patient_ids: np.ndarray
    class_names: tuple = CLASS_NAMES
    notes: list = field(default_factory=list)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.patient_ids = np.asarray(self.patient_ids, dtype=np.int64).reshape(-1)
        n = self.images.shape[0]
        if self.labels.shape[0] != n or self.patient_ids.shape[0] != n:
            raise ContractError(
                f"length mismatch: {n} images, {self.labels.shape[0]} labels, "
                f"{self.patient_ids.shape[0]} patient ids")
        self.class_names = tuple(self.class_names)

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, indices) -> "LabeledImageSet":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledImageSet(self.images[idx], self.labels[idx], self.patient_ids[idx],
                               self.class_names)

    def class_counts(self, k: int | None = None) -> np.ndarray:
        k = self.num_classes if k is None else k
        return np.bincount(self.labels, minlength=k)

    def patients(self) -> np.ndarray:
        return np.unique(self.patient_ids)
