"""Principal component analysis used to shrink spiking-network inputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractError
from ..tensor import Tensor


@dataclass(frozen=True)
class PCA:
    components: np.ndarray  # [k, D], unit rows
    mean: np.ndarray  # [D]
    explained_variance: np.ndarray  # [k]
    explained_variance_ratio: np.ndarray  # [k]

    @property
    def k(self) -> int:
        return self.components.shape[0]


def pca_fit(data, k: int) -> PCA:
    """Top-``k`` covariance eigenvectors, sign fixed so the first nonzero coordinate is positive."""
    x = np.asarray(data.data if isinstance(data, Tensor) else data, dtype=np.float64)
    x = x.reshape(x.shape[0], -1)
    n, d = x.shape
    if n < 2:
        raise ContractError("PCA needs at least two samples")
    if not 1 <= k <= min(n, d):
        raise ContractError(f"k must be in [1, {min(n, d)}], got {k}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    comps = evecs[:, order].T.copy()
    for row in comps:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size and row[nz[0]] < 0:
            row *= -1
    var = np.clip(evals[order], 0, None)
    total = np.clip(evals, 0, None).sum()
    ratio = var / total if total > 0 else np.zeros_like(var)
    return PCA(comps.astype(np.float32), mean.astype(np.float32), var, ratio)


def pca_transform(pca: PCA, data) -> np.ndarray:
    x = np.asarray(data.data if isinstance(data, Tensor) else data, dtype=np.float32)
    x = x.reshape(x.shape[0], -1)
    return ((x - pca.mean) @ pca.components.T).astype(np.float32)


def pca_inverse(pca: PCA, projected) -> np.ndarray:
    return (np.asarray(projected, dtype=np.float32) @ pca.components + pca.mean).astype(np.float32)


def fold_pca_into_model(pca: PCA, model, image_shape):
    """Prepend the projection to a model trained on PCA features.

    The first Dense layer absorbs the (linear) projection, so the result takes
    raw images and stays conversion-friendly.
    """
    from ..ir.graph import ModelGraph
    from ..ir.layers import Dense, Flatten

    first = model.layers[0]
    if not isinstance(first, Dense) or model.input_shape != (pca.k,):
        raise ContractError("model must start with Dense and take PCA features as input")
    p = model.layer_params(0)
    w = p["weight"].data.astype(np.float64)
    folded_w = w @ pca.components.astype(np.float64)
    folded_b = p["bias"].data - w @ (pca.components.astype(np.float64) @ pca.mean.astype(np.float64))
    layers = [Flatten()] + list(model.layers)
    params = {}
    for name, t in model.params.items():
        idx, rest = name.split(".", 1)
        params[f"{int(idx) + 1}.{rest}"] = t
    params["1.dense.weight"] = Tensor(folded_w)
    params["1.dense.bias"] = Tensor(folded_b)
    meta = dict(model.metadata, pca_components=pca.k)
    return ModelGraph(layers, tuple(image_shape), model.class_count, params, meta)
