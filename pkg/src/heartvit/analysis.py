"""Layerwise representation diagnostics: linear CKA, CLS cosine, residual ratio.

All comparisons use post-block activations.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateInputError
from .model import ActivationCache

CKA_SLACK = 1e-9


def linear_cka(X, Y) -> float:
    """Linear CKA between two ``samples x features`` matrices (columns centered here)."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ContractError(f"CKA needs two 2-D arrays with equal rows, got {X.shape} and {Y.shape}")
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    if not np.any(Xc) or not np.any(Yc):
        raise DegenerateInputError("CKA input has zero variance")
    cross = np.linalg.norm(Yc.T @ Xc) ** 2
    return float(cross / (np.linalg.norm(Xc.T @ Xc) * np.linalg.norm(Yc.T @ Yc)))


def _unit_rows(x):
    norms = np.linalg.norm(x, axis=-1)
    if np.any(norms == 0):
        raise DegenerateInputError("CLS activation has zero norm")
    return x / norms[:, None]


def cls_cosine(dense: ActivationCache, pruned: ActivationCache, layer: int) -> float:
    """Mean cosine between the CLS activations of two runs after ``layer``."""
    a, b = dense.cls_token(layer), pruned.cls_token(layer)
    if a.shape != b.shape:
        raise ContractError("caches come from different inputs")
    return float(np.mean(np.sum(_unit_rows(a) * _unit_rows(b), axis=-1)))


def residual_ratio(cache: ActivationCache, layer: int) -> float:
    """Mean over inputs and live tokens of ``|x_in| / |x_out|`` for one block."""
    ins, outs = cache.io_norms(layer)
    if np.any(outs == 0):
        raise DegenerateInputError(f"block {layer} produced a zero-norm token")
    return float(np.mean(ins / outs))


def aligned_tokens(dense: ActivationCache, pruned: ActivationCache, layer: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack (sample, position) rows present in both runs after ``layer``."""
    if dense.batch_size() != pruned.batch_size():
        raise ContractError("caches come from different inputs")
    xs, ys = [], []
    for b in range(dense.batch_size()):
        pa, ra = dense.rows(layer, b)
        pb, rb = pruned.rows(layer, b)
        common, ia, ib = np.intersect1d(pa, pb, return_indices=True)
        xs.append(ra[ia])
        ys.append(rb[ib])
    return np.concatenate(xs), np.concatenate(ys)


@dataclass
class LayerReport:
    cka: list
    cls_cosine: list
    residual_ratio: list

    def __post_init__(self):
        if not len(self.cka) == len(self.cls_cosine) == len(self.residual_ratio):
            raise ContractError("layer report columns differ in length")
        for v in self.cka:
            if not -CKA_SLACK <= v <= 1 + CKA_SLACK:
                raise ContractError(f"CKA {v} outside [0, 1]")
        for v in self.cls_cosine:
            if not -1 - CKA_SLACK <= v <= 1 + CKA_SLACK:
                raise ContractError(f"cosine {v} outside [-1, 1]")
        for v in self.residual_ratio:
            if not v > 0:
                raise ContractError(f"residual ratio {v} is not positive")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# activations: post-block\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "cka", "cls_cosine", "residual_ratio"])
        for l, row in enumerate(zip(self.cka, self.cls_cosine, self.residual_ratio)):
            w.writerow([l] + [repr(float(v)) for v in row])
        return buf.getvalue()


def layer_report(dense: ActivationCache, other: ActivationCache) -> LayerReport:
    """Compare two runs on the same inputs; residual ratios describe ``other``."""
    L = dense.layers
    if other.layers != L:
        raise ContractError("caches have different depths")
    cka = [linear_cka(*aligned_tokens(dense, other, l)) for l in range(L)]
    cos = [cls_cosine(dense, other, l) for l in range(L)]
    res = [residual_ratio(other, l) for l in range(L)]
    return LayerReport(cka, cos, res)
