"""Row-wise scheme/precision assignment.

Per layer, the rows with the largest-magnitude Hessian block eigenvalues get
Fixed-W8A4; the remaining rows are split by weight variance, low-variance
rows going to PoT-W4A4 and the rest to Fixed-W4A4.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from . import tensor as T
from .hessian import MAX_ITER, HessianEstimate, power_iteration, row_hvp
from .quantizers import FIXED_W4A4, FIXED_W8A4, POT_W4A4, QuantSpec, calibrate_alpha

REASSIGN_INTERVAL = 10


class AssignmentWarning(UserWarning):
    pass


@dataclass(frozen=True)
class RatioConfig:
    """Per-layer row percentages PoT-W4A4 : Fixed-W4A4 : Fixed-W8A4."""

    pot4: int = 65
    fixed4: int = 30
    fixed8: int = 5

    def __post_init__(self):
        parts = (self.pot4, self.fixed4, self.fixed8)
        if any(int(p) != p or p < 0 for p in parts):
            raise ValueError(f"ratio parts must be non-negative integers, got {parts}")
        if sum(parts) != 100:
            raise ValueError("ratio must sum to 100")

    @classmethod
    def parse(cls, text: str) -> "RatioConfig":
        try:
            a, b, c = (int(p) for p in text.strip().split(":"))
        except ValueError:
            raise ValueError(f"ratio must look like A:B:C, got {text!r}") from None
        return cls(a, b, c)

    def __str__(self) -> str:
        return f"{self.pot4}:{self.fixed4}:{self.fixed8}"


def _round_half_up(x: Fraction) -> int:
    return int((x + Fraction(1, 2)).__floor__())


def split_counts(rows: int, ratio: RatioConfig) -> tuple:
    """(n_pot4, n_fixed4, n_fixed8) for a layer with ``rows`` rows.

    Fixed-W8A4 gets round(F·C/100), at least one row when C > 0; the rest
    split A : B with round-half-up going to PoT.
    """
    if rows < 0:
        raise ValueError("rows must be non-negative")
    n8 = _round_half_up(Fraction(rows * ratio.fixed8, 100))
    if ratio.fixed8 > 0:
        n8 = max(1, n8)
    n8 = min(n8, rows)
    rest = rows - n8
    ab = ratio.pot4 + ratio.fixed4
    n_pot = _round_half_up(Fraction(rest * ratio.pot4, ab)) if ab else 0
    return n_pot, rest - n_pot, n8


@dataclass
class LayerAssignment:
    specs: list
    alphas: np.ndarray
    variances: np.ndarray
    eigenvalues: Optional[np.ndarray] = None
    theta: Optional[float] = None

    @property
    def rows(self) -> int:
        return len(self.specs)

    def counts(self) -> tuple:
        return (
            sum(s == POT_W4A4 for s in self.specs),
            sum(s == FIXED_W4A4 for s in self.specs),
            sum(s == FIXED_W8A4 for s in self.specs),
        )

    def rows_with(self, spec: QuantSpec) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.specs) if s == spec], dtype=np.int64)


@dataclass
class RowAssignment:
    ratio: RatioConfig
    layers: dict = field(default_factory=dict)
    epoch: int = 0
    estimates: list = field(default_factory=list)

    def __getitem__(self, layer_index: int) -> LayerAssignment:
        return self.layers[layer_index]

    def validate(self) -> None:
        for idx, la in self.layers.items():
            if len(la.alphas) != la.rows:
                raise ValueError(f"layer {idx}: {la.rows} specs but {len(la.alphas)} scales")
            if np.any(la.alphas <= 0):
                raise ValueError(f"layer {idx}: non-positive scale")
            if la.counts() != split_counts(la.rows, self.ratio):
                raise ValueError(
                    f"layer {idx}: counts {la.counts()} violate ratio {self.ratio} "
                    f"(expected {split_counts(la.rows, self.ratio)})"
                )

    def summary(self) -> list:
        """One (layer, rows, pot4, fixed4, fixed8) tuple per layer."""
        return [(idx, la.rows) + la.counts() for idx, la in sorted(self.layers.items())]


def row_variances(weight: np.ndarray) -> np.ndarray:
    return weight.reshape(weight.shape[0], -1).var(axis=1)


def assign_layer(weight: np.ndarray, ratio: RatioConfig, eigenvalues=None, layer_index=None) -> LayerAssignment:
    """Assign specs and scales to the rows of one layer's weight array.

    ``eigenvalues`` may be omitted only when the Fixed-W8A4 count is 0 or
    every row.
    """
    rows = weight.shape[0]
    flat = weight.reshape(rows, -1)
    n_pot, n_f4, n8 = split_counts(rows, ratio)
    wanted = (ratio.pot4, ratio.fixed4, ratio.fixed8)
    got = (n_pot, n_f4, n8)
    if any(w > 0 and g == 0 for w, g in zip(wanted, got)):
        warnings.warn(
            f"layer {layer_index}: {rows} rows cannot honor ratio {ratio}; using counts {got}",
            AssignmentWarning,
            stacklevel=2,
        )
    order = np.arange(rows)
    if 0 < n8 < rows:
        if eigenvalues is None:
            raise ValueError("eigenvalues are required to pick Fixed-W8A4 rows")
        mags = np.abs(np.asarray(eigenvalues, dtype=np.float64))
        order = np.lexsort((np.arange(rows), -mags))
    high = set(order[:n8].tolist())
    specs = [FIXED_W8A4 if r in high else None for r in range(rows)]

    variances = row_variances(flat)
    rest = np.array([r for r in range(rows) if r not in high], dtype=np.int64)
    theta = None
    if rest.size:
        ranked = rest[np.lexsort((rest, variances[rest]))]
        for r in ranked[:n_pot]:
            specs[r] = POT_W4A4
        for r in ranked[n_pot:]:
            specs[r] = FIXED_W4A4
        if 0 < n_pot < rest.size:
            theta = float(0.5 * (variances[ranked[n_pot - 1]] + variances[ranked[n_pot]]))
    alphas = np.array([calibrate_alpha(flat[r], specs[r]) for r in range(rows)])
    eig = None if eigenvalues is None else np.asarray(eigenvalues, dtype=np.float64)
    return LayerAssignment(specs, alphas, variances, eig, theta)


def assign_rows(model, ratio: RatioConfig, calib_batch, seed: int = 0, max_iter: int = MAX_ITER) -> RowAssignment:
    """Assign every quantizable layer of ``model`` on a fixed calibration batch.

    The Hessian is taken of the float cross-entropy loss at the current
    (shadow) weights, one diagonal block per row.
    """
    x, y = calib_batch
    layers = {idx: model.layers[idx] for idx in model.quantizable}
    need = [idx for idx, layer in layers.items() if 0 < split_counts(layer.rows, ratio)[2] < layer.rows]
    eigen: dict = {}
    estimates = []
    if need:
        loss = T.softmax_cross_entropy(model.forward(x), y)
        grads = T.grad(loss, [layers[i].weight for i in need], create_graph=True)
        for idx, g in zip(need, grads):
            w = layers[idx].weight
            dim = int(np.prod(w.shape[1:]))
            lams = np.zeros(w.shape[0])
            for r in range(w.shape[0]):
                if g.requires_grad:
                    lam, iters, conv = power_iteration(row_hvp(g, w, r), dim, max_iter=max_iter, seed=[seed, idx, r])
                else:
                    lam, iters, conv = 0.0, 1, True
                lams[r] = lam
                estimates.append(HessianEstimate((idx, r), lam, iters, conv))
            eigen[idx] = lams
    result = RowAssignment(ratio, estimates=estimates)
    for idx, layer in layers.items():
        result.layers[idx] = assign_layer(layer.weight.data, ratio, eigen.get(idx), layer_index=idx)
    result.validate()
    return result


def reassign(model, assignment: RowAssignment, ratio: RatioConfig, calib_batch, epoch: int,
             seed: int = 0, interval: int = REASSIGN_INTERVAL) -> RowAssignment:
    """Fresh assignment on epochs that are positive multiples of ``interval``, else ``assignment`` itself."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if epoch > 0 and interval > 0 and epoch % interval == 0:
        fresh = assign_rows(model, ratio, calib_batch, seed=seed)
        fresh.epoch = epoch
        return fresh
    return assignment
