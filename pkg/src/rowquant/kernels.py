"""Integer-domain inference: multiply-accumulate for Fixed rows, shift-accumulate for PoT rows.

PoT exponents e ∈ [−6, 0] are re-based by +6, so every shift is a left
shift by 0…6 bits. The 2^−6 factor is folded into the row's output scale.
Activation requantization between layers happens in float.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .quantizers import POT_W4A4, Scheme, QuantSpec, _fixed_n, _pot_min_exponent, activation_codes, fixed_codes, pot_codes
from .tensor import Tensor, im2col_index

POT_SHIFT_BASE = -_pot_min_exponent(4)  # 6
_CHUNK_ELEMS = 1 << 22


@dataclass(frozen=True)
class IntActivationTile:
    """Activation codes plus the real value of one code step.

    Unsigned 4-bit codes lie in [0, 15]; a signed tile (used only when a
    layer's input can be negative) holds codes in [−7, 7].
    """

    values: np.ndarray
    scale: float
    signed: bool = False

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.int64)
        lo, hi = (-7, 7) if self.signed else (0, 15)
        if vals.size and (vals.min() < lo or vals.max() > hi):
            raise ValueError(f"activation codes must lie in [{lo}, {hi}]")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class RowKernel:
    spec: QuantSpec
    codes: np.ndarray
    weight_scale: float
    exponents: Optional[np.ndarray] = None

    @property
    def length(self) -> int:
        return int(self.codes.shape[0])

    @property
    def output_scale(self) -> float:
        """Real value of one accumulator unit per unit of activation step."""
        if self.spec.scheme is Scheme.POT:
            return self.weight_scale * 2.0**-POT_SHIFT_BASE
        return self.weight_scale / _fixed_n(self.spec.weight_bits)

    def integer_weights(self) -> np.ndarray:
        """Equivalent multiply-path codes (sign·2^(e+6) for PoT)."""
        if self.spec.scheme is Scheme.POT:
            return self.codes * (np.int64(1) << (self.exponents + POT_SHIFT_BASE))
        return self.codes


def fixed_row(weights, spec: QuantSpec, alpha: float) -> RowKernel:
    return RowKernel(spec, fixed_codes(weights, spec.weight_bits, alpha), float(alpha))


def pot_row(weights, alpha: float) -> RowKernel:
    sign, e = pot_codes(weights, 4, alpha)
    return RowKernel(POT_W4A4, sign, float(alpha), e)


def make_row(weights, spec: QuantSpec, alpha: float) -> RowKernel:
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    return pot_row(weights, alpha) if spec.scheme is Scheme.POT else fixed_row(weights, spec, alpha)


def layer_kernels(weight: np.ndarray, la) -> list:
    flat = weight.reshape(weight.shape[0], -1)
    return [make_row(flat[r], la.specs[r], la.alphas[r]) for r in range(flat.shape[0])]


def _check_len(row: RowKernel, acts: np.ndarray) -> None:
    if acts.shape[-1] != row.length:
        raise ValueError(f"length mismatch: row {row.length}, activations {acts.shape[-1]}")


def row_dot_fixed(row: RowKernel, acts: IntActivationTile):
    """Exact Σ q_w·q_a over the last axis."""
    if row.spec.scheme is not Scheme.FIXED:
        raise ValueError("row_dot_fixed needs a Fixed row")
    _check_len(row, acts.values)
    return acts.values @ row.codes


def row_dot_pot(row: RowKernel, acts: IntActivationTile):
    """Σ sign·(q_a << (e + 6)) over the last axis, using shifts and adds only."""
    if row.spec.scheme is not Scheme.POT:
        raise ValueError("row_dot_pot needs a PoT row")
    _check_len(row, acts.values)
    shifted = np.left_shift(acts.values, row.exponents + POT_SHIFT_BASE)
    pos = np.where(row.codes > 0, shifted, 0).sum(axis=-1)
    neg = np.where(row.codes < 0, shifted, 0).sum(axis=-1)
    return pos - neg


def _pot_block(rows: list, acts: np.ndarray) -> np.ndarray:
    """Shift-accumulate several PoT rows at once; returns (batch, rows) int64."""
    shifts = np.stack([r.exponents for r in rows]) + POT_SHIFT_BASE
    signs = np.stack([r.codes for r in rows])
    out = np.empty((acts.shape[0], len(rows)), dtype=np.int64)
    step = max(1, _CHUNK_ELEMS // max(1, shifts.size))
    for start in range(0, acts.shape[0], step):
        a = acts[start:start + step, None, :]
        shifted = np.left_shift(a, shifts[None])
        out[start:start + step] = (
            np.where(signs > 0, shifted, 0).sum(axis=-1) - np.where(signs < 0, shifted, 0).sum(axis=-1)
        )
    return out


def mixed_gemm(layer_rows: list, acts: IntActivationTile) -> Tensor:
    """(batch, K) activation codes against per-row kernels → dequantized (batch, rows)."""
    if any(r is None for r in layer_rows):
        raise ValueError("every row needs a kernel")
    a = acts.values if acts.values.ndim == 2 else acts.values[None, :]
    for r in layer_rows:
        _check_len(r, a)
    acc = np.zeros((a.shape[0], len(layer_rows)), dtype=np.int64)
    fixed = [i for i, r in enumerate(layer_rows) if r.spec.scheme is Scheme.FIXED]
    pot = [i for i, r in enumerate(layer_rows) if r.spec.scheme is Scheme.POT]
    if fixed:
        acc[:, fixed] = a @ np.stack([layer_rows[i].codes for i in fixed]).T
    if pot:
        acc[:, pot] = _pot_block([layer_rows[i] for i in pot], a)
    scales = np.array([r.output_scale for r in layer_rows]) * acts.scale
    out = acc * scales[None, :]
    return Tensor(out if acts.values.ndim == 2 else out[0])


def quantize_tile(x: np.ndarray, clip: float, signed: bool = False, bits: int = 4) -> IntActivationTile:
    steps = 2 ** (bits - 1) - 1 if signed else 2**bits - 1
    return IntActivationTile(activation_codes(x, bits, clip, signed), clip / steps, signed)


class IntegerEngine:
    """Whole-model integer inference for a quantized model."""

    def __init__(self, qmodel):
        if not qmodel.is_quantized:
            raise ValueError("integer engine needs a quantized model")
        self.qmodel = qmodel
        self.kernels = {
            idx: layer_kernels(qmodel.model.layers[idx].weight.data, la)
            for idx, la in qmodel.assignment.layers.items()
        }

    def _quantized_layer(self, idx: int, layer, h: np.ndarray) -> np.ndarray:
        tile = quantize_tile(h, self.qmodel.clip(idx).item(), self.qmodel.act_signed.get(idx, False))
        rows = self.kernels[idx]
        if layer.kind == "linear":
            out = mixed_gemm(rows, tile).data
            bias_shape = (1, -1)
        else:
            b, c, hh, ww = h.shape
            k = layer.kernel_size
            index, ho, wo = im2col_index(b, c, hh, ww, k, k, layer.stride, layer.padding)
            flat = tile.values.reshape(-1)
            cols = np.where(index >= 0, flat[np.where(index >= 0, index, 0)], 0)
            patches = IntActivationTile(cols.T, tile.scale, tile.signed)
            out = mixed_gemm(rows, patches).data.reshape(b, ho, wo, -1).transpose(0, 3, 1, 2)
            bias_shape = (1, -1, 1, 1)
        if layer.bias is not None:
            out = out + layer.bias.data.reshape(bias_shape)
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        with T.no_grad():
            for idx, layer in enumerate(self.qmodel.model.layers):
                if layer.quantizable:
                    h = self._quantized_layer(idx, layer, h)
                else:
                    h = layer(Tensor(h)).data
        return h

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return np.concatenate(
            [self.forward(x[s:s + batch_size]) for s in range(0, len(x), batch_size)]
        ) if len(x) else np.zeros((0, self.qmodel.model.num_classes))
