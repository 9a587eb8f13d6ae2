"""Fixed-point and power-of-two projection quantizers with per-row scale."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

__all__ = [
    "Scheme",
    "QuantSpec",
    "POT_W4A4",
    "FIXED_W4A4",
    "FIXED_W8A4",
    "ALL_SPECS",
    "round_half_away",
    "fixed_levels",
    "pot_levels",
    "levels",
    "fixed_codes",
    "fixed_values",
    "pot_codes",
    "pot_values",
    "quantize_fixed",
    "quantize_pot",
    "project",
    "clip_mask",
    "activation_codes",
    "quantize_activation",
    "calibrate_alpha",
    "calibrate_clip",
]


class Scheme(str, enum.Enum):
    POT = "PoT"
    FIXED = "Fixed"


@dataclass(frozen=True)
class QuantSpec:
    scheme: Scheme
    weight_bits: int
    act_bits: int = 4

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.act_bits != 4:
            raise ValueError("activations are always 4-bit")
        if self.weight_bits not in (4, 8):
            raise ValueError(f"weight_bits must be 4 or 8, got {self.weight_bits}")
        if self.scheme is Scheme.POT and self.weight_bits != 4:
            raise ValueError("PoT is only used at 4 bits")

    def __str__(self) -> str:
        return f"{self.scheme.value}-W{self.weight_bits}A{self.act_bits}"

    @classmethod
    def parse(cls, text: str) -> "QuantSpec":
        for spec in ALL_SPECS:
            if str(spec).lower() == text.strip().lower():
                return spec
        raise ValueError(f"unknown quantization spec {text!r}")


POT_W4A4 = QuantSpec(Scheme.POT, 4)
FIXED_W4A4 = QuantSpec(Scheme.FIXED, 4)
FIXED_W8A4 = QuantSpec(Scheme.FIXED, 8)
ALL_SPECS = (POT_W4A4, FIXED_W4A4, FIXED_W8A4)


# Peaks below the smallest normal double are treated as zero: scaling a
# subnormal by grid fractions underflows to non-positive candidates.
_TINY = np.finfo(np.float64).tiny


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _check_bits(m: int) -> None:
    if not isinstance(m, (int, np.integer)) or not 2 <= m <= 16:
        raise ValueError(f"invalid bit width {m!r}")


def _check_alpha(alpha) -> None:
    if np.any(np.asarray(alpha) <= 0):
        raise ValueError("alpha must be positive")


def _fixed_n(m: int) -> int:
    return 2 ** (m - 1) - 1


def _pot_min_exponent(m: int) -> int:
    return -(2 ** (m - 1) - 2)


def fixed_values(codes, n: int, alpha):
    # The single place level values are formed; levels and projections share it
    # so membership checks can use exact equality.
    return alpha * (np.asarray(codes, dtype=np.float64) / n)


def pot_values(signs, exponents, alpha):
    signs = np.asarray(signs, dtype=np.float64)
    mags = alpha * np.exp2(np.asarray(exponents, dtype=np.float64))
    return np.where(signs == 0, 0.0, signs * mags)


def fixed_levels(m: int, alpha: float) -> np.ndarray:
    """Sorted level set ±α·{0, 1/n, …, 1} with n = 2^(m−1) − 1."""
    _check_bits(m)
    _check_alpha(alpha)
    n = _fixed_n(m)
    return fixed_values(np.arange(-n, n + 1), n, alpha)


def pot_levels(m: int, alpha: float) -> np.ndarray:
    """Sorted level set {0} ∪ ±α·2^e, e from −(2^(m−1) − 2) to 0."""
    _check_bits(m)
    _check_alpha(alpha)
    e = np.arange(_pot_min_exponent(m), 1)
    pos = pot_values(np.ones_like(e), e, alpha)
    return np.concatenate([-pos[::-1], [0.0], pos])


def levels(spec: QuantSpec, alpha: float) -> np.ndarray:
    if spec.scheme is Scheme.POT:
        return pot_levels(spec.weight_bits, alpha)
    return fixed_levels(spec.weight_bits, alpha)


def fixed_codes(w, m: int, alpha) -> np.ndarray:
    """Signed integer level indices in [−n, n] of the nearest Fixed level."""
    n = _fixed_n(m)
    w = np.asarray(w, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    c = np.clip(w, -alpha, alpha)
    lo = np.clip(np.floor(c / alpha * n), -n, n)
    hi = np.minimum(lo + 1, n)
    d_lo = np.abs(fixed_values(lo, n, alpha) - c)
    d_hi = np.abs(fixed_values(hi, n, alpha) - c)
    take_hi = (d_hi < d_lo) | ((d_hi == d_lo) & (np.abs(hi) > np.abs(lo)))
    return np.where(take_hi, hi, lo).astype(np.int64)


def pot_codes(w, m: int, alpha):
    """(sign, exponent) pairs of the nearest-in-log PoT level.

    Zero-level entries carry sign 0 and the smallest exponent.
    """
    emin = _pot_min_exponent(m)
    w = np.asarray(w, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    c = np.clip(w, -alpha, alpha)
    with np.errstate(divide="ignore"):
        t = np.log2(np.abs(c) / alpha)
    zero = t < emin - 0.5
    e = np.clip(round_half_away(np.where(zero, emin, t)), emin, 0).astype(np.int64)
    sign = np.where(zero, 0, np.sign(c)).astype(np.int64)
    return sign, np.where(zero, emin, e)


def quantize_fixed(w, m: int, alpha):
    _check_bits(m)
    _check_alpha(alpha)
    out = fixed_values(fixed_codes(w, m, alpha), _fixed_n(m), np.asarray(alpha, dtype=np.float64))
    return float(out) if np.ndim(out) == 0 else out


def quantize_pot(w, m: int, alpha):
    _check_bits(m)
    _check_alpha(alpha)
    sign, e = pot_codes(w, m, alpha)
    out = pot_values(sign, e, np.asarray(alpha, dtype=np.float64))
    return float(out) if np.ndim(out) == 0 else out


def project(w, spec: QuantSpec, alpha):
    """Project an array onto ``spec``'s level set; ``alpha`` broadcasts against ``w``."""
    if spec.scheme is Scheme.POT:
        return quantize_pot(w, spec.weight_bits, alpha)
    return quantize_fixed(w, spec.weight_bits, alpha)


def clip_mask(w, alpha) -> np.ndarray:
    """Straight-through support: 1 where −α ≤ w ≤ α, else 0."""
    w = np.asarray(w, dtype=np.float64)
    return (np.abs(w) <= alpha).astype(np.float64)


def activation_codes(x, bits: int, clip: float, signed: bool = False) -> np.ndarray:
    steps = 2 ** (bits - 1) - 1 if signed else 2**bits - 1
    x = np.asarray(x, dtype=np.float64)
    c = np.clip(x, -clip if signed else 0.0, clip)
    return round_half_away(c * steps / clip).astype(np.int64)


def activation_step(bits: int, clip: float, signed: bool = False) -> float:
    steps = 2 ** (bits - 1) - 1 if signed else 2**bits - 1
    return clip / steps


def quantize_activation(x, bits: int = 4, clip: float = 6.0, signed: bool = False):
    """Uniform activation quantizer over [0, clip] (or [−clip, clip] if ``signed``).

    Values beyond the clip saturate. Returns the same container type it was given.
    """
    if clip <= 0:
        raise ValueError("clip must be positive")
    steps = 2 ** (bits - 1) - 1 if signed else 2**bits - 1
    data = x.data if isinstance(x, Tensor) else x
    out = clip * (activation_codes(data, bits, clip, signed) / steps)
    if isinstance(x, Tensor):
        return Tensor(out)
    return float(out) if np.ndim(out) == 0 else out


def calibrate_alpha(row, spec: QuantSpec, grid: int = 64) -> float:
    """Per-row scale minimizing mean squared projection error.

    Candidates are ``grid`` points spanning [0.5, 1.5]·max|w| plus max|w|
    itself, so a row already on some level grid is always reproducible.
    Ties go to the smaller scale. An all-zero (or subnormal) row gets α = 1.
    """
    row = np.asarray(row, dtype=np.float64).reshape(-1)
    if row.size == 0:
        raise ValueError("cannot calibrate an empty row")
    peak = float(np.max(np.abs(row)))
    if peak < _TINY:
        return 1.0
    cands = np.unique(np.append(peak * np.linspace(0.5, 1.5, grid), peak))
    err = np.mean((project(row[None, :], spec, cands[:, None]) - row[None, :]) ** 2, axis=1)
    return float(cands[int(np.argmin(err))])


def calibrate_clip(x, bits: int = 4, signed: bool = False, grid: int = 64) -> float:
    """MSE-optimal activation clip over ``grid`` fractions of the observed peak."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    peak = float(np.max(np.abs(x))) if x.size else 0.0
    if peak < _TINY:
        return 1.0
    if x.size > 65536:
        x = x[np.linspace(0, x.size - 1, 65536).astype(np.int64)]
    cands = peak * np.arange(1, grid + 1) / grid
    steps = 2 ** (bits - 1) - 1 if signed else 2**bits - 1
    errs = [
        np.mean((c * (activation_codes(x, bits, c, signed) / steps) - x) ** 2) for c in cands
    ]
    return float(cands[int(np.argmin(errs))])
