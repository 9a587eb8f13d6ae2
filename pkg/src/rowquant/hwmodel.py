"""Analytic latency/resource model for three concurrent GEMM cores on an FPGA.

Each quantizable layer's rows are split across a PoT-4 shift-accumulate core
(LUTs only), a Fixed-4 multiply core and a Fixed-8 multiply core (DSPs plus a
LUT overhead per PE). Within a layer the cores run concurrently; layers run
one after another. Memory bandwidth is not modeled.

Per-PE costs are real-valued profile parameters fitted offline (see
``scripts/fit_profiles.py``) and shipped as text files under ``profiles/``.
"""

from __future__ import annotations

import io
import math
import os
from dataclasses import MISSING, asdict, dataclass, fields
from fractions import Fraction
from typing import Optional, Sequence

from .assignment import RatioConfig, split_counts

PROFILE_DIR = os.path.join(os.path.dirname(__file__), "profiles")
CORES = ("pot4", "fixed4", "fixed8")


class InfeasibleError(ValueError):
    """The device cannot host a core that the requested mix needs."""


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    luts: int
    dsps: int
    lut_cost_per_pot_pe: float
    lut_cost_per_fixed_pe_overhead: float
    dsp_cost_per_fixed4_pe: float
    dsp_cost_per_fixed8_pe: float
    freq_mhz: float = 100.0
    lut_reserved: float = 0.0
    dsp_control: int = 0

    def __post_init__(self):
        if self.luts < 0 or self.dsps < 0:
            raise ValueError("budgets must be non-negative")
        for f in ("lut_cost_per_pot_pe", "dsp_cost_per_fixed4_pe", "dsp_cost_per_fixed8_pe", "freq_mhz"):
            if not getattr(self, f) > 0:
                raise ValueError(f"{f} must be positive")
        if self.lut_cost_per_fixed_pe_overhead < 0 or self.lut_reserved < 0 or self.dsp_control < 0:
            raise ValueError("overheads must be non-negative")

    def replace(self, **changes) -> "DeviceProfile":
        return DeviceProfile(**{**asdict(self), **changes})


_INT_FIELDS = {"luts", "dsps", "dsp_control"}


def load_profile(path_or_name) -> DeviceProfile:
    """Read ``key = value`` lines; a bare name resolves to a shipped profile."""
    path = str(path_or_name)
    if not os.path.exists(path):
        shipped = os.path.join(PROFILE_DIR, path.lower() + ".txt")
        if os.path.exists(shipped):
            path = shipped
        else:
            raise FileNotFoundError(f"device profile not found: {path_or_name}")
    known = {f.name: f for f in fields(DeviceProfile)}
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            if key == "name":
                values[key] = value
            elif key in _INT_FIELDS:
                values[key] = int(value)
            else:
                values[key] = float(value)
    missing = [f.name for f in fields(DeviceProfile) if f.name not in values and f.default is MISSING]
    if missing:
        raise ValueError(f"{path}: missing keys {', '.join(missing)}")
    return DeviceProfile(**values)


def save_profile(profile: DeviceProfile, path, comment: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in comment.splitlines():
            fh.write(f"# {line}\n")
        for f in fields(DeviceProfile):
            v = getattr(profile, f.name)
            fh.write(f"{f.name} = {v if isinstance(v, (str, int)) else repr(float(v))}\n")


# ---------------------------------------------------------------------------
# model shapes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerShape:
    """A GEMM: ``rows`` output channels, each a dot product of ``row_length`` at ``positions`` outputs."""

    name: str
    rows: int
    row_length: int
    positions: int = 1

    @property
    def macs_per_row(self) -> int:
        return self.row_length * self.positions

    @property
    def macs(self) -> int:
        return self.rows * self.macs_per_row


def resnet18_shape(num_classes: int = 1000) -> list:
    """ResNet-18 at 224×224 input (about 1.81 GMAC), downsample 1×1 convs included."""
    layers = [LayerShape("conv1", 64, 3 * 7 * 7, 112 * 112)]
    for stage, (c, hw) in enumerate([(64, 56), (128, 28), (256, 14), (512, 7)], start=1):
        cin = 64 if stage == 1 else c // 2
        pos = hw * hw
        layers.append(LayerShape(f"layer{stage}.0.conv1", c, cin * 9, pos))
        layers.append(LayerShape(f"layer{stage}.0.conv2", c, c * 9, pos))
        if stage > 1:
            layers.append(LayerShape(f"layer{stage}.0.downsample", c, cin, pos))
        layers.append(LayerShape(f"layer{stage}.1.conv1", c, c * 9, pos))
        layers.append(LayerShape(f"layer{stage}.1.conv2", c, c * 9, pos))
    layers.append(LayerShape("fc", num_classes, 512, 1))
    return layers


def model_shape(model) -> list:
    """Quantizable layers of a ``models.Model`` as LayerShapes (one sample)."""
    from . import tensor as T

    out = []
    shape = tuple(model.input_shape)
    for i, layer in enumerate(model.layers):
        kind = getattr(layer, "kind", "")
        if kind == "linear":
            n_in = int(layer.weight.shape[1])
            out.append(LayerShape(f"layers.{i}", int(layer.weight.shape[0]), n_in, 1))
            shape = (int(layer.weight.shape[0]),)
        elif kind == "conv2d":
            c, h, w = shape
            k = layer.kernel_size
            ho = T.conv_output_size(h, k, layer.stride, layer.padding)
            wo = T.conv_output_size(w, k, layer.stride, layer.padding)
            cout = int(layer.weight.shape[0])
            out.append(LayerShape(f"layers.{i}", cout, c * k * k, ho * wo))
            shape = (cout, ho, wo)
        elif kind == "maxpool2d":
            c, h, w = shape
            k = getattr(layer, "k", 2)
            shape = (c, h // k, w // k)
        elif kind == "flatten":
            shape = (int(math.prod(shape)),)
    return out


SHAPES = {"resnet18": resnet18_shape}


# ---------------------------------------------------------------------------
# allocation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoreAllocation:
    pot4_pes: int
    fixed4_pes: int
    fixed8_pes: int
    luts_used: float
    dsps_used: float

    def pes(self, core: str) -> int:
        return getattr(self, core + "_pes")


def layer_counts(layer: LayerShape, ratio: RatioConfig, eight_bit: bool = False) -> tuple:
    """Rows per core (pot4, fixed4, fixed8); ``eight_bit`` puts the whole layer on Fixed-8."""
    if eight_bit:
        return (0, 0, layer.rows)
    return split_counts(layer.rows, ratio)


def _work(shape: Sequence[LayerShape], ratio: RatioConfig, first_last_8bit: bool):
    """(uniform ops per core, ops of 8-bit-only layers)."""
    uniform = [0, 0, 0]
    special = 0
    last = len(shape) - 1
    for i, layer in enumerate(shape):
        if first_last_8bit and i in (0, last):
            special += layer.macs
            continue
        for c, n in enumerate(layer_counts(layer, ratio)):
            uniform[c] += n * layer.macs_per_row
    return uniform, special


def allocate_cores(profile: DeviceProfile, ratio: RatioConfig, shape: Optional[Sequence[LayerShape]] = None,
                   first_last_8bit: bool = False) -> CoreAllocation:
    """Size the three PE arrays.

    DSPs are spent first: the Fixed cores split them in proportion to their
    work so that they finish a layer together. The PoT core is sized to keep
    pace with them and is capped by the LUTs left over. When some layers run
    entirely on Fixed-8 (``first_last_8bit``), the DSP split between the
    concurrent part and those sequential layers minimizes total time.
    Without ``shape`` the ratio's shares stand in for the work.
    """
    if shape is None:
        uniform, special = [ratio.pot4, ratio.fixed4, ratio.fixed8], 0
    else:
        if not shape:
            raise ValueError("model shape has no layers")
        uniform, special = _work(shape, ratio, first_last_8bit)
    total = sum(uniform)
    if total + special == 0:
        raise ValueError("model shape has no work")
    w = [u / total if total else 0.0 for u in uniform]
    s = special / total if total else 1.0
    p = profile
    d = (p.dsp_cost_per_fixed4_pe, p.dsp_cost_per_fixed8_pe)
    budget = p.dsps - p.dsp_control
    needs_fixed = w[1] > 0 or w[2] > 0 or s > 0
    if needs_fixed and budget <= 0:
        raise InfeasibleError(f"{p.name}: no DSPs left for the Fixed cores")

    # continuous sizes: tau is PEs per unit of uniform work share
    tau = math.inf
    f4 = f8 = 0.0
    if needs_fixed:
        a = d[0] * w[1] + d[1] * w[2]  # DSPs per unit tau
        if s == 0:
            tau = budget / a
            f4, f8 = w[1] * tau, w[2] * tau
        else:
            # minimize 1/tau + s/f8 subject to d4*w4*tau + d8*f8 <= budget, f8 >= w8*tau
            a_ex = a - d[1] * w[2]  # = d4*w4
            if a_ex > 0:
                k = budget / (math.sqrt(a_ex) + math.sqrt(s * d[1]))
                tau = k / math.sqrt(a_ex)
                f8 = k * math.sqrt(s / d[1])
                if f8 < w[2] * tau:  # the uniform Fixed-8 share binds
                    tau = budget / a
                    f8 = w[2] * tau
                f4 = w[1] * tau
            else:
                f8 = budget / d[1]
                tau = f8 / w[2] if w[2] > 0 else math.inf
    lut_free = p.luts - p.lut_reserved
    fixed_pes = math.floor(f4 + 1e-9) + math.floor(f8 + 1e-9)
    if w[0] > 0:
        lut_free -= p.lut_cost_per_pot_pe  # at least one PoT PE
    if fixed_pes and fixed_pes * p.lut_cost_per_fixed_pe_overhead > lut_free:
        scale = max(lut_free, 0.0) / (fixed_pes * p.lut_cost_per_fixed_pe_overhead)
        f4, f8, tau = f4 * scale, f8 * scale, tau * scale
    P4 = math.floor(f4 + 1e-9)
    P8 = math.floor(f8 + 1e-9)
    if (w[1] > 0 and P4 < 1) or ((w[2] > 0 or s > 0) and P8 < 1):
        raise InfeasibleError(f"{p.name}: ratio {ratio} needs a Fixed core the device cannot host")
    fixed_luts = (P4 + P8) * p.lut_cost_per_fixed_pe_overhead
    P0 = 0
    if w[0] > 0:
        cap = math.floor((p.luts - p.lut_reserved - fixed_luts) / p.lut_cost_per_pot_pe + 1e-9)
        P0 = cap if math.isinf(tau) else min(cap, math.floor(w[0] * tau + 1e-9) or 1)
        if P0 < 1:
            raise InfeasibleError(f"{p.name}: no LUTs left for the PoT core")
    dsps = P4 * d[0] + P8 * d[1] + p.dsp_control
    luts = p.lut_reserved + fixed_luts + P0 * p.lut_cost_per_pot_pe
    return CoreAllocation(P0, P4, P8, luts, dsps)


def estimate_layer(layer: LayerShape, counts: Sequence[int], alloc: CoreAllocation) -> int:
    """Cycles for one layer: the slowest core's ceil(ops / PEs)."""
    if sum(counts) != layer.rows:
        raise ValueError(f"{layer.name}: counts {tuple(counts)} do not cover {layer.rows} rows")
    cycles = 0
    for core, n in zip(CORES, counts):
        ops = n * layer.macs_per_row
        if ops == 0:
            continue
        pes = alloc.pes(core)
        if pes < 1:
            raise InfeasibleError(f"{layer.name}: {core} core has no PEs but {n} rows")
        cycles = max(cycles, -(-ops // pes))
    return cycles


@dataclass
class CostReport:
    device: str
    ratio: str
    layer_names: list
    layer_cycles: list
    latency_ms: float
    throughput_gops: float
    lut_util: float
    dsp_util: float
    allocation: CoreAllocation

    COLUMNS = ("device", "ratio", "LUT %", "DSP %", "GOP/s", "latency ms")

    def summary_row(self) -> list:
        return [self.device, self.ratio, f"{self.lut_util:.1f}", f"{self.dsp_util:.1f}",
                f"{self.throughput_gops:.1f}", f"{self.latency_ms:.4g}"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("layer,cycles\n")
        for name, c in zip(self.layer_names, self.layer_cycles):
            buf.write(f"{name},{c}\n")
        buf.write(f"total,{sum(self.layer_cycles)}\n")
        return buf.getvalue()

    def table(self) -> str:
        a = self.allocation
        rows = [self.COLUMNS, self.summary_row()]
        widths = [max(len(str(r[i])) for r in rows) for i in range(len(self.COLUMNS))]
        lines = ["  ".join(str(v).rjust(wd) for v, wd in zip(r, widths)) for r in rows]
        lines.append(f"PEs: pot4={a.pot4_pes} fixed4={a.fixed4_pes} fixed8={a.fixed8_pes}")
        return "\n".join(lines)


def report(shape: Sequence[LayerShape], ratio: RatioConfig, profile: DeviceProfile,
           first_last_8bit: bool = False) -> CostReport:
    """Whole-model latency, throughput and utilization for one ratio."""
    if not shape:
        raise ValueError("model shape has no layers")
    alloc = allocate_cores(profile, ratio, shape, first_last_8bit)
    last = len(shape) - 1
    cycles = [
        estimate_layer(layer, layer_counts(layer, ratio, first_last_8bit and i in (0, last)), alloc)
        for i, layer in enumerate(shape)
    ]
    total = sum(cycles)
    if total <= 0:
        raise ValueError("model shape has no work")
    seconds = total / (profile.freq_mhz * 1e6)
    macs = sum(layer.macs for layer in shape)
    return CostReport(
        device=profile.name,
        ratio=str(ratio),
        layer_names=[layer.name for layer in shape],
        layer_cycles=cycles,
        latency_ms=seconds * 1e3,
        throughput_gops=2.0 * macs / seconds / 1e9,
        lut_util=100.0 * alloc.luts_used / profile.luts if profile.luts else 0.0,
        dsp_util=100.0 * alloc.dsps_used / profile.dsps if profile.dsps else 0.0,
        allocation=alloc,
    )


# ---------------------------------------------------------------------------
# reference configurations and fitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReferenceRow:
    label: str
    ratio: str
    first_last_8bit: bool
    latency_ms: dict  # device name → published latency, missing where not reported


REFERENCE_ROWS = (
    ReferenceRow("(1) Fixed", "0:100:0", True, {"XC7Z020": 122.6, "XC7Z045": 31.4}),
    ReferenceRow("(2) Fixed", "0:100:0", False, {"XC7Z020": 99.3, "XC7Z045": 25.4}),
    ReferenceRow("(3) PoT", "100:0:0", True, {"XC7Z020": 58.1, "XC7Z045": 12.5}),
    ReferenceRow("(4) PoT", "100:0:0", False, {"XC7Z020": 50.2, "XC7Z045": 10.3}),
    ReferenceRow("(5) PoT+Fixed", "50:50:0", True, {"XC7Z020": 72.0, "XC7Z045": 18.4}),
    ReferenceRow("(6) PoT+Fixed", "50:50:0", False, {"XC7Z020": 47.8, "XC7Z045": 12.2}),
    ReferenceRow("(7) PoT+Fixed", "60:40:0", True, {"XC7Z020": 63.6}),
    ReferenceRow("(8) PoT+Fixed", "67:33:0", True, {"XC7Z045": 14.8}),
    ReferenceRow("RMSMP-1", "60:35:5", False, {"XC7Z020": 40.7}),
    ReferenceRow("RMSMP-2", "65:30:5", False, {"XC7Z045": 8.6}),
)


def reference_rows(device: str) -> list:
    return [r for r in REFERENCE_ROWS if device in r.latency_ms]


FIT_PARAMS = ("lut_cost_per_pot_pe", "lut_cost_per_fixed_pe_overhead", "dsp_cost_per_fixed4_pe",
              "dsp_cost_per_fixed8_pe", "lut_reserved")


def fit_loss(profile: DeviceProfile, rows: Sequence[ReferenceRow], shape: Sequence[LayerShape]) -> float:
    """Sum of squared log-latency errors; infeasible configurations cost 1e3 each."""
    loss = 0.0
    for r in rows:
        try:
            got = report(shape, RatioConfig.parse(r.ratio), profile, r.first_last_8bit).latency_ms
        except (InfeasibleError, ValueError):
            loss += 1e3
            continue
        loss += math.log(got / r.latency_ms[profile.name]) ** 2
    return loss


def fit_profile(base: DeviceProfile, shape: Optional[Sequence[LayerShape]] = None, seed: int = 0,
                starts: int = 16) -> DeviceProfile:
    """Least-squares fit (log latency) of the per-PE costs to the reference rows.

    Nelder-Mead in log-parameter space from seeded random starts; the best
    result is returned with costs rounded to 4 significant digits.
    """
    import numpy as np
    from scipy.optimize import minimize

    shape = list(shape) if shape is not None else resnet18_shape()
    rows = reference_rows(base.name)
    if not rows:
        raise ValueError(f"no reference rows for device {base.name!r}")
    rng = np.random.default_rng([seed, base.dsps, base.luts])
    lo = np.log([20.0, 1.0, 0.5, 0.5, 1.0])
    hi = np.log([400.0, 100.0, 4.0, 8.0, 0.3 * base.luts])

    def make(theta):
        return base.replace(**dict(zip(FIT_PARAMS, np.exp(theta).tolist())))

    def objective(theta):
        return fit_loss(make(theta), rows, shape)

    best = None
    for _ in range(starts):
        x0 = lo + (hi - lo) * rng.random(len(FIT_PARAMS))
        res = minimize(objective, x0, method="Nelder-Mead",
                       options={"maxiter": 4000, "xatol": 1e-6, "fatol": 1e-10})
        if best is None or res.fun < best.fun:
            best = res
    fitted = {k: float(f"{v:.4g}") for k, v in zip(FIT_PARAMS, np.exp(best.x))}
    return base.replace(**fitted)


def shipped_profiles() -> list:
    return sorted(f[:-4] for f in os.listdir(PROFILE_DIR) if f.endswith(".txt"))


def speedup(fast: CostReport, slow: CostReport) -> float:
    return float(Fraction(sum(slow.layer_cycles), sum(fast.layer_cycles)))
