"""Checkpoints (JSON manifest + float64 blob) and packed integer-code export.

Checkpoint layout, for a base path P:

* ``P.manifest`` -- UTF-8 JSON: ``format_version``, model config, row
  assignment (specs per row, ratio, epoch), activation clip signedness,
  epoch, seed, metrics log, and a tensor table with byte offset, length and
  CRC32 for every tensor in the blob.
* ``P.tensors`` -- concatenated little-endian float64 tensors, row-major.

Export layout, for a base path P:

* ``P.codes`` -- per quantizable layer: F float32 LE row scales, then each
  row's codes. 4-bit rows are nibble-packed (element 2i in the low nibble,
  2i+1 in the high nibble, odd tails padded with 0); 8-bit rows are one
  two's-complement byte per element. Fixed-4 nibbles hold the two's
  complement level index k ∈ [−7, 7]. PoT-4 nibbles are 0 for the zero level,
  otherwise bit 3 = sign (1 = negative) and bits 0-2 = exponent + 7.
* ``P.codes.manifest`` -- UTF-8 JSON describing offsets, specs, clips and biases.
"""

from __future__ import annotations

import json
import math
import zlib

import numpy as np

from .assignment import LayerAssignment, RatioConfig, RowAssignment
from .kernels import POT_SHIFT_BASE, RowKernel, layer_kernels
from .models import Model
from .qat import QuantizedModel
from .quantizers import QuantSpec, Scheme
from .tensor import Tensor

FORMAT_VERSION = "1.0"
EXPORT_VERSION = "1.0"


class CheckpointError(ValueError):
    pass


def _encode_metric(v):
    return None if isinstance(v, float) and math.isnan(v) else v


def _decode_metric(v):
    return float("nan") if v is None else v


def _collect_tensors(qm: QuantizedModel) -> dict:
    tensors = {name: t.data for name, t in qm.model.named_params().items()}
    for idx, clip in sorted(qm.act_clips.items()):
        tensors[f"act_clip.{idx}"] = clip.data
    if qm.assignment is not None:
        for idx, la in sorted(qm.assignment.layers.items()):
            tensors[f"assign.{idx}.alphas"] = la.alphas
            tensors[f"assign.{idx}.variances"] = la.variances
            if la.eigenvalues is not None:
                tensors[f"assign.{idx}.eigenvalues"] = la.eigenvalues
    for name, v in sorted(qm.velocity.items()):
        tensors[f"velocity.{name}"] = v
    return tensors


def save(qm: QuantizedModel, path) -> None:
    path = str(path)
    table, chunks, offset = [], [], 0
    for name, arr in _collect_tensors(qm).items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(np.shape(arr)), "offset": offset,
                      "nbytes": len(raw), "crc32": zlib.crc32(raw)})
        chunks.append(raw)
        offset += len(raw)
    assignment = None
    if qm.assignment is not None:
        assignment = {
            "ratio": str(qm.assignment.ratio),
            "epoch": qm.assignment.epoch,
            "layers": {
                str(idx): {"specs": [str(s) for s in la.specs], "theta": la.theta}
                for idx, la in sorted(qm.assignment.layers.items())
            },
        }
    manifest = {
        "format_version": FORMAT_VERSION,
        "model": qm.model.config(),
        "assignment": assignment,
        "act_signed": {str(k): bool(v) for k, v in sorted(qm.act_signed.items())},
        "epoch": qm.epoch,
        "seed": qm.seed,
        "metrics": [{k: _encode_metric(v) for k, v in row.items()} for row in qm.metrics],
        "meta": qm.meta,
        "tensors": table,
    }
    with open(path + ".tensors", "wb") as fh:
        fh.write(b"".join(chunks))
    with open(path + ".manifest", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load(path) -> QuantizedModel:
    path = str(path)
    with open(path + ".manifest", encoding="utf-8") as fh:
        manifest = json.load(fh)
    version = str(manifest.get("format_version", ""))
    if version.split(".")[0] != FORMAT_VERSION.split(".")[0]:
        raise CheckpointError(f"unsupported checkpoint format version {version!r}")
    with open(path + ".tensors", "rb") as fh:
        blob = fh.read()
    tensors = {}
    for entry in manifest["tensors"]:
        raw = blob[entry["offset"]: entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"tensor {entry['name']}: blob truncated")
        if zlib.crc32(raw) != entry["crc32"]:
            raise CheckpointError(f"tensor {entry['name']}: checksum mismatch")
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(entry["shape"])

    model = Model.from_config(manifest["model"])
    for i, layer in enumerate(model.layers):
        for pname in list(layer.params()):
            key = f"layers.{i}.{pname}"
            if key not in tensors:
                raise CheckpointError(f"missing tensor {key}")
            old = getattr(layer, pname)
            setattr(layer, pname, Tensor(tensors[key], requires_grad=old.requires_grad))

    assignment = None
    if manifest.get("assignment") is not None:
        a = manifest["assignment"]
        assignment = RowAssignment(RatioConfig.parse(a["ratio"]), epoch=a.get("epoch", 0))
        for key, la in a["layers"].items():
            idx = int(key)
            assignment.layers[idx] = LayerAssignment(
                specs=[QuantSpec.parse(s) for s in la["specs"]],
                alphas=tensors[f"assign.{idx}.alphas"],
                variances=tensors[f"assign.{idx}.variances"],
                eigenvalues=tensors.get(f"assign.{idx}.eigenvalues"),
                theta=la.get("theta"),
            )
            if model.layers[idx].weight.shape[0] != assignment.layers[idx].rows:
                raise CheckpointError(f"layer {idx}: assignment rows do not match weight rows")
        try:
            assignment.validate()
        except ValueError as exc:
            raise CheckpointError(f"invalid assignment: {exc}") from exc

    clips = {int(n.split(".")[1]): Tensor(v, requires_grad=True) for n, v in tensors.items() if n.startswith("act_clip.")}
    qm = QuantizedModel(
        model, assignment, clips, {int(k): v for k, v in manifest.get("act_signed", {}).items()},
        epoch=manifest.get("epoch", 0), seed=manifest.get("seed", 0),
    )
    qm.velocity = {n[len("velocity."):]: v for n, v in tensors.items() if n.startswith("velocity.")}
    qm.metrics = [{k: _decode_metric(v) for k, v in row.items()} for row in manifest.get("metrics", [])]
    qm.meta = manifest.get("meta", {})
    return qm


# ---------------------------------------------------------------------------
# packed export
# ---------------------------------------------------------------------------

def _nibbles(row: RowKernel) -> np.ndarray:
    if row.spec.scheme is Scheme.POT:
        mag = np.where(row.codes == 0, 0, row.exponents + 7)
        return (mag | np.where(row.codes < 0, 8, 0)).astype(np.uint8)
    return (row.codes & 0xF).astype(np.uint8)


def pack_row(row: RowKernel) -> bytes:
    if row.spec.weight_bits == 8:
        return row.codes.astype("<i1").tobytes()
    nib = _nibbles(row)
    if nib.size % 2:
        nib = np.append(nib, 0).astype(np.uint8)
    return (nib[0::2] | (nib[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_row(raw: bytes, spec: QuantSpec, length: int, scale: float) -> RowKernel:
    if spec.weight_bits == 8:
        return RowKernel(spec, np.frombuffer(raw, dtype="<i1").astype(np.int64)[:length], scale)
    b = np.frombuffer(raw, dtype=np.uint8)
    nib = np.empty(b.size * 2, dtype=np.int64)
    nib[0::2] = b & 0xF
    nib[1::2] = b >> 4
    nib = nib[:length]
    if spec.scheme is Scheme.POT:
        mag = nib & 0x7
        sign = np.where(mag == 0, 0, np.where(nib & 0x8, -1, 1))
        exps = np.where(mag == 0, -POT_SHIFT_BASE, mag - 7)
        return RowKernel(spec, sign.astype(np.int64), scale, exps.astype(np.int64))
    codes = np.where(nib >= 8, nib - 16, nib)
    return RowKernel(spec, codes.astype(np.int64), scale)


def packed_row_bytes(spec: QuantSpec, length: int) -> int:
    return length if spec.weight_bits == 8 else (length + 1) // 2


def export(qm: QuantizedModel, path) -> None:
    if not qm.is_quantized:
        raise CheckpointError("only quantized models can be exported")
    path = str(path)
    layers, chunks, offset = [], [], 0
    for idx, la in sorted(qm.assignment.layers.items()):
        layer = qm.model.layers[idx]
        rows = layer_kernels(layer.weight.data, la)
        scales = np.array([r.weight_scale for r in rows], dtype="<f4").tobytes()
        packed = [pack_row(r) for r in rows]
        entry = {
            "layer": idx,
            "rows": len(rows),
            "row_length": rows[0].length,
            "weight_shape": list(layer.weight.shape),
            "specs": [str(s) for s in la.specs],
            "scales_offset": offset,
            "codes_offset": offset + len(scales),
            "act_clip": float(qm.clip(idx).item()),
            "act_signed": bool(qm.act_signed.get(idx, False)),
            "bias": None if layer.bias is None else [float(v) for v in layer.bias.data.astype(np.float32)],
        }
        data = scales + b"".join(packed)
        chunks.append(data)
        offset += len(data)
        layers.append(entry)
    with open(path + ".codes", "wb") as fh:
        fh.write(b"".join(chunks))
    with open(path + ".codes.manifest", "w", encoding="utf-8") as fh:
        json.dump({"format_version": EXPORT_VERSION, "model": qm.model.config(), "layers": layers}, fh, indent=1)
        fh.write("\n")


def load_export(path) -> dict:
    """Layer index → list of RowKernel, decoded from an export."""
    path = str(path)
    with open(path + ".codes.manifest", encoding="utf-8") as fh:
        manifest = json.load(fh)
    with open(path + ".codes", "rb") as fh:
        blob = fh.read()
    out = {}
    for entry in manifest["layers"]:
        n, k = entry["rows"], entry["row_length"]
        scales = np.frombuffer(blob, dtype="<f4", count=n, offset=entry["scales_offset"])
        pos = entry["codes_offset"]
        rows = []
        for r, text in enumerate(entry["specs"]):
            spec = QuantSpec.parse(text)
            size = packed_row_bytes(spec, k)
            rows.append(unpack_row(blob[pos:pos + size], spec, k, float(scales[r])))
            pos += size
        out[entry["layer"]] = rows
    return out
