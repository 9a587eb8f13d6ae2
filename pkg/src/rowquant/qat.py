"""Quantization-aware training with straight-through projections."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .assignment import REASSIGN_INTERVAL, LayerAssignment, RatioConfig, RowAssignment, assign_rows, reassign
from .data import Dataset, batches, calibration_batch
from .quantizers import ALL_SPECS, activation_codes, calibrate_clip, project
from .tensor import Tensor

ACT_BITS = 4
DEFAULT_CLIP = 6.0
MIN_CLIP = 1e-3
METRIC_FIELDS = ("epoch", "train_loss", "train_acc", "val_acc", "lr")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 8e-3
    lr_schedule: str = "cosine"
    seed: int = 0
    ratio: Optional[RatioConfig] = field(default_factory=RatioConfig)
    reassign_interval: int = REASSIGN_INTERVAL
    momentum: float = 0.9
    weight_decay: float = 0.0
    calib_size: int = 128

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.lr_schedule not in ("step", "cosine"):
            raise ValueError(f"lr_schedule must be 'step' or 'cosine', got {self.lr_schedule!r}")

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "cosine":
            return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * epoch / self.epochs))
        step = max(1, self.epochs // 3)
        return self.learning_rate * 0.1 ** (epoch // step)


# ---------------------------------------------------------------------------
# straight-through projections
# ---------------------------------------------------------------------------

def project_rows(weight: np.ndarray, la: LayerAssignment) -> np.ndarray:
    """Dequantized weights: every row projected onto its own spec and scale."""
    rows = weight.reshape(weight.shape[0], -1)
    out = np.empty_like(rows)
    for spec in ALL_SPECS:
        idx = la.rows_with(spec)
        if idx.size:
            out[idx] = project(rows[idx], spec, la.alphas[idx, None])
    return out.reshape(weight.shape)


def ste_weight(w: Tensor, la: LayerAssignment) -> Tensor:
    """Forward: row-wise projection. Backward: identity where |w| ≤ α, zero elsewhere."""
    if la.rows != w.shape[0]:
        raise ValueError(f"assignment has {la.rows} rows, weight has {w.shape[0]}")
    alphas = la.alphas.reshape((-1,) + (1,) * (w.ndim - 1))
    mask = (np.abs(w.data) <= alphas).astype(np.float64)
    return T.custom_op(project_rows(w.data, la), (w,), lambda g: (T.mul(g, mask),))


def ste_activation(x: Tensor, clip: Tensor, bits: int = ACT_BITS, signed: bool = False) -> Tensor:
    """Uniform activation quantizer with a learnable clip.

    Backward to ``x`` is the identity inside the clip range; the clip
    receives the summed gradient of saturated entries (PACT rule).
    """
    c = clip.item()
    steps = 2 ** (bits - 1) - 1 if signed else 2**bits - 1
    q = c * (activation_codes(x.data, bits, c, signed) / steps)
    lo = -c if signed else 0.0
    inside = ((x.data >= lo) & (x.data <= c)).astype(np.float64)
    above = (x.data > c).astype(np.float64)
    if signed:
        above = above - (x.data < -c).astype(np.float64)
    clip_shape = clip.shape

    def _bw(g):
        gx = T.mul(g, inside) if x.requires_grad else None
        gc = T.reshape(T.sum(T.mul(g, above)), clip_shape) if clip.requires_grad else None
        return gx, gc

    return T.custom_op(q, (x, clip), _bw)


# ---------------------------------------------------------------------------
# model wrapper
# ---------------------------------------------------------------------------

class QuantizedModel:
    """A model plus its row assignment, activation clips and optimizer state.

    The layer weights are float shadow weights; projections are re-derived on
    every forward. With ``assignment`` None this is a plain float model.
    """

    def __init__(self, model, assignment: Optional[RowAssignment] = None, act_clips=None,
                 act_signed=None, epoch: int = 0, seed: int = 0):
        self.model = model
        self.assignment = assignment
        self.act_clips = dict(act_clips or {})
        self.act_signed = dict(act_signed or {})
        self.epoch = epoch
        self.seed = seed
        self.velocity: dict = {}
        self.metrics: list = []
        self.meta: dict = {}

    @property
    def is_quantized(self) -> bool:
        return self.assignment is not None

    def clip(self, idx: int) -> Tensor:
        if idx not in self.act_clips:
            self.act_clips[idx] = Tensor(np.array(DEFAULT_CLIP), requires_grad=True)
        return self.act_clips[idx]

    def _weight_fn(self, idx, w):
        if idx not in self.assignment.layers:
            raise KeyError(f"layer {idx} has no row assignment")
        return ste_weight(w, self.assignment.layers[idx])

    def _act_fn(self, idx, x):
        return ste_activation(x, self.clip(idx), ACT_BITS, self.act_signed.get(idx, False))

    def forward(self, x, quantized: bool = True) -> Tensor:
        if quantized and self.is_quantized:
            return self.model.forward(x, self._weight_fn, self._act_fn)
        return self.model.forward(x)

    __call__ = forward

    def named_params(self) -> dict:
        out = dict(self.model.named_params())
        for idx, clip in sorted(self.act_clips.items()):
            out[f"act_clip.{idx}"] = clip
        return out

    def trainable(self) -> dict:
        params = {k: p for k, p in self.model.named_params().items() if p.requires_grad}
        if self.is_quantized:
            for idx in self.model.quantizable:
                params[f"act_clip.{idx}"] = self.clip(idx)
        return params

    def projected_weights(self) -> dict:
        return {
            idx: project_rows(self.model.layers[idx].weight.data, la)
            for idx, la in self.assignment.layers.items()
        }

    def layer_inputs(self, x) -> dict:
        """Float-path input of every quantizable layer (no recording)."""
        seen = {}

        def grab(idx, t):
            seen[idx] = t.data
            return t

        with T.no_grad():
            self.model.forward(x, act_fn=grab)
        return seen

    def init_activation_clips(self, x) -> None:
        """MSE-calibrate each layer's clip on ``x``; layers fed negative values quantize signed."""
        for idx, inp in self.layer_inputs(x).items():
            signed = bool(np.min(inp) < 0)
            self.act_signed[idx] = signed
            self.act_clips[idx] = Tensor(np.array(calibrate_clip(inp, ACT_BITS, signed)), requires_grad=True)


def ste_project_forward(qmodel: QuantizedModel, layer_index: int, x) -> Tensor:
    """One quantizable layer's output computed from projected input and weights."""
    layer = qmodel.model.layers[layer_index]
    x = x if isinstance(x, Tensor) else Tensor(x)
    return layer.forward_with(qmodel._act_fn(layer_index, x), qmodel._weight_fn(layer_index, layer.weight))


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------

def predict_logits(qmodel: QuantizedModel, features: np.ndarray, batch_size: int = 256, quantized: bool = True) -> np.ndarray:
    outs = []
    with T.no_grad():
        for start in range(0, len(features), batch_size):
            outs.append(qmodel.forward(features[start:start + batch_size], quantized=quantized).data)
    if not outs:
        return np.zeros((0, qmodel.model.num_classes))
    return np.concatenate(outs)


def topk_accuracy(logits: np.ndarray, labels: np.ndarray, k: int = 1) -> float:
    if len(labels) == 0:
        raise ValueError("accuracy of an empty set is undefined")
    k = min(k, logits.shape[1])
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(top == labels[:, None], axis=1)))


def evaluate(qmodel: QuantizedModel, dataset: Dataset, batch_size: int = 256) -> dict:
    logits = predict_logits(qmodel, dataset.features, batch_size)
    report = {"top1": topk_accuracy(logits, dataset.labels, 1)}
    if dataset.class_count >= 5:
        report["top5"] = topk_accuracy(logits, dataset.labels, 5)
    return report


def prepare(qmodel: QuantizedModel, train_data: Dataset, config: TrainConfig) -> QuantizedModel:
    """Initial row assignment and activation clips if ``config`` asks for quantization."""
    if config.ratio is not None and not qmodel.is_quantized:
        calib = calibration_batch(train_data, config.calib_size, config.seed)
        qmodel.assignment = assign_rows(qmodel.model, config.ratio, calib, seed=config.seed)
        qmodel.init_activation_clips(calib[0])
    return qmodel


def train(qmodel: QuantizedModel, train_data: Dataset, config: TrainConfig,
          val_data: Optional[Dataset] = None, log=None) -> QuantizedModel:
    """Run epochs ``qmodel.epoch`` … ``config.epochs − 1`` of SGD with momentum.

    Metrics rows are appended to ``qmodel.metrics``. A checkpoint that already
    reached ``config.epochs`` is returned untouched.
    """
    prepare(qmodel, train_data, config)
    quantized = qmodel.is_quantized
    calib = calibration_batch(train_data, config.calib_size, config.seed) if quantized else None
    for epoch in range(qmodel.epoch, config.epochs):
        if quantized:
            qmodel.assignment = reassign(
                qmodel.model, qmodel.assignment, qmodel.assignment.ratio, calib, epoch,
                seed=config.seed, interval=config.reassign_interval,
            )
        lr = config.lr_at(epoch)
        params = qmodel.trainable()
        loss_sum, correct, seen = 0.0, 0, 0
        for step, (xb, yb) in enumerate(batches(train_data, config.batch_size, config.seed, epoch)):
            try:
                logits = qmodel.forward(xb)
                loss = T.softmax_cross_entropy(logits, yb)
                grads = T.grad(loss, list(params.values()))
            except T.NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite values at epoch {epoch + 1}, batch {step}: {exc}") from exc
            for (name, p), g in zip(params.items(), grads):
                v = qmodel.velocity.get(name)
                d = g.data + config.weight_decay * p.data if name.endswith("weight") else g.data
                v = d if v is None else config.momentum * v + d
                qmodel.velocity[name] = v
                p.data = p.data - lr * v
                if name.startswith("act_clip"):
                    p.data = np.maximum(p.data, MIN_CLIP)
            loss_sum += loss.item() * len(yb)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
            seen += len(yb)
        if not math.isfinite(loss_sum):
            raise TrainingDiverged(f"loss diverged at epoch {epoch + 1}")
        row = {
            "epoch": epoch + 1,
            "train_loss": loss_sum / max(seen, 1),
            "train_acc": correct / max(seen, 1),
            "val_acc": evaluate(qmodel, val_data)["top1"] if val_data is not None and len(val_data) else float("nan"),
            "lr": lr,
        }
        qmodel.metrics.append(row)
        qmodel.epoch = epoch + 1
        if log is not None:
            log(row)
    return qmodel


def write_metrics(rows: list, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)
        for r in rows:
            writer.writerow([r["epoch"]] + [repr(float(r[k])) for k in METRIC_FIELDS[1:]])


def read_metrics(path) -> list:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]
