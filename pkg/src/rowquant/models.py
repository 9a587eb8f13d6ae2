"""Small layer stack and the named architecture presets."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

ARCHITECTURES = ("mlp-small", "cnn-small", "cnn-tiny")


class Layer:
    kind = "layer"
    quantizable = False

    def params(self) -> dict:
        return {}

    def config(self) -> dict:
        return {"type": self.kind}

    def __call__(self, x: Tensor) -> Tensor:
        raise NotImplementedError


class Linear(Layer):
    kind = "linear"
    quantizable = True

    def __init__(self, in_features: int, out_features: int, rng=None, bias: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        std = np.sqrt(2.0 / in_features)
        self.weight = Tensor(rng.standard_normal((out_features, in_features)) * std, requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    @property
    def rows(self) -> int:
        return self.out_features

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def config(self):
        return {"type": self.kind, "in": self.in_features, "out": self.out_features, "bias": self.bias is not None}

    def forward_with(self, x: Tensor, weight: Tensor) -> Tensor:
        return T.linear(x, weight, self.bias)

    def __call__(self, x):
        return self.forward_with(x, self.weight)


class Conv2d(Layer):
    kind = "conv2d"
    quantizable = True

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=0, rng=None, bias=True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = Tensor(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True) if bias else None

    @property
    def rows(self) -> int:
        return self.out_channels

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def config(self):
        return {
            "type": self.kind,
            "in": self.in_channels,
            "out": self.out_channels,
            "k": self.kernel_size,
            "stride": self.stride,
            "padding": self.padding,
            "bias": self.bias is not None,
        }

    def forward_with(self, x: Tensor, weight: Tensor) -> Tensor:
        return T.conv2d(x, weight, self.bias, stride=self.stride, padding=self.padding)

    def __call__(self, x):
        return self.forward_with(x, self.weight)


class ReLU(Layer):
    kind = "relu"

    def __call__(self, x):
        return T.relu(x)


class MaxPool2d(Layer):
    kind = "maxpool2d"

    def __call__(self, x):
        return T.max_pool2d(x, 2)


class Flatten(Layer):
    kind = "flatten"

    def __call__(self, x):
        return T.reshape(x, (x.shape[0], -1))


class BatchNorm(Layer):
    """Affine batch norm with frozen running statistics (set via :meth:`calibrate`)."""

    kind = "batchnorm"

    def __init__(self, channels: int, eps: float = 1e-5):
        self.channels, self.eps = channels, eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels))
        self.running_var = Tensor(np.ones(channels))

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta, "running_mean": self.running_mean, "running_var": self.running_var}

    def config(self):
        return {"type": self.kind, "channels": self.channels, "eps": self.eps}

    def calibrate(self, x: np.ndarray) -> None:
        axes = (0,) + tuple(range(2, x.ndim))
        self.running_mean = Tensor(x.mean(axis=axes))
        self.running_var = Tensor(x.var(axis=axes))

    def __call__(self, x):
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean.data, self.running_var.data, self.eps)


def layer_from_config(cfg: dict) -> Layer:
    kind = cfg["type"]
    if kind == "linear":
        return Linear(cfg["in"], cfg["out"], bias=cfg.get("bias", True))
    if kind == "conv2d":
        return Conv2d(cfg["in"], cfg["out"], cfg["k"], cfg["stride"], cfg["padding"], bias=cfg.get("bias", True))
    if kind == "batchnorm":
        return BatchNorm(cfg["channels"], cfg.get("eps", 1e-5))
    simple = {"relu": ReLU, "maxpool2d": MaxPool2d, "flatten": Flatten}
    if kind in simple:
        return simple[kind]()
    raise ValueError(f"unknown layer type {kind!r}")


WeightFn = Callable[[int, Tensor], Tensor]
ActFn = Callable[[int, Tensor], Tensor]


class Model:
    def __init__(self, layers: list, input_shape: tuple, num_classes: int, arch: str = "custom"):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.arch = arch

    @property
    def quantizable(self) -> list:
        """Indices of layers whose weights are quantized row-wise."""
        return [i for i, layer in enumerate(self.layers) if layer.quantizable]

    def named_params(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.params().items():
                out[f"layers.{i}.{name}"] = p
        return out

    def trainable(self) -> list:
        return [p for p in self.named_params().values() if p.requires_grad]

    def forward(self, x, weight_fn: Optional[WeightFn] = None, act_fn: Optional[ActFn] = None) -> Tensor:
        """Run the stack; the hooks see each quantizable layer's weight and input."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        for i, layer in enumerate(self.layers):
            if layer.quantizable:
                if act_fn is not None:
                    x = act_fn(i, x)
                w = weight_fn(i, layer.weight) if weight_fn is not None else layer.weight
                x = layer.forward_with(x, w)
            else:
                x = layer(x)
        return x

    __call__ = forward

    def config(self) -> dict:
        return {
            "arch": self.arch,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [layer.config() for layer in self.layers],
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "Model":
        layers = [layer_from_config(c) for c in cfg["layers"]]
        return cls(layers, tuple(cfg["input_shape"]), cfg["num_classes"], cfg.get("arch", "custom"))


def _spatial_after(shape: tuple, pools: int) -> tuple:
    c, h, w = shape
    for _ in range(pools):
        h, w = h // 2, w // 2
    return h, w


def build_model(arch: str, input_shape: tuple, num_classes: int, seed: int = 0) -> Model:
    """Instantiate a named preset.

    ``mlp-small`` flattens any input; the CNNs need (C, H, W) input and use
    3×3 same-padded convolutions each followed by 2×2 max pooling.
    """
    rng = np.random.default_rng(seed)
    input_shape = tuple(int(s) for s in input_shape)
    if arch == "mlp-small":
        n_in = int(np.prod(input_shape))
        layers = [Flatten(), Linear(n_in, 128, rng), ReLU(), Linear(128, num_classes, rng)]
    elif arch in ("cnn-small", "cnn-tiny"):
        if len(input_shape) != 3:
            raise ValueError(f"{arch} needs (C, H, W) input, got {input_shape}")
        c = input_shape[0]
        if arch == "cnn-small":
            h, w = _spatial_after(input_shape, 2)
            if h < 1 or w < 1:
                raise ValueError(f"input {input_shape} too small for {arch}")
            layers = [
                Conv2d(c, 16, 3, padding=1, rng=rng), ReLU(), MaxPool2d(),
                Conv2d(16, 32, 3, padding=1, rng=rng), ReLU(), MaxPool2d(),
                Flatten(),
                Linear(32 * h * w, 64, rng), ReLU(),
                Linear(64, num_classes, rng),
            ]
        else:
            h, w = _spatial_after(input_shape, 1)
            if h < 1 or w < 1:
                raise ValueError(f"input {input_shape} too small for {arch}")
            layers = [
                Conv2d(c, 8, 3, padding=1, rng=rng), ReLU(), MaxPool2d(),
                Flatten(),
                Linear(8 * h * w, num_classes, rng),
            ]
    else:
        raise ValueError(f"unknown architecture {arch!r}; choose from {', '.join(ARCHITECTURES)}")
    return Model(layers, input_shape, num_classes, arch)
