"""Layer primitives and the two network families used in experiments.

``MiddleCNN`` is three conv(3x3)-BN-LeakyReLU-maxpool(2) blocks with 64, 128
and 256 channels followed by a 1024-unit dense layer and the K-way output.
``TinyMLP`` is a single hidden layer network for desk-scale runs and tests.
"""

from __future__ import annotations

import copy
from contextlib import contextmanager
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .exceptions import ConfigurationError, DimensionError

LEAKY_SLOPE = 0.01
BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, slope: float, dtype) -> np.ndarray:
    gain = np.sqrt(2.0 / (1.0 + slope**2))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    def parameters(self) -> dict[str, Tensor]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: Tensor, training: bool) -> Tensor:
        raise NotImplementedError


class Linear(Layer):
    """Dense layer storing its weight as (in_features, out_features)."""

    def __init__(self, in_features: int, out_features: int, rng, dtype=np.float32, slope=LEAKY_SLOPE):
        self.weight = Tensor(_kaiming_uniform(rng, (in_features, out_features), in_features, slope, dtype), True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), True)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, training):
        if x.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise DimensionError(f"Linear expects (B, {self.weight.shape[0]}), got {x.shape}")
        return ad.matmul(x, self.weight) + self.bias


class Conv2d(Layer):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=0,
                 dtype=np.float32, slope=LEAKY_SLOPE):
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = Tensor(_kaiming_uniform(rng, shape, fan_in, slope, dtype), True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), True)
        self.stride = stride
        self.padding = padding

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, training):
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Layer):
    def __init__(self, num_features: int, dtype=np.float32, momentum=BN_MOMENTUM, eps=BN_EPS):
        self.gamma = Tensor(np.ones(num_features, dtype=dtype), True)
        self.beta = Tensor(np.zeros(num_features, dtype=dtype), True)
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, training):
        return ad.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training, self.momentum, self.eps)


class LeakyReLU(Layer):
    def __init__(self, slope: float = LEAKY_SLOPE):
        self.slope = slope

    def forward(self, x, training):
        return ad.leaky_relu(x, self.slope)


class MaxPool2d(Layer):
    def __init__(self, window: int = 2, stride: int = 2):
        self.window = window
        self.stride = stride

    def forward(self, x, training):
        return ad.maxpool2d(x, self.window, self.stride)


class Flatten(Layer):
    def forward(self, x, training):
        return x.reshape(x.shape[0], -1)


class ZeroPad2d(Layer):
    def __init__(self, pad: int):
        self.pad = pad

    def forward(self, x, training):
        return ad.pad2d(x, self.pad)


class Model:
    """An ordered stack of named layers mapping a batch of inputs to logits."""

    def __init__(self, layers, num_classes: int, input_shape, arch: str = "custom",
                 hparams: dict | None = None):
        self.layers: list[tuple[str, Layer]] = list(layers)
        self.num_classes = int(num_classes)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.arch = arch
        self.hparams = dict(hparams or {})
        self.training = False
        self.iteration = 0
        self.optimizer_state: dict[str, np.ndarray] = {}

    # -- parameters ----------------------------------------------------
    def named_parameters(self) -> dict[str, Tensor]:
        return {f"{name}.{key}": t for name, layer in self.layers for key, t in layer.parameters().items()}

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {f"{name}.{key}": b for name, layer in self.layers for key, b in layer.buffers().items()}

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    @property
    def dtype(self):
        return self.parameters()[0].dtype

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    @contextmanager
    def frozen(self) -> Iterator["Model"]:
        """Temporarily stop tracking parameter gradients (input gradients only)."""
        params = self.parameters()
        flags = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, flag in zip(params, flags):
                p.requires_grad = flag

    @contextmanager
    def evaluating(self) -> Iterator["Model"]:
        was_training = self.training
        self.training = False
        try:
            yield self
        finally:
            self.training = was_training

    # -- forward -------------------------------------------------------
    def forward(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(f"model expects inputs of shape (B, {self.input_shape}), got {x.shape}")
        for _, layer in self.layers:
            x = layer.forward(x, self.training)
        return x

    __call__ = forward

    def predict_logits(self, x, batch_size: int = 256) -> np.ndarray:
        """Eval-mode logits without recording a graph."""
        x = np.asarray(x, dtype=self.dtype)
        out = []
        with self.evaluating(), no_grad():
            for start in range(0, len(x), batch_size):
                out.append(self.forward(x[start:start + batch_size]).data)
        if not out:
            return np.zeros((0, self.num_classes), dtype=self.dtype)
        return np.concatenate(out)

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        return self.predict_logits(x, batch_size).argmax(axis=1)

    # -- state ---------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param/{k}": v.data for k, v in self.named_parameters().items()}
        state.update({f"buffer/{k}": v for k, v in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params, buffers = self.named_parameters(), self.named_buffers()
        for key, value in state.items():
            kind, _, name = key.partition("/")
            if kind == "param":
                target = params[name]
                if target.shape != value.shape:
                    raise DimensionError(f"{name}: expected {target.shape}, got {value.shape}")
                target.data = np.array(value, dtype=target.dtype)
            elif kind == "buffer":
                target = buffers[name]
                if target.shape != value.shape:
                    raise DimensionError(f"{name}: expected {target.shape}, got {value.shape}")
                target[...] = value

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Model":
        """Deep copy with every parameter and buffer cast to ``dtype``."""
        clone = self.copy()
        for p in clone.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, layer in clone.layers:
            for key, buf in layer.buffers().items():
                setattr(layer, key, buf.astype(dtype))
        clone.optimizer_state = {}
        return clone


def build_middlecnn(in_channels: int = 3, image_size: int = 32, num_classes: int = 10, *,
                    pad_to: int | None = None, channels=(64, 128, 256), hidden: int = 1024,
                    kernel_size: int = 3, slope: float = LEAKY_SLOPE, seed: int = 0,
                    dtype=np.float32) -> Model:
    """Conv-BN-LeakyReLU-pool blocks, then a hidden dense layer and the output layer.

    ``pad_to`` zero-pads inputs inside the network (e.g. 28x28 MNIST to 32x32)
    so the pooling chain divides evenly while attacks stay in raw pixel space.
    """
    channels = tuple(int(c) for c in channels)
    size = image_size if pad_to is None else pad_to
    factor = 2 ** len(channels)
    if pad_to is not None and (pad_to < image_size or (pad_to - image_size) % 2):
        raise ConfigurationError(f"cannot pad {image_size} symmetrically to {pad_to}")
    if size % factor:
        raise ConfigurationError(
            f"image size {size} is not divisible by {factor}; use pad_to to pad the input"
        )
    if kernel_size % 2 != 1:
        raise ConfigurationError("kernel_size must be odd to preserve spatial size")
    rng = np.random.default_rng(seed)
    layers: list[tuple[str, Layer]] = []
    if pad_to is not None and pad_to != image_size:
        layers.append(("pad", ZeroPad2d((pad_to - image_size) // 2)))
    prev = in_channels
    for i, ch in enumerate(channels, start=1):
        layers += [
            (f"conv{i}", Conv2d(prev, ch, kernel_size, rng, padding=kernel_size // 2, dtype=dtype, slope=slope)),
            (f"bn{i}", BatchNorm(ch, dtype=dtype)),
            (f"act{i}", LeakyReLU(slope)),
            (f"pool{i}", MaxPool2d(2, 2)),
        ]
        prev = ch
    flat = prev * (size // factor) ** 2
    layers += [
        ("flatten", Flatten()),
        ("fc1", Linear(flat, hidden, rng, dtype=dtype, slope=slope)),
        ("act_fc", LeakyReLU(slope)),
        ("fc2", Linear(hidden, num_classes, rng, dtype=dtype, slope=slope)),
    ]
    hparams = {
        "in_channels": in_channels, "image_size": image_size, "num_classes": num_classes,
        "pad_to": pad_to, "channels": list(channels), "hidden": hidden,
        "kernel_size": kernel_size, "slope": slope, "seed": seed,
    }
    return Model(layers, num_classes, (in_channels, image_size, image_size), "middlecnn", hparams)


def build_tinymlp(input_dim: int, hidden: int, num_classes: int, *, slope: float = LEAKY_SLOPE,
                  seed: int = 0, dtype=np.float32) -> Model:
    """Dense(hidden) - LeakyReLU - Dense(num_classes)."""
    if min(input_dim, hidden, num_classes) < 1:
        raise ConfigurationError("all TinyMLP dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    layers = [
        ("fc1", Linear(input_dim, hidden, rng, dtype=dtype, slope=slope)),
        ("act1", LeakyReLU(slope)),
        ("fc2", Linear(hidden, num_classes, rng, dtype=dtype, slope=slope)),
    ]
    hparams = {"input_dim": input_dim, "hidden": hidden, "num_classes": num_classes,
               "slope": slope, "seed": seed}
    return Model(layers, num_classes, (input_dim,), "tinymlp", hparams)


ARCHITECTURES = {
    "middlecnn": lambda hp, dtype: build_middlecnn(
        hp["in_channels"], hp["image_size"], hp["num_classes"], pad_to=hp.get("pad_to"),
        channels=hp.get("channels", (64, 128, 256)), hidden=hp.get("hidden", 1024),
        kernel_size=hp.get("kernel_size", 3), slope=hp.get("slope", LEAKY_SLOPE),
        seed=hp.get("seed", 0), dtype=dtype),
    "tinymlp": lambda hp, dtype: build_tinymlp(
        hp["input_dim"], hp["hidden"], hp["num_classes"], slope=hp.get("slope", LEAKY_SLOPE),
        seed=hp.get("seed", 0), dtype=dtype),
}


def build_model(arch: str, hparams: dict, dtype=np.float32) -> Model:
    try:
        factory = ARCHITECTURES[arch]
    except KeyError:
        raise ConfigurationError(f"unknown architecture {arch!r}") from None
    return factory(hparams, dtype)
