"""Layer graphs, forward/backward passes, fine-tuning and prediction."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T

log = logging.getLogger(__name__)

LAYER_KINDS = ("conv", "relu", "maxpool", "flatten", "dense", "dropout", "output")
PRESETS = ("vgg19-binary", "vgg19-3class", "tiny")

# class index convention: damage first, matching the one-hot y = [1, 0] for damage
DAMAGE_CLASS = 0


class ConfigError(ValueError):
    """A network configuration whose layer shapes do not compose."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    size: int = 0  # out_channels for conv, out_dim for dense, num_classes for output
    rate: float = 0.0  # dropout only

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r} for layer {self.name!r}")
        if self.kind in ("conv", "dense", "output") and self.size < 1:
            raise ConfigError(f"layer {self.name!r}: size must be positive")

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv", "dense", "output")


@dataclass(frozen=True)
class NetworkConfig:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]
    preset: str = "custom"
    cam_layer: str | None = None

    @property
    def num_classes(self) -> int:
        return self.layers[-1].size

    def layer_names(self) -> list[str]:
        return [l.name for l in self.layers]

    def feature_layer(self) -> str:
        """Layer whose activations feed the saliency map: the explicit
        ``cam_layer`` or else the last conv output, after its ReLU."""
        if self.cam_layer is not None:
            return self.cam_layer
        names = self.layer_names()
        last_conv = max(i for i, l in enumerate(self.layers) if l.kind == "conv")
        if last_conv + 1 < len(names) and self.layers[last_conv + 1].kind == "relu":
            return names[last_conv + 1]
        return names[last_conv]


def tiny_config(num_classes: int = 2, input_shape=(3, 64, 64)) -> NetworkConfig:
    layers = (
        LayerSpec("conv", "conv1", 8),
        LayerSpec("relu", "relu1"),
        LayerSpec("maxpool", "pool1"),
        LayerSpec("conv", "conv2", 16),
        LayerSpec("relu", "relu2"),
        LayerSpec("maxpool", "pool2"),
        LayerSpec("flatten", "flatten"),
        LayerSpec("dense", "fc1", 32),
        LayerSpec("relu", "relu3"),
        LayerSpec("dropout", "drop1", rate=0.5),
        LayerSpec("output", "out", num_classes),
    )
    return NetworkConfig(layers, tuple(input_shape), "tiny")


VGG19_BLOCKS = ((64, 2), (128, 2), (256, 4), (512, 4), (512, 4))


def vgg19_config(num_classes: int = 2, input_shape=(3, 224, 224), preset=None) -> NetworkConfig:
    layers = []
    for b, (width, reps) in enumerate(VGG19_BLOCKS, start=1):
        for r in range(1, reps + 1):
            layers.append(LayerSpec("conv", f"conv{b}_{r}", width))
            layers.append(LayerSpec("relu", f"relu{b}_{r}"))
        layers.append(LayerSpec("maxpool", f"pool{b}"))
    layers += [
        LayerSpec("flatten", "flatten"),
        LayerSpec("dense", "fc6", 4096),
        LayerSpec("relu", "relu6"),
        LayerSpec("dropout", "drop6", rate=0.5),
        LayerSpec("dense", "fc7", 4096),
        LayerSpec("relu", "relu7"),
        LayerSpec("dropout", "drop7", rate=0.5),
        LayerSpec("output", "fc8", num_classes),
    ]
    if preset is None:
        preset = {2: "vgg19-binary", 3: "vgg19-3class"}.get(num_classes, "vgg19")
    return NetworkConfig(tuple(layers), tuple(input_shape), preset)


def preset_config(name: str, input_shape=None, num_classes=None) -> NetworkConfig:
    if name == "tiny":
        return tiny_config(num_classes or 2, input_shape or (3, 64, 64))
    if name in ("vgg19-binary", "vgg19-3class"):
        k = num_classes or (2 if name == "vgg19-binary" else 3)
        return vgg19_config(k, input_shape or (3, 224, 224), preset=name)
    raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


def layer_shapes(config: NetworkConfig) -> list[tuple[int, ...]]:
    """Per-sample output shape of every layer. Raises ConfigError naming the
    first layer whose input shape it cannot accept."""
    if not config.layers:
        raise ConfigError("network has no layers")
    names = config.layer_names()
    if len(set(names)) != len(names):
        raise ConfigError("layer names must be unique")
    outputs = [i for i, l in enumerate(config.layers) if l.kind == "output"]
    if outputs != [len(config.layers) - 1]:
        raise ConfigError("exactly one output layer is required, and it must be last")

    shape: tuple[int, ...] = tuple(config.input_shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ConfigError(f"input_shape must be C x H x W with positive extents, got {shape}")
    shapes = []
    for layer in config.layers:
        k = layer.kind
        if k == "conv":
            if len(shape) != 3:
                raise ConfigError(f"layer {layer.name!r}: conv needs a C x H x W input, got {shape}")
            shape = (layer.size, shape[1], shape[2])
        elif k == "maxpool":
            if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                raise ConfigError(f"layer {layer.name!r}: maxpool needs even H x W, got {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif k == "flatten":
            shape = (int(np.prod(shape)),)
        elif k in ("dense", "output"):
            if len(shape) != 1:
                raise ConfigError(f"layer {layer.name!r}: dense needs a flat input, got {shape}")
            shape = (layer.size,)
        elif k == "dropout" and not 0 <= layer.rate < 1:
            raise ConfigError(f"layer {layer.name!r}: dropout rate must be in [0, 1)")
        shapes.append(shape)
    return shapes


def param_shapes(config: NetworkConfig) -> dict[str, dict[str, tuple[int, ...]]]:
    shapes = layer_shapes(config)
    out = {}
    prev = tuple(config.input_shape)
    for layer, shape in zip(config.layers, shapes):
        if layer.kind == "conv":
            out[layer.name] = {"weight": (layer.size, prev[0], 3, 3), "bias": (layer.size,)}
        elif layer.has_params:
            out[layer.name] = {"weight": (prev[0], layer.size), "bias": (layer.size,)}
        prev = shape
    return out


def he_uniform(shape, rng: np.random.Generator, dtype=T.DEFAULT_DTYPE) -> np.ndarray:
    fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


@dataclass
class Network:
    config: NetworkConfig
    params: dict[str, dict[str, np.ndarray]]
    dtype: type = T.DEFAULT_DTYPE

    @property
    def param_count(self) -> int:
        return sum(a.size for p in self.params.values() for a in p.values())

    def copy(self) -> "Network":
        return Network(
            self.config,
            {k: {n: a.copy() for n, a in v.items()} for k, v in self.params.items()},
            self.dtype,
        )


def _init_layer(shapes, rng, dtype):
    return {"weight": he_uniform(shapes["weight"], rng, dtype), "bias": np.zeros(shapes["bias"], dtype)}


def build_network(config: NetworkConfig, seed: int = 0, dtype=T.DEFAULT_DTYPE, init: str = "he-uniform") -> Network:
    """Allocate parameters: He-uniform weights, zero biases (``init="zeros"``
    zeroes everything)."""
    if init not in ("he-uniform", "zeros"):
        raise ValueError(f"unknown init scheme {init!r}")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shapes in param_shapes(config).items():
        if init == "zeros":
            params[name] = {k: np.zeros(s, dtype) for k, s in shapes.items()}
        else:
            params[name] = _init_layer(shapes, rng, dtype)
    net = Network(config, params, dtype)
    log.info("built %s network with %d parameters", config.preset, net.param_count)
    return net


def replace_head(network: Network, new_classes: int, seed: int = 0) -> Network:
    """New network whose output layer has ``new_classes`` units, freshly
    initialised; every other parameter is copied unchanged."""
    head = network.config.layers[-1]
    if head.kind != "output":
        raise ConfigError("network has no output layer to replace")
    layers = network.config.layers[:-1] + (replace(head, size=new_classes),)
    config = replace(network.config, layers=layers)
    new = network.copy()
    new.config = config
    rng = np.random.default_rng(seed)
    new.params[head.name] = _init_layer(param_shapes(config)[head.name], rng, network.dtype)
    return new


@dataclass
class ActivationTrace:
    """Forward record: requested activations keyed by layer name (plus
    ``"logits"``) and the per-layer caches backward passes need."""

    activations: dict[str, np.ndarray]
    caches: list = field(default_factory=list, repr=False)


def forward(
    network: Network,
    batch: np.ndarray,
    capture: Iterable[str] = (),
    training: bool = False,
    rng: np.random.Generator | None = None,
):
    """Run ``batch`` (N x C x H x W) through the network.

    Returns ``(logits, trace)``; logits are pre-softmax. Dropout is active
    only when ``training`` is true.
    """
    cfg = network.config
    capture = set(capture)
    unknown = capture - set(cfg.layer_names())
    if unknown:
        raise KeyError(f"unknown capture layer(s): {', '.join(sorted(unknown))}")
    if batch.ndim != 4 or tuple(batch.shape[1:]) != tuple(cfg.input_shape):
        raise T.ShapeError(f"batch shape {batch.shape} does not match input shape {cfg.input_shape}")
    if training and rng is None:
        rng = np.random.default_rng()

    x = batch.astype(network.dtype, copy=False)
    acts: dict[str, np.ndarray] = {}
    caches = []
    for layer in cfg.layers:
        k = layer.kind
        cache = x
        if k == "conv":
            p = network.params[layer.name]
            x = T.conv2d_forward(x, p["weight"], p["bias"])
        elif k == "relu":
            x = T.relu(x)
        elif k == "maxpool":
            x, argmax = T.maxpool2_forward(x)
            cache = argmax
        elif k == "flatten":
            cache = x.shape
            x = x.reshape(x.shape[0], -1)
        elif k in ("dense", "output"):
            p = network.params[layer.name]
            x = T.dense_forward(x, p["weight"], p["bias"])
        elif k == "dropout":
            x, cache = T.dropout(x, layer.rate, rng, training)
        caches.append(cache)
        if layer.name in capture:
            acts[layer.name] = x
    acts["logits"] = x
    return x, ActivationTrace(acts, caches)


def _backward(network: Network, trace: ActivationTrace, grad: np.ndarray, stop_after: str | None = None,
              want_params: bool = True):
    """Backpropagate ``grad`` (w.r.t. the logits). With ``stop_after`` set,
    returns the gradient w.r.t. that layer's output; otherwise returns the
    parameter gradients keyed like ``network.params``."""
    grads: dict[str, dict[str, np.ndarray]] = {}
    for layer, cache in zip(reversed(network.config.layers), reversed(trace.caches)):
        if layer.name == stop_after:
            return grad
        k = layer.kind
        if k == "conv":
            w = network.params[layer.name]["weight"]
            if want_params:
                grad, gw, gb = T.conv2d_backward(cache, w, grad)
                grads[layer.name] = {"weight": gw, "bias": gb}
            else:
                grad = T.conv2d_backward(cache, w, grad)[0]
        elif k == "relu":
            grad = T.relu_backward(cache, grad)
        elif k == "maxpool":
            grad = T.maxpool2_backward(grad, cache)
        elif k == "flatten":
            grad = grad.reshape(cache)
        elif k in ("dense", "output"):
            w = network.params[layer.name]["weight"]
            if want_params:
                grad, gw, gb = T.dense_backward(cache, w, grad)
                grads[layer.name] = {"weight": gw, "bias": gb}
            else:
                grad = grad @ w.T
        elif k == "dropout":
            grad = T.dropout_backward(grad, cache)
    if stop_after is not None:
        raise KeyError(f"layer {stop_after!r} not found")
    return grads


def backward_class_to_layer(network: Network, trace: ActivationTrace, class_index: int, layer: str) -> np.ndarray:
    """Gradient of the pre-softmax logit ``class_index`` w.r.t. the output of
    ``layer``, per sample; same shape as the captured activation."""
    if layer not in trace.activations:
        raise KeyError(f"layer {layer!r} was not captured in this trace")
    logits = trace.activations["logits"]
    if not 0 <= class_index < logits.shape[1]:
        raise IndexError(f"class index {class_index} out of range for {logits.shape[1]} classes")
    seed = np.zeros_like(logits)
    seed[:, class_index] = 1
    return _backward(network, trace, seed, stop_after=layer, want_params=False)


def loss_and_grads(network: Network, batch, labels, training=False, rng=None):
    logits, trace = forward(network, batch, training=training, rng=rng)
    probs = T.softmax(logits)
    loss, grad_logits = T.cross_entropy(probs, T.onehot(labels, logits.shape[1], logits.dtype))
    return loss, _backward(network, trace, grad_logits), probs


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    epochs: int = 1
    seed: int = 0
    dropout_active: bool = True
    freeze_conv: bool = False

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class TrainReport:
    seed: int
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)


def fine_tune(network: Network, images: np.ndarray, labels: Sequence[int], config: TrainConfig,
              progress=None) -> TrainReport:
    """Mini-batch SGD on cross-entropy, updating the network in place.

    Each epoch visits the training set in a seeded random order. The report
    holds the mean batch loss and the eval-mode training accuracy per epoch.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        raise ValueError("training set is empty")
    if images.shape[0] != n:
        raise ValueError(f"{images.shape[0]} images but {n} labels")
    if labels.min() < 0 or labels.max() >= network.config.num_classes:
        raise ValueError("labels must be valid class indices")
    if config.batch_size > n:
        raise ValueError(f"batch_size {config.batch_size} exceeds training set size {n}")

    rng = np.random.default_rng(config.seed)
    frozen = {l.name for l in network.config.layers if l.kind == "conv"} if config.freeze_conv else set()
    report = TrainReport(seed=config.seed)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads, _ = loss_and_grads(
                network, images[idx], labels[idx], training=config.dropout_active, rng=rng
            )
            losses.append(loss)
            pairs = [
                T.GradientPair(network.params[name][k], g[k])
                for name, g in grads.items() if name not in frozen
                for k in ("weight", "bias")
            ]
            T.sgd_step(pairs, config.learning_rate)
        acc = float(np.mean(predict(network, images).argmax(axis=1) == labels))
        report.losses.append(float(np.mean(losses)))
        report.accuracies.append(acc)
        log.info("epoch %d: loss %.4f train acc %.3f", epoch + 1, report.losses[-1], acc)
        if progress is not None:
            progress(epoch, report)
    return report


def predict(network: Network, images: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Class probabilities (eval mode). Accepts one C x H x W image or a batch."""
    single = images.ndim == 3
    batch = images[None] if single else images
    out = [T.softmax(forward(network, batch[i:i + chunk])[0].astype(np.float64))
           for i in range(0, len(batch), chunk)]
    probs = np.concatenate(out) if out else np.zeros((0, network.config.num_classes))
    return probs[0] if single else probs
