"""Model builders: target classifiers and the gradient-predicting autoencoder.

Architectures are declared as ordered layer descriptors, built into named
parameter sets, and interpreted at forward time. The autoencoder mirrors its
encoder's spatial sizes while decoding, so one weight set serves any input
size its stride stack can round-trip.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gpat import tensor as T
from gpat.tensor import ParamSet, Tensor

__all__ = [
    "LayerSpec",
    "ArchitectureSpec",
    "ClassifierModel",
    "AttackerModel",
    "TrainReport",
    "build_meta_attacker",
    "build_mnist_classifier",
    "build_toy_classifier",
    "train_classifier",
    "TOY_CLASSIFIER_IDS",
]

_ACTIVATIONS = ("", "relu", "tanh")


@dataclass(frozen=True)
class LayerSpec:
    """One layer: kind is conv | convt | maxpool | fc."""

    kind: str
    features: int = 0      # output channels (conv/convt) or units (fc)
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    activation: str = ""
    batchnorm: bool = False
    window: int = 0        # maxpool only

    def __post_init__(self):
        if self.kind not in ("conv", "convt", "maxpool", "fc"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class ArchitectureSpec:
    """Ordered layer stack plus enough context to rebuild parameter shapes.

    ``input_shape`` is (C, H, W) for classifiers and (C,) for the attacker,
    which is size-agnostic. Round-trips losslessly through JSON.
    """

    kind: str                       # "classifier" | "attacker"
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    classes: int = 0

    def __post_init__(self):
        if self.kind not in ("classifier", "attacker"):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))

    def to_json(self) -> str:
        payload = {
            "kind": self.kind,
            "input_shape": list(self.input_shape),
            "classes": self.classes,
            "layers": [dataclasses.asdict(layer) for layer in self.layers],
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ArchitectureSpec":
        payload = json.loads(text)
        layers = tuple(LayerSpec(**entry) for entry in payload["layers"])
        return cls(
            kind=payload["kind"],
            input_shape=tuple(payload["input_shape"]),
            layers=layers,
            classes=int(payload["classes"]),
        )

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter shapes implied by the stack, validating chain compatibility."""
        shapes: dict[str, tuple[int, ...]] = {}
        if self.kind == "classifier":
            chan, h, w = self.input_shape
        else:
            (chan,) = self.input_shape
            h = w = None  # attacker: spatial size resolved per call
        flat: int | None = None
        for i, layer in enumerate(self.layers):
            name = f"layer{i}"
            if layer.kind == "conv":
                if flat is not None:
                    raise ValueError(f"{name}: conv after flatten is unsupported")
                shapes[f"{name}.weight"] = (layer.features, chan, layer.kernel, layer.kernel)
                shapes[f"{name}.bias"] = (layer.features,)
                chan = layer.features
                if h is not None:
                    h = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
                    w = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
                    if h < 1 or w < 1:
                        raise ValueError(f"{name}: spatial size collapsed to {h}x{w}")
            elif layer.kind == "convt":
                if flat is not None:
                    raise ValueError(f"{name}: convt after flatten is unsupported")
                shapes[f"{name}.weight"] = (chan, layer.features, layer.kernel, layer.kernel)
                shapes[f"{name}.bias"] = (layer.features,)
                chan = layer.features
                if h is not None:
                    h = (h - 1) * layer.stride - 2 * layer.padding + layer.kernel
                    w = (w - 1) * layer.stride - 2 * layer.padding + layer.kernel
            elif layer.kind == "maxpool":
                if h is not None:
                    if h % layer.window or w % layer.window:
                        raise ValueError(
                            f"{name}: {h}x{w} not divisible by pool window {layer.window}"
                        )
                    h, w = h // layer.window, w // layer.window
            elif layer.kind == "fc":
                if flat is None:
                    if h is None:
                        raise ValueError(f"{name}: fc layer in a size-agnostic stack")
                    flat = chan * h * w
                shapes[f"{name}.weight"] = (flat, layer.features)
                shapes[f"{name}.bias"] = (layer.features,)
                flat = layer.features
            if layer.batchnorm:
                if self.kind == "classifier":
                    raise ValueError(f"{name}: batchnorm unsupported in classifier stacks")
                shapes[f"{name}.gamma"] = (layer.features,)
                shapes[f"{name}.beta"] = (layer.features,)
        return shapes


def _init_params(spec: ArchitectureSpec, rng: np.random.Generator,
                 weight_std: float | None) -> tuple[ParamSet, ParamSet]:
    """Build (params, buffers). ``weight_std`` fixed for the attacker,
    fan-in scaled when None (classifiers)."""
    params = ParamSet()
    buffers = ParamSet()
    for name, shape in spec.param_shapes().items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "weight":
            fan_in = int(np.prod(shape[:-1])) if len(shape) == 2 else int(np.prod(shape[1:]))
            std = weight_std if weight_std is not None else (1.0 / fan_in) ** 0.5
            data = rng.standard_normal(shape) * std
            params.add(name, Tensor(data, requires_grad=True))
        elif leaf == "bias":
            params.add(name, Tensor(np.zeros(shape), requires_grad=True))
        elif leaf == "gamma":
            params.add(name, Tensor(np.ones(shape), requires_grad=True))
            layer = name.rsplit(".", 1)[0]
            buffers.add(f"{layer}.running_mean", Tensor(np.zeros(shape)))
            buffers.add(f"{layer}.running_var", Tensor(np.ones(shape)))
        elif leaf == "beta":
            params.add(name, Tensor(np.zeros(shape), requires_grad=True))
    return params, buffers


def _check_shapes(spec: ArchitectureSpec, params: ParamSet, buffers: ParamSet | None) -> None:
    expected = spec.param_shapes()
    got = dict(params.shapes())
    if buffers is not None:
        for name, shape in buffers.shapes().items():
            got[name] = shape
            layer, leaf = name.rsplit(".", 1)
            if leaf in ("running_mean", "running_var"):
                expected[name] = expected.get(f"{layer}.gamma", ())
    for name, shape in expected.items():
        if name not in got:
            raise ValueError(f"parameter container missing entry {name!r}")
        if tuple(got[name]) != tuple(shape):
            raise ValueError(
                f"parameter {name!r} has shape {got[name]}, architecture expects {shape}"
            )
    extra = set(got) - set(expected)
    if extra:
        raise ValueError(f"parameter container has unknown entries {sorted(extra)}")


def _activate(x: Tensor, activation: str) -> Tensor:
    if activation == "relu":
        return x.relu()
    if activation == "tanh":
        return x.tanh()
    return x


class ClassifierModel:
    """A target model: layer stack, parameters, and a softmax head."""

    def __init__(self, spec: ArchitectureSpec, params: ParamSet, model_id: int | None = None):
        if spec.kind != "classifier":
            raise ValueError("ClassifierModel needs a classifier architecture")
        _check_shapes(spec, params, None)
        self.spec = spec
        self.params = params
        self.model_id = model_id

    @property
    def classes(self) -> int:
        return self.spec.classes

    def logits(self, x) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        single = h.ndim == len(self.spec.input_shape)
        if single:
            h = h.reshape(1, *h.shape)
        for i, layer in enumerate(self.spec.layers):
            if layer.kind == "conv":
                h = T.conv2d(h, self.params[f"layer{i}.weight"], self.params[f"layer{i}.bias"],
                             stride=layer.stride, padding=layer.padding)
            elif layer.kind == "maxpool":
                h = T.maxpool2d(h, layer.window)
            elif layer.kind == "fc":
                if h.ndim > 2:
                    h = h.reshape(h.shape[0], int(np.prod(h.shape[1:])))
                h = T.fully_connected(h, self.params[f"layer{i}.weight"],
                                      self.params[f"layer{i}.bias"])
            else:
                raise ValueError(f"classifier cannot interpret layer kind {layer.kind!r}")
            h = _activate(h, layer.activation)
        return h.reshape(h.shape[1]) if single else h

    def probs(self, x) -> Tensor:
        return T.softmax(self.logits(x), axis=-1)

    def predict_probs(self, x: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self.probs(x).data

    def accuracy(self, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
        if len(images) == 0:
            raise ValueError("accuracy() needs at least one sample")
        hits = 0
        with T.no_grad():
            for start in range(0, len(images), batch_size):
                probs = self.probs(images[start:start + batch_size]).data
                hits += int((probs.argmax(axis=1) == labels[start:start + batch_size]).sum())
        return hits / len(images)

    def save(self, path) -> None:
        path = Path(path)
        self.params.save(path)
        sidecar = {"architecture": json.loads(self.spec.to_json()), "model_id": self.model_id}
        Path(str(path) + ".json").write_text(json.dumps(sidecar, sort_keys=True))

    @classmethod
    def load(cls, path) -> "ClassifierModel":
        path = Path(path)
        sidecar = json.loads(Path(str(path) + ".json").read_text())
        spec = ArchitectureSpec.from_json(json.dumps(sidecar["architecture"]))
        params = ParamSet.load(path)
        for t in params.tensors():
            t.requires_grad = True
        return cls(spec, params, model_id=sidecar.get("model_id"))


class AttackerModel:
    """Autoencoder that maps an image to a predicted input-gradient map.

    The decoder targets the spatial sizes its encoder saw, choosing per-call
    output padding, so the output shape always equals the input shape.
    Batchnorm buffers live beside the trainable parameters and are updated
    only in train mode.
    """

    def __init__(self, spec: ArchitectureSpec, params: ParamSet, buffers: ParamSet):
        if spec.kind != "attacker":
            raise ValueError("AttackerModel needs an attacker architecture")
        _check_shapes(spec, params, buffers)
        self.spec = spec
        self.params = params
        self.buffers = buffers

    @property
    def input_channels(self) -> int:
        return self.spec.input_shape[0]

    def forward(self, x, train: bool = False) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        single = h.ndim == 3
        if single:
            h = h.reshape(1, *h.shape)
        if h.shape[1] != self.input_channels:
            raise ValueError(
                f"attacker expects {self.input_channels} input channels, got {h.shape[1]}"
            )
        sizes: list[tuple[int, int]] = []
        for i, layer in enumerate(self.spec.layers):
            weight = self.params[f"layer{i}.weight"]
            bias = self.params[f"layer{i}.bias"]
            if layer.kind == "conv":
                sizes.append((h.shape[2], h.shape[3]))
                h = T.conv2d(h, weight, bias, stride=layer.stride, padding=layer.padding)
            elif layer.kind == "convt":
                th, tw = sizes.pop()
                base_h = (h.shape[2] - 1) * layer.stride - 2 * layer.padding + layer.kernel
                base_w = (h.shape[3] - 1) * layer.stride - 2 * layer.padding + layer.kernel
                op = (th - base_h, tw - base_w)
                if not (0 <= op[0] < layer.stride and 0 <= op[1] < layer.stride):
                    raise ValueError(
                        f"layer{i}: cannot mirror encoder size {th}x{tw} from "
                        f"{h.shape[2]}x{h.shape[3]} (stride {layer.stride})"
                    )
                h = T.conv_transpose2d(h, weight, bias, stride=layer.stride,
                                       padding=layer.padding, output_padding=op)
            else:
                raise ValueError(f"attacker cannot interpret layer kind {layer.kind!r}")
            h = _activate(h, layer.activation)
            if layer.batchnorm:
                h = T.batchnorm2d(
                    h,
                    self.params[f"layer{i}.gamma"],
                    self.params[f"layer{i}.beta"],
                    self.buffers[f"layer{i}.running_mean"],
                    self.buffers[f"layer{i}.running_var"],
                    train=train,
                )
        return h.reshape(h.shape[1:]) if single else h

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Gradient-map prediction for one image, frozen statistics, no graph."""
        with T.no_grad():
            return self.forward(x, train=False).data

    def copy(self) -> "AttackerModel":
        return AttackerModel(self.spec, self.params.copy(), self.buffers.copy())

    def save(self, path) -> None:
        path = Path(path)
        merged = ParamSet(list(self.params.items()) + list(self.buffers.items()))
        merged.save(path)
        sidecar = {"architecture": json.loads(self.spec.to_json())}
        Path(str(path) + ".json").write_text(json.dumps(sidecar, sort_keys=True))

    @classmethod
    def load(cls, path) -> "AttackerModel":
        path = Path(path)
        sidecar = json.loads(Path(str(path) + ".json").read_text())
        spec = ArchitectureSpec.from_json(json.dumps(sidecar["architecture"]))
        merged = ParamSet.load(path)
        params, buffers = ParamSet(), ParamSet()
        for name, t in merged.items():
            if name.rsplit(".", 1)[1].startswith("running_"):
                buffers.add(name, t)
            else:
                t.requires_grad = True
                params.add(name, t)
        return cls(spec, params, buffers)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

_ATTACKER_STACKS = {
    # (encoder channels, decoder channels); kernel/stride follow the fixed
    # pattern k3 s1 for the outermost layers and k4 s2 for the inner ones.
    "small": ((16, 32, 64, 64), (64, 32, 16, 8)),
    "large": ((32, 64, 128, 256), (256, 128, 64, 32)),
}


def build_meta_attacker(input_channels: int, variant: str = "small",
                        seed: int = 0) -> AttackerModel:
    """Symmetric conv/deconv autoencoder emitting an input-shaped gradient map.

    The stack ends with a linear 1x1 projection back to ``input_channels``,
    reconciling the final feature width with the gradient map's channel
    count. Weights are Gaussian (std 0.02), biases zero.
    """
    if input_channels not in (1, 3):
        raise ValueError(f"unsupported input channel count {input_channels}")
    if variant not in _ATTACKER_STACKS:
        raise ValueError(f"unknown attacker variant {variant!r}")
    enc, dec = _ATTACKER_STACKS[variant]
    layers: list[LayerSpec] = []
    for j, ch in enumerate(enc):
        k = 3 if j == 0 else 4
        s = 1 if j == 0 else 2
        layers.append(LayerSpec("conv", features=ch, kernel=k, stride=s, padding=k // 2,
                                activation="relu", batchnorm=True))
    for j, ch in enumerate(dec):
        k = 3 if j == len(dec) - 1 else 4
        s = 1 if j == len(dec) - 1 else 2
        layers.append(LayerSpec("convt", features=ch, kernel=k, stride=s, padding=k // 2,
                                activation="relu", batchnorm=True))
    layers.append(LayerSpec("conv", features=input_channels, kernel=1, stride=1, padding=0))
    spec = ArchitectureSpec("attacker", (input_channels,), tuple(layers))
    params, buffers = _init_params(spec, np.random.default_rng(seed), weight_std=0.02)
    return AttackerModel(spec, params, buffers)


def build_mnist_classifier(seed: int = 0) -> ClassifierModel:
    """Two conv/tanh blocks with max pooling, then FC(128) and a 10-way head."""
    layers = (
        LayerSpec("conv", features=128, kernel=3, stride=1, padding=1, activation="tanh"),
        LayerSpec("maxpool", window=2),
        LayerSpec("conv", features=64, kernel=3, stride=1, padding=1, activation="tanh"),
        LayerSpec("maxpool", window=2),
        LayerSpec("fc", features=128, activation="relu"),
        LayerSpec("fc", features=10),
    )
    spec = ArchitectureSpec("classifier", (1, 28, 28), layers, classes=10)
    params, _ = _init_params(spec, np.random.default_rng(seed), weight_std=None)
    return ClassifierModel(spec, params)


def _toy_layers(model_id: int, classes: int) -> tuple[LayerSpec, ...]:
    if model_id == 0:
        return (
            LayerSpec("conv", features=8, kernel=3, stride=1, padding=1, activation="relu"),
            LayerSpec("maxpool", window=2),
            LayerSpec("fc", features=32, activation="relu"),
            LayerSpec("fc", features=classes),
        )
    if model_id == 1:
        return (
            LayerSpec("conv", features=6, kernel=5, stride=1, padding=2, activation="tanh"),
            LayerSpec("maxpool", window=2),
            LayerSpec("conv", features=12, kernel=3, stride=1, padding=1, activation="tanh"),
            LayerSpec("maxpool", window=2),
            LayerSpec("fc", features=classes),
        )
    if model_id == 2:
        return (
            LayerSpec("fc", features=64, activation="relu"),
            LayerSpec("fc", features=32, activation="relu"),
            LayerSpec("fc", features=classes),
        )
    if model_id == 3:
        return (
            LayerSpec("conv", features=4, kernel=3, stride=2, padding=1, activation="relu"),
            LayerSpec("conv", features=8, kernel=3, stride=2, padding=1, activation="relu"),
            LayerSpec("fc", features=24, activation="tanh"),
            LayerSpec("fc", features=classes),
        )
    if model_id == 4:
        return (
            LayerSpec("conv", features=10, kernel=3, stride=1, padding=1, activation="tanh"),
            LayerSpec("maxpool", window=2),
            LayerSpec("conv", features=10, kernel=3, stride=1, padding=1, activation="relu"),
            LayerSpec("maxpool", window=2),
            LayerSpec("fc", features=48, activation="relu"),
            LayerSpec("fc", features=classes),
        )
    if model_id == 5:
        return (
            LayerSpec("fc", features=96, activation="tanh"),
            LayerSpec("fc", features=classes),
        )
    raise ValueError(f"unknown toy classifier id {model_id}")


TOY_CLASSIFIER_IDS = tuple(range(6))


def build_toy_classifier(model_id: int, classes: int,
                         input_shape: tuple[int, int, int] = (1, 16, 16),
                         seed: int = 0) -> ClassifierModel:
    """Small stand-in classifiers with pairwise different stacks.

    Distinct architectures make the gradient-map tasks genuinely differ
    across source models; same id and seed rebuild identical parameters.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    layers = _toy_layers(int(model_id), classes)
    spec = ArchitectureSpec("classifier", tuple(input_shape), layers, classes=classes)
    rng = np.random.default_rng(np.random.SeedSequence((seed, int(model_id))))
    params, _ = _init_params(spec, rng, weight_std=None)
    return ClassifierModel(spec, params, model_id=int(model_id))


# ---------------------------------------------------------------------------
# classifier training
# ---------------------------------------------------------------------------

@dataclass
class TrainReport:
    train_accuracy: float
    test_accuracy: float | None
    epoch_losses: list[float] = field(default_factory=list)


def train_classifier(model: ClassifierModel, dataset, epochs: int, lr: float,
                     seed: int = 0, batch_size: int = 32) -> TrainReport:
    """Plain mini-batch SGD with cross-entropy; mutates the model in place.

    ``dataset`` provides train_images/train_labels (and optionally test_*).
    Deterministic under the seed; lr = 0 leaves parameters untouched.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    images = np.asarray(dataset.train_images, dtype=np.float64)
    labels = np.asarray(dataset.train_labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("train_classifier needs a nonempty dataset")
    if len(images) != len(labels):
        raise ValueError("images and labels disagree in length")
    rng = np.random.default_rng(seed)
    classes = model.classes
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(images))
        batch_losses = []
        for start in range(0, len(order), batch_size):
            take = order[start:start + batch_size]
            xb, yb = images[take], labels[take]
            logits = model.logits(Tensor(xb))
            logp = T.log_softmax(logits, axis=-1)
            picked = logp.gather(np.arange(len(take)) * classes + yb)
            nll = -picked.sum() * (1.0 / len(take))
            model.params.zero_grad()
            nll.backward()
            if lr > 0:
                for p in model.params.tensors():
                    p.data -= lr * p.grad
            batch_losses.append(nll.item())
        losses.append(float(np.mean(batch_losses)))
    train_acc = model.accuracy(images, labels)
    test_acc = None
    test_images = getattr(dataset, "test_images", None)
    if test_images is not None and len(test_images) > 0:
        test_acc = model.accuracy(np.asarray(test_images, dtype=np.float64),
                                  np.asarray(dataset.test_labels, dtype=np.int64))
    return TrainReport(train_accuracy=train_acc, test_accuracy=test_acc, epoch_losses=losses)
