"""Desk-scale classifiers f(w; x) and their loss/prediction plumbing.

Two architectures: an MLP (the 2-D / flattened-image workhorse) and a small
CNN (conv blocks with 3x3 kernels, stride 1, padding 1, 2x2 max-pool, then
a dense head). Weights are He-initialized normals, biases zero, everything
reproducible from (descriptor, seed).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .seeding import derive_rng
from .tensor import Tensor, TensorError

CNN_KERNEL = 3
CNN_POOL = 2


@dataclass
class Batch:
    """Inputs plus one-hot labels; value_range marks clippable (image) data."""

    inputs: Tensor
    labels: Tensor
    value_range: tuple[float, float] | None = None

    def __post_init__(self):
        if not isinstance(self.inputs, Tensor):
            self.inputs = Tensor(self.inputs)
        if not isinstance(self.labels, Tensor):
            self.labels = Tensor(self.labels)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise TensorError(
                f"batch size mismatch: {self.inputs.shape[0]} inputs, "
                f"{self.labels.shape[0]} labels"
            )
        tc._validate_one_hot(self.labels.data, self.labels.shape[0])

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    def with_inputs(self, new_inputs: np.ndarray) -> "Batch":
        return Batch(Tensor(new_inputs), self.labels, self.value_range)


class ModelParams:
    """Ordered named weight tensors plus the architecture descriptor.

    Weight tensors carry requires_grad=True. Training mutates a private
    ``clone()``; evaluation treats an instance as read-only.
    """

    def __init__(self, descriptor: dict, weights: list[tuple[str, Tensor]]):
        self.descriptor = descriptor
        self.weights: dict[str, Tensor] = {}
        for name, t in weights:
            t.requires_grad = True
            self.weights[name] = t
        expected = expected_shapes(descriptor)
        got = {name: t.shape for name, t in self.weights.items()}
        if got != expected:
            raise TensorError(f"weight shapes {got} inconsistent with descriptor {expected}")

    @property
    def names(self) -> list[str]:
        return list(self.weights)

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self.weights.values())

    def clone(self) -> "ModelParams":
        return ModelParams(self.descriptor, [(n, t.copy()) for n, t in self.weights.items()])

    def __repr__(self) -> str:
        return f"ModelParams({self.descriptor}, n_params={self.n_params})"


def _cnn_dims(descriptor: dict) -> tuple[list[int], int]:
    """Per-block channel list and flattened feature size of the conv stack."""
    c, h, w = descriptor["in_shape"]
    channels = list(descriptor["channels"])
    for _ in channels:
        h, w = h // CNN_POOL, w // CNN_POOL
        if h < 1 or w < 1:
            raise TensorError(f"input {descriptor['in_shape']} too small for {len(channels)} pool stages")
    return channels, channels[-1] * h * w


def expected_shapes(descriptor: dict) -> dict[str, tuple[int, ...]]:
    kind = descriptor["kind"]
    shapes: dict[str, tuple[int, ...]] = {}
    if kind == "mlp":
        widths = descriptor["widths"]
        for i in range(len(widths) - 1):
            shapes[f"w{i}"] = (widths[i], widths[i + 1])
            shapes[f"b{i}"] = (widths[i + 1],)
    elif kind == "cnn":
        channels, flat = _cnn_dims(descriptor)
        prev = descriptor["in_shape"][0]
        for i, ch in enumerate(channels):
            shapes[f"conv{i}"] = (ch, prev, CNN_KERNEL, CNN_KERNEL)
            shapes[f"cb{i}"] = (ch,)
            prev = ch
        widths = [flat] + list(descriptor["fc_widths"])
        for i in range(len(widths) - 1):
            shapes[f"fc{i}"] = (widths[i], widths[i + 1])
            shapes[f"fb{i}"] = (widths[i + 1],)
    else:
        raise TensorError(f"unknown model kind {kind!r}")
    return shapes


def param_count(descriptor: dict) -> int:
    return sum(int(np.prod(s)) for s in expected_shapes(descriptor).values())


def _he_init(descriptor: dict, seed: int) -> list[tuple[str, Tensor]]:
    rng = derive_rng(seed, "model-init")
    out = []
    for name, shape in expected_shapes(descriptor).items():
        if name.startswith(("b", "cb", "fb")):
            out.append((name, Tensor(np.zeros(shape))))
        else:
            fan_in = int(np.prod(shape[:-1])) if len(shape) == 2 else int(np.prod(shape[1:]))
            std = math.sqrt(2.0 / fan_in)
            out.append((name, Tensor(std * rng.standard_normal(shape))))
    return out


def build_mlp(layer_widths, seed: int) -> ModelParams:
    widths = [int(w) for w in layer_widths]
    if len(widths) < 2:
        raise TensorError("an MLP needs at least input and output widths")
    if any(w < 1 for w in widths):
        raise TensorError("layer widths must be positive")
    descriptor = {"kind": "mlp", "widths": widths}
    return ModelParams(descriptor, _he_init(descriptor, seed))


def build_small_cnn(channels, fc_widths, seed: int, in_shape=(1, 28, 28)) -> ModelParams:
    channels = [int(c) for c in channels]
    fc_widths = [int(w) for w in fc_widths]
    if not channels or not fc_widths:
        raise TensorError("need at least one conv block and one dense layer")
    if any(c < 1 for c in channels) or any(w < 1 for w in fc_widths):
        raise TensorError("channel counts and widths must be positive")
    descriptor = {
        "kind": "cnn",
        "in_shape": tuple(int(s) for s in in_shape),
        "channels": channels,
        "fc_widths": fc_widths,
    }
    return ModelParams(descriptor, _he_init(descriptor, seed))


def build_model(descriptor: dict, seed: int) -> ModelParams:
    if descriptor["kind"] == "mlp":
        return build_mlp(descriptor["widths"], seed)
    return build_small_cnn(
        descriptor["channels"],
        descriptor["fc_widths"],
        seed,
        in_shape=descriptor.get("in_shape", (1, 28, 28)),
    )


def forward_logits(params: ModelParams, inputs: Tensor) -> Tensor:
    """Logits for a batch; flattens image batches automatically for MLPs."""
    if not isinstance(inputs, Tensor):
        inputs = Tensor(inputs)
    d = params.descriptor
    w = params.weights
    if d["kind"] == "mlp":
        widths = d["widths"]
        n = inputs.shape[0]
        if inputs.data.ndim != 2:
            if int(np.prod(inputs.shape[1:])) != widths[0]:
                raise TensorError(f"input shape {inputs.shape} does not flatten to {widths[0]}")
            inputs = tc.reshape(inputs, (n, widths[0]))
        elif inputs.shape[1] != widths[0]:
            raise TensorError(f"input width {inputs.shape[1]} != model width {widths[0]}")
        h = inputs
        last = len(widths) - 2
        for i in range(last + 1):
            h = tc.add(tc.matmul(h, w[f"w{i}"]), w[f"b{i}"])
            if i < last:
                h = tc.relu(h)
        return h

    if inputs.data.ndim != 4 or inputs.shape[1:] != d["in_shape"]:
        raise TensorError(f"input shape {inputs.shape} does not match {d['in_shape']}")
    h = inputs
    for i in range(len(d["channels"])):
        h = tc.conv2d(h, w[f"conv{i}"], stride=1, padding=CNN_KERNEL // 2)
        h = tc.add(h, w[f"cb{i}"])
        h = tc.relu(h)
        h = tc.max_pool2d(h, CNN_POOL)
    _, flat = _cnn_dims(d)
    h = tc.reshape(h, (h.shape[0], flat))
    last = len(d["fc_widths"]) - 1
    for i in range(last + 1):
        h = tc.add(tc.matmul(h, w[f"fc{i}"]), w[f"fb{i}"])
        if i < last:
            h = tc.relu(h)
    return h


def loss_and_grads(
    params: ModelParams,
    batch: Batch,
    wrt: str = "weights",
) -> tuple[float, dict[str, np.ndarray] | None, np.ndarray | None]:
    """Mean cross-entropy plus requested gradients.

    Weight gradients are of the mean loss. Input gradients are per sample:
    row i is the gradient of sample i's own (unaveraged) loss, i.e. n times
    the mean-loss gradient, since losses do not couple across rows.
    """
    if wrt not in ("weights", "inputs", "both"):
        raise ValueError(f"wrt must be 'weights', 'inputs' or 'both', not {wrt!r}")
    want_w = wrt in ("weights", "both")
    want_x = wrt in ("inputs", "both")
    x = Tensor(batch.inputs.data, requires_grad=want_x)
    prev_flags = {name: t.requires_grad for name, t in params.weights.items()}
    for t in params.weights.values():
        t.requires_grad = want_w
    try:
        with tc.Tape() as tape:
            logits = forward_logits(params, x)
            loss = tc.softmax_cross_entropy(logits, batch.labels)
        grads = tc.backward(tape, loss)
    finally:
        for name, t in params.weights.items():
            t.requires_grad = prev_flags[name]
    weight_grads = None
    if want_w:
        zero = {name: np.zeros(t.shape) for name, t in params.weights.items()}
        weight_grads = {
            name: grads[t].data if t in grads else zero[name]
            for name, t in params.weights.items()
        }
    input_grads = None
    if want_x:
        input_grads = batch.n * grads[x].data if x in grads else np.zeros(x.shape)
    return loss.item(), weight_grads, input_grads


def batch_loss(params: ModelParams, batch: Batch) -> float:
    """Mean cross-entropy, no gradients, no tape."""
    logits = forward_logits(params, Tensor(batch.inputs.data))
    return tc.softmax_cross_entropy(logits, batch.labels).item()


def per_sample_losses(params: ModelParams, batch: Batch) -> np.ndarray:
    """Each sample's own cross-entropy, shape (n,)."""
    logits = forward_logits(params, Tensor(batch.inputs.data)).data
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_softmax = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return -(batch.labels.data * log_softmax).sum(axis=1)


def predict(params: ModelParams, inputs) -> np.ndarray:
    """Argmax class indices; ties break to the lowest class index."""
    if not isinstance(inputs, Tensor):
        inputs = Tensor(inputs)
    return forward_logits(params, inputs).data.argmax(axis=1)


def accuracy(params: ModelParams, inputs, labels) -> float:
    """Fraction of argmax predictions matching one-hot ``labels``."""
    labels = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    pred = predict(params, inputs)
    return float(np.mean(pred == labels.argmax(axis=1)))
