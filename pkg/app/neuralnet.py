# app/neuralnet.py
"""
Feed-forward networks with exact reverse-mode gradients and Adam.

  - GeneratorNet:      latent (ℓ) → hidden (ReLU) → data (tanh)
  - DiscriminatorNet:  data (d) → shared trunk (LeakyReLU) → two heads:
                         real head  (1 unit, sigmoid)
                         class head (K units, softmax)

Every parameter tensor carries its own Adam moments inside NetworkParams, so
cloning an individual clones its optimizer state too and "mutation by
training" resumes where the parent stopped.

Weights are stored as (fan_in, fan_out); a batch is a (batch, features)
matrix and a layer computes ``act(x @ W + b)``.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterator, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from app.linalg import DTYPE, RngStream, as_matrix, matmul
from core.exceptions import ArgumentError, ResultsIOError, ShapeError, TrainingDivergenceError
from core.logging import get_logger

logger = get_logger(__name__)

CHECKPOINT_FORMAT = "coevo-sslgan/network"
CHECKPOINT_VERSION = 1


class Activation(str, Enum):
    LINEAR = "linear"
    RELU = "relu"
    LEAKY_RELU = "leaky_relu"
    TANH = "tanh"
    SIGMOID = "sigmoid"
    SOFTMAX = "softmax"


class AdamConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    learning_rate: float = Field(default=0.0003, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    epsilon: float = Field(default=1e-8, gt=0)


class ArchConfig(BaseModel):
    """Shapes shared by every individual of a run."""
    model_config = ConfigDict(frozen=True)

    latent_dim: int = Field(default=8, ge=1)
    hidden_units: int = Field(default=64, ge=1)
    data_dim: int = Field(default=2, ge=1)
    leaky_slope: float = Field(default=0.2, ge=0, lt=1)


# ─── Activations ──────────────────────────────────────────────────────────────

def _activate(z: np.ndarray, act: Activation, slope: float) -> np.ndarray:
    if act is Activation.LINEAR:
        return z
    if act is Activation.RELU:
        return np.maximum(z, 0.0)
    if act is Activation.LEAKY_RELU:
        return np.where(z > 0, z, slope * z)
    if act is Activation.TANH:
        return np.tanh(z)
    if act is Activation.SIGMOID:
        # two-branch form avoids exp overflow for large |z|
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    if act is Activation.SOFTMAX:
        shifted = z - z.max(axis=1, keepdims=True)
        ez = np.exp(shifted)
        return ez / ez.sum(axis=1, keepdims=True)
    raise ArgumentError(f"unknown activation {act!r}")


def _activate_backward(grad_a: np.ndarray, z: np.ndarray, a: np.ndarray,
                       act: Activation, slope: float) -> np.ndarray:
    """dL/dz from dL/da."""
    if act is Activation.LINEAR:
        return grad_a
    if act is Activation.RELU:
        return grad_a * (z > 0)
    if act is Activation.LEAKY_RELU:
        return grad_a * np.where(z > 0, 1.0, slope)
    if act is Activation.TANH:
        return grad_a * (1.0 - a * a)
    if act is Activation.SIGMOID:
        return grad_a * a * (1.0 - a)
    if act is Activation.SOFTMAX:
        inner = np.sum(grad_a * a, axis=1, keepdims=True)
        return a * (grad_a - inner)
    raise ArgumentError(f"unknown activation {act!r}")


# ─── Parameters ───────────────────────────────────────────────────────────────

@dataclass
class DenseLayer:
    weight: np.ndarray
    bias: np.ndarray
    activation: Activation
    m_weight: np.ndarray = field(default=None)  # type: ignore[assignment]
    v_weight: np.ndarray = field(default=None)  # type: ignore[assignment]
    m_bias: np.ndarray = field(default=None)    # type: ignore[assignment]
    v_bias: np.ndarray = field(default=None)    # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.weight = np.array(self.weight, dtype=DTYPE)
        self.bias = np.array(self.bias, dtype=DTYPE).reshape(-1)
        self.activation = Activation(self.activation)
        if self.weight.ndim != 2 or self.bias.shape[0] != self.weight.shape[1]:
            raise ShapeError("bias width must equal weight fan-out",
                             weight=self.weight.shape, bias=self.bias.shape)
        for name, like in (("m_weight", self.weight), ("v_weight", self.weight),
                           ("m_bias", self.bias), ("v_bias", self.bias)):
            moment = getattr(self, name)
            if moment is None:
                setattr(self, name, np.zeros_like(like))
            else:
                moment = np.array(moment, dtype=DTYPE).reshape(like.shape)
                setattr(self, name, moment)

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]

    def tensors(self) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """(parameter, first moment, second moment) triples."""
        yield self.weight, self.m_weight, self.v_weight
        yield self.bias, self.m_bias, self.v_bias


@dataclass
class LayerGrad:
    weight: np.ndarray
    bias: np.ndarray


@dataclass
class NetworkParams:
    """Weights, biases and Adam state of one individual."""

    layers: list[DenseLayer]
    step: int = 0
    leaky_slope: float = 0.2
    init_seed: int | None = None

    def clone(self) -> "NetworkParams":
        return copy.deepcopy(self)

    @property
    def num_parameters(self) -> int:
        return sum(layer.weight.size + layer.bias.size for layer in self.layers)

    def fingerprint(self) -> str:
        """Hash of all parameters and moments; changes iff any value changes."""
        h = hashlib.sha256()
        h.update(str(self.step).encode())
        for layer in self.layers:
            for tensor in (layer.weight, layer.bias, layer.m_weight,
                           layer.v_weight, layer.m_bias, layer.v_bias):
                h.update(np.ascontiguousarray(tensor).tobytes())
        return h.hexdigest()

    def adam_step(self, grads: list[LayerGrad], adam: AdamConfig) -> "NetworkParams":
        """One in-place Adam update; increments the step counter by one."""
        if len(grads) != len(self.layers):
            raise ShapeError("one gradient per layer expected",
                             layers=len(self.layers), grads=len(grads))
        self.step += 1
        t = self.step
        corr1 = 1.0 - adam.beta1 ** t
        corr2 = 1.0 - adam.beta2 ** t
        for layer, grad in zip(self.layers, grads):
            for (param, m, v), g in zip(layer.tensors(), (grad.weight, grad.bias)):
                m *= adam.beta1
                m += (1.0 - adam.beta1) * g
                v *= adam.beta2
                v += (1.0 - adam.beta2) * (g * g)
                param -= adam.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + adam.epsilon)
        return self


def _he_uniform(rng: RngStream, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, (fan_in, fan_out))


def _xavier_uniform(rng: RngStream, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out))


def init_layer(rng: RngStream | None, fan_in: int, fan_out: int, activation: Activation) -> DenseLayer:
    """He init for (Leaky)ReLU layers, Xavier/Glorot for the rest; zero bias. rng=None → all zeros."""
    if rng is None:
        weight = np.zeros((fan_in, fan_out), dtype=DTYPE)
    elif activation in (Activation.RELU, Activation.LEAKY_RELU):
        weight = _he_uniform(rng, fan_in, fan_out)
    else:
        weight = _xavier_uniform(rng, fan_in, fan_out)
    return DenseLayer(weight=weight, bias=np.zeros(fan_out, dtype=DTYPE), activation=activation)


# ─── Layer passes ─────────────────────────────────────────────────────────────

@dataclass
class LayerCache:
    x: np.ndarray
    z: np.ndarray
    a: np.ndarray


def _dense_forward(layer: DenseLayer, x: np.ndarray, slope: float) -> LayerCache:
    z = matmul(x, layer.weight) + layer.bias
    return LayerCache(x=x, z=z, a=_activate(z, layer.activation, slope))


def _dense_backward(layer: DenseLayer, cache: LayerCache, grad_a: np.ndarray,
                    slope: float) -> tuple[LayerGrad, np.ndarray]:
    grad_z = _activate_backward(grad_a, cache.z, cache.a, layer.activation, slope)
    grad = LayerGrad(weight=cache.x.T @ grad_z, bias=grad_z.sum(axis=0))
    return grad, grad_z @ layer.weight.T


def _check_grads(grads: list[LayerGrad]) -> None:
    for index, grad in enumerate(grads):
        if not (np.all(np.isfinite(grad.weight)) and np.all(np.isfinite(grad.bias))):
            raise TrainingDivergenceError("non-finite gradient", layer=index)


# ─── Networks ─────────────────────────────────────────────────────────────────

@dataclass
class GeneratorNet:
    params: NetworkParams

    kind: Literal["generator"] = "generator"

    @classmethod
    def initialize(cls, arch: ArchConfig, rng: RngStream | None) -> "GeneratorNet":
        """Random init from ``rng``; ``rng=None`` builds the all-zero network."""
        layers = [
            init_layer(rng, arch.latent_dim, arch.hidden_units, Activation.RELU),
            init_layer(rng, arch.hidden_units, arch.data_dim, Activation.TANH),
        ]
        seed = rng.seed if rng is not None else None
        return cls(NetworkParams(layers=layers, leaky_slope=arch.leaky_slope, init_seed=seed))

    @property
    def latent_dim(self) -> int:
        return self.params.layers[0].fan_in

    @property
    def output_dim(self) -> int:
        return self.params.layers[-1].fan_out

    def clone(self) -> "GeneratorNet":
        return GeneratorNet(self.params.clone())

    def forward(self, z: np.ndarray) -> tuple[np.ndarray, list[LayerCache]]:
        z = as_matrix(z, "latent batch")
        if z.shape[1] != self.latent_dim:
            raise ShapeError("latent width mismatch", expected=self.latent_dim, got=z.shape[1])
        caches: list[LayerCache] = []
        h = z
        for layer in self.params.layers:
            cache = _dense_forward(layer, h, self.params.leaky_slope)
            caches.append(cache)
            h = cache.a
        return h, caches

    def backward(self, caches: list[LayerCache], grad_out: np.ndarray) -> tuple[list[LayerGrad], np.ndarray]:
        grads: list[LayerGrad] = []
        grad = grad_out
        for layer, cache in zip(reversed(self.params.layers), reversed(caches)):
            layer_grad, grad = _dense_backward(layer, cache, grad, self.params.leaky_slope)
            grads.append(layer_grad)
        grads.reverse()
        return grads, grad


@dataclass
class DiscriminatorCache:
    trunk: LayerCache
    real: LayerCache
    cls: LayerCache


@dataclass
class DiscriminatorNet:
    """params.layers = [trunk, real_head, class_head]; both heads read the trunk features."""

    params: NetworkParams

    kind: Literal["discriminator"] = "discriminator"

    @classmethod
    def initialize(cls, arch: ArchConfig, num_classes: int, rng: RngStream | None) -> "DiscriminatorNet":
        if num_classes < 2:
            raise ArgumentError("a classifier needs at least two classes", num_classes=num_classes)
        layers = [
            init_layer(rng, arch.data_dim, arch.hidden_units, Activation.LEAKY_RELU),
            init_layer(rng, arch.hidden_units, 1, Activation.SIGMOID),
            init_layer(rng, arch.hidden_units, num_classes, Activation.SOFTMAX),
        ]
        seed = rng.seed if rng is not None else None
        return cls(NetworkParams(layers=layers, leaky_slope=arch.leaky_slope, init_seed=seed))

    @property
    def input_dim(self) -> int:
        return self.params.layers[0].fan_in

    @property
    def num_classes(self) -> int:
        return self.params.layers[2].fan_out

    def clone(self) -> "DiscriminatorNet":
        return DiscriminatorNet(self.params.clone())

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, DiscriminatorCache]:
        x = as_matrix(x, "sample batch")
        if x.shape[1] != self.input_dim:
            raise ShapeError("sample width mismatch", expected=self.input_dim, got=x.shape[1])
        trunk_layer, real_layer, class_layer = self.params.layers
        slope = self.params.leaky_slope
        trunk = _dense_forward(trunk_layer, x, slope)
        real = _dense_forward(real_layer, trunk.a, slope)
        cls_ = _dense_forward(class_layer, trunk.a, slope)
        return real.a[:, 0], cls_.a, DiscriminatorCache(trunk=trunk, real=real, cls=cls_)

    def backward(self, cache: DiscriminatorCache, grad_real: np.ndarray | None,
                 grad_class: np.ndarray | None) -> tuple[list[LayerGrad], np.ndarray]:
        """Gradients w.r.t. all layers and the input; a missing head gradient counts as zero."""
        trunk_layer, real_layer, class_layer = self.params.layers
        slope = self.params.leaky_slope
        batch = cache.trunk.x.shape[0]
        if grad_real is None:
            grad_real = np.zeros(batch, dtype=DTYPE)
        if grad_class is None:
            grad_class = np.zeros((batch, self.num_classes), dtype=DTYPE)
        real_grad, grad_feat_r = _dense_backward(real_layer, cache.real, grad_real.reshape(-1, 1), slope)
        class_grad, grad_feat_c = _dense_backward(class_layer, cache.cls, grad_class, slope)
        trunk_grad, grad_x = _dense_backward(trunk_layer, cache.trunk, grad_feat_r + grad_feat_c, slope)
        return [trunk_grad, real_grad, class_grad], grad_x


Network = GeneratorNet | DiscriminatorNet


def forward_generator(g: GeneratorNet, z: np.ndarray) -> np.ndarray:
    return g.forward(z)[0]


def forward_discriminator(dnet: DiscriminatorNet, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    real_probs, class_probs, _ = dnet.forward(x)
    return real_probs, class_probs


def backward_and_step(net: Network, cache, loss_grad_at_output, adam: AdamConfig) -> NetworkParams:
    """
    Back-propagate the loss gradient at the network outputs and take one Adam step.

    For a discriminator, ``loss_grad_at_output`` is a ``(grad_real, grad_class)``
    pair (either may be None). Raises TrainingDivergenceError with the layer
    index when a gradient is not finite; parameters are untouched in that case.
    """
    if isinstance(net, DiscriminatorNet):
        grad_real, grad_class = loss_grad_at_output
        grads, _ = net.backward(cache, grad_real, grad_class)
    else:
        grads, _ = net.backward(cache, loss_grad_at_output)
    _check_grads(grads)
    return net.params.adam_step(grads, adam)


def apply_gradients(net: Network, grads: list[LayerGrad], adam: AdamConfig) -> NetworkParams:
    """Adam step from precomputed gradients, with the same finiteness guard."""
    _check_grads(grads)
    return net.params.adam_step(grads, adam)


# ─── Finite-difference check harness ─────────────────────────────────────────

def finite_difference_check(
    params: NetworkParams,
    objective: Callable[[], float],
    analytic: list[LayerGrad],
    h: float = 1e-5,
    sample_size: int | None = None,
    rng: RngStream | None = None,
    floor: float = 1e-6,
) -> float:
    """
    Compare analytic gradients against central differences of ``objective``.

    ``objective`` must recompute the scalar loss from the current ``params``.
    With ``sample_size`` set, that many (layer, tensor, index) entries are sampled
    with ``rng``; otherwise every entry is checked. Returns the largest
    relative error |a − n| / max(|a|, |n|, floor).
    """
    entries: list[tuple[np.ndarray, np.ndarray, int]] = []
    for layer, grad in zip(params.layers, analytic):
        for tensor, gtensor in ((layer.weight, grad.weight), (layer.bias, grad.bias)):
            for flat_index in range(tensor.size):
                entries.append((tensor, gtensor, flat_index))
    if sample_size is not None:
        if rng is None:
            raise ArgumentError("sampling entries requires an rng")
        picks = rng.choice(len(entries), size=min(sample_size, len(entries)), replace=False)
        entries = [entries[i] for i in sorted(picks)]

    worst = 0.0
    for tensor, gtensor, flat_index in entries:
        view = tensor.reshape(-1)
        original = view[flat_index]
        view[flat_index] = original + h
        plus = objective()
        view[flat_index] = original - h
        minus = objective()
        view[flat_index] = original
        numeric = (plus - minus) / (2.0 * h)
        exact = gtensor.reshape(-1)[flat_index]
        err = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
        worst = max(worst, err)
    return worst


# ─── Checkpoints ──────────────────────────────────────────────────────────────

class LayerRecord(BaseModel):
    fan_in: int
    fan_out: int
    activation: Activation
    weight: list[float]
    bias: list[float]
    m_weight: list[float]
    v_weight: list[float]
    m_bias: list[float]
    v_bias: list[float]


class CheckpointFile(BaseModel):
    format: str = CHECKPOINT_FORMAT
    version: int = CHECKPOINT_VERSION
    kind: Literal["generator", "discriminator"]
    leaky_slope: float
    adam_step: int
    init_seed: int | None = None
    rng_seed: int | None = None
    layers: list[LayerRecord]


def _flat(arr: np.ndarray) -> list[float]:
    return [float(v) for v in np.ascontiguousarray(arr).reshape(-1)]


def save_checkpoint(net: Network, path: str | Path, rng_seed: int | None = None) -> Path:
    """
    Write ``net`` as self-describing JSON.

    Floats go through the standard json module, which emits the shortest
    repr that parses back to the same double, so load(save(x)) is bit-exact.
    """
    record = CheckpointFile(
        kind=net.kind,
        leaky_slope=net.params.leaky_slope,
        adam_step=net.params.step,
        init_seed=net.params.init_seed,
        rng_seed=rng_seed,
        layers=[
            LayerRecord(
                fan_in=layer.fan_in, fan_out=layer.fan_out, activation=layer.activation,
                weight=_flat(layer.weight), bias=_flat(layer.bias),
                m_weight=_flat(layer.m_weight), v_weight=_flat(layer.v_weight),
                m_bias=_flat(layer.m_bias), v_bias=_flat(layer.v_bias),
            )
            for layer in net.params.layers
        ],
    )
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(record.model_dump(mode="json"), indent=1), encoding="utf-8")
    except OSError as exc:
        raise ResultsIOError(f"cannot write checkpoint: {exc}", path=str(path)) from exc
    logger.debug("Checkpoint written", extra={"path": str(path), "kind": net.kind})
    return path


def load_checkpoint(path: str | Path) -> Network:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
        record = CheckpointFile.model_validate(raw)
    except (OSError, ValueError, ValidationError) as exc:
        raise ResultsIOError(f"cannot read checkpoint: {exc}", path=str(path)) from exc
    if record.format != CHECKPOINT_FORMAT or record.version != CHECKPOINT_VERSION:
        raise ResultsIOError("unsupported checkpoint format",
                             format=record.format, version=record.version)

    layers = []
    for lr in record.layers:
        shape = (lr.fan_in, lr.fan_out)
        layers.append(DenseLayer(
            weight=np.array(lr.weight, dtype=DTYPE).reshape(shape),
            bias=np.array(lr.bias, dtype=DTYPE),
            activation=lr.activation,
            m_weight=np.array(lr.m_weight, dtype=DTYPE).reshape(shape),
            v_weight=np.array(lr.v_weight, dtype=DTYPE).reshape(shape),
            m_bias=np.array(lr.m_bias, dtype=DTYPE),
            v_bias=np.array(lr.v_bias, dtype=DTYPE),
        ))
    params = NetworkParams(layers=layers, step=record.adam_step,
                           leaky_slope=record.leaky_slope, init_seed=record.init_seed)
    return GeneratorNet(params) if record.kind == "generator" else DiscriminatorNet(params)
