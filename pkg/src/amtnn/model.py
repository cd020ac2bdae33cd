"""AMTNN parameter groups and forward paths.

The network has three parameter groups: a shared feature extractor, one
classification head per task, and one discriminator per unordered task pair.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import tensor as tn
from .tensor import Tensor, gradient_reversal

ACTIVATIONS = ("elu", "relu", "sigmoid", "softmax", "none")
METRICS = ("hdiv", "w1")


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "elu"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError(f"layer dims must be positive, got {self.in_dim}->{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation '{self.activation}'")


@dataclass(frozen=True)
class Architecture:
    extractor: Tuple[LayerSpec, ...]
    head: Tuple[LayerSpec, ...]
    discriminator: Tuple[LayerSpec, ...]
    input_dim: int

    @classmethod
    def mlp(cls, input_dim, num_classes, extractor=(256, 128), head=(64,), discriminator=(64,),
            activation="elu", discriminator_output="sigmoid"):
        """Fully connected AMTNN; hidden widths are given per group.

        Defaults follow the desk-scale MLP: extractor in->256->128, heads
        128->64->C with softmax, discriminators 128->64->1.
        """
        def stack(dims, final_dim, final_act):
            layers = [LayerSpec(a, b, activation) for a, b in zip(dims[:-1], dims[1:])]
            layers.append(LayerSpec(dims[-1], final_dim, final_act))
            return tuple(layers)

        widths = [input_dim, *extractor]
        ext = tuple(LayerSpec(a, b, activation) for a, b in zip(widths[:-1], widths[1:]))
        feat = widths[-1]
        return cls(
            extractor=ext,
            head=stack([feat, *head], num_classes, "softmax"),
            discriminator=stack([feat, *discriminator], 1, discriminator_output),
            input_dim=input_dim,
        )

    @property
    def feature_dim(self):
        return self.extractor[-1].out_dim if self.extractor else self.input_dim

    @property
    def num_classes(self):
        return self.head[-1].out_dim

    def validate(self):
        def chain(name, layers, start):
            width = start
            for k, layer in enumerate(layers):
                if layer.in_dim != width:
                    raise ValueError(f"{name} layer {k}: expects width {layer.in_dim}, receives {width}")
                width = layer.out_dim
            return width

        feat = chain("extractor", self.extractor, self.input_dim)
        chain("head", self.head, feat)
        chain("discriminator", self.discriminator, feat)
        if not self.head:
            raise ValueError("head needs at least one layer")
        if not self.discriminator or self.discriminator[-1].out_dim != 1:
            raise ValueError("discriminator must end in a single output unit")


@dataclass
class Dense:
    weight: Tensor
    bias: Tensor
    activation: str


def pair_key(t: int, i: int) -> Tuple[int, int]:
    """Unordered pair key; (t, i) and (i, t) share one discriminator."""
    if t == i:
        raise ValueError("a task is not paired with itself")
    return (t, i) if t < i else (i, t)


@dataclass
class AmtnnParams:
    arch: Architecture
    num_tasks: int
    theta_f: List[Dense]
    theta_h: List[List[Dense]]
    theta_d: Dict[Tuple[int, int], List[Dense]] = field(default_factory=dict)

    def pairs(self):
        return sorted(self.theta_d)

    def discriminator(self, t, i):
        return self.theta_d[pair_key(t, i)]

    def named(self) -> Dict[str, Tensor]:
        """All parameter tensors by stable name, in initialisation order."""
        out = {}

        def put(prefix, layers):
            for k, layer in enumerate(layers):
                out[f"{prefix}.{k}.W"] = layer.weight
                out[f"{prefix}.{k}.b"] = layer.bias

        put("f", self.theta_f)
        for t, head in enumerate(self.theta_h):
            put(f"h{t}", head)
        for t, i in self.pairs():
            put(f"d{t}-{i}", self.theta_d[(t, i)])
        return out

    def group_of(self, name: str) -> str:
        return {"f": "extractor", "h": "head", "d": "discriminator"}[name[0]]

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named().items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]):
        named = self.named()
        missing = set(named) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, tensor in named.items():
            value = np.asarray(arrays[k], dtype=np.float64)
            if value.shape != tensor.shape:
                raise ValueError(f"{k}: shape {value.shape} != {tensor.shape}")
            tensor.data = value.copy()

    def copy(self) -> "AmtnnParams":
        clone = init_params(self.arch, self.num_tasks, seed=0)
        clone.load_arrays(self.arrays())
        return clone


def _glorot(rng, spec: LayerSpec) -> Dense:
    limit = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
    w = rng.uniform(-limit, limit, size=(spec.in_dim, spec.out_dim))
    return Dense(tn.parameter(w), tn.parameter(np.zeros(spec.out_dim)), spec.activation)


def init_params(arch: Architecture, num_tasks: int, seed: int = 0) -> AmtnnParams:
    """Glorot-uniform weights and zero biases; deterministic in ``seed``."""
    if num_tasks < 1:
        raise ValueError("need at least one task")
    arch.validate()
    rng = np.random.default_rng(seed)
    theta_f = [_glorot(rng, s) for s in arch.extractor]
    theta_h = [[_glorot(rng, s) for s in arch.head] for _ in range(num_tasks)]
    theta_d = {pair: [_glorot(rng, s) for s in arch.discriminator]
               for pair in combinations(range(num_tasks), 2)}
    return AmtnnParams(arch, num_tasks, theta_f, theta_h, theta_d)


def _activate(x, activation):
    if activation == "elu":
        return tn.elu(x)
    if activation == "relu":
        return tn.relu(x)
    if activation == "sigmoid":
        return tn.sigmoid(x)
    if activation == "softmax":
        return tn.softmax(x, axis=-1)
    return x


def run_layers(x, layers: Sequence[Dense], final_activation=True):
    """Apply a layer stack; optionally stop before the last activation."""
    x = tn.as_tensor(x)
    for k, layer in enumerate(layers):
        if x.ndim != 2 or x.shape[1] != layer.weight.shape[0]:
            raise ValueError(f"layer {k}: input width {x.shape[-1]} != {layer.weight.shape[0]}")
        x = tn.affine(x, layer.weight, layer.bias)
        if final_activation or k < len(layers) - 1:
            x = _activate(x, layer.activation)
    return x


def extract_features(x, theta_f: Sequence[Dense]):
    return run_layers(x, theta_f)


def head_logits(features, theta_h_t: Sequence[Dense]):
    return run_layers(features, theta_h_t, final_activation=False)


def predict_task(features, theta_h_t: Sequence[Dense]):
    """Class probabilities; rows lie on the simplex."""
    return tn.softmax(head_logits(features, theta_h_t), axis=-1)


def discriminator_logits(features, theta_d_pair: Sequence[Dense]):
    """Discriminator output before its final activation, flattened to one score per row."""
    out = run_layers(features, theta_d_pair, final_activation=False)
    return tn.reshape(out, (out.shape[0],))


def discriminate(features, theta_d_pair: Sequence[Dense], metric: str, w1_sigmoid=False):
    """hdiv: probability in (0, 1) that a row comes from the first task of the pair.
    w1: unconstrained critic score, unless ``w1_sigmoid`` squashes it.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric '{metric}'")
    z = discriminator_logits(features, theta_d_pair)
    if metric == "hdiv" or w1_sigmoid:
        return tn.sigmoid(z)
    return z


__all__ = [
    "LayerSpec", "Architecture", "Dense", "AmtnnParams", "pair_key", "init_params",
    "run_layers", "extract_features", "head_logits", "predict_task",
    "discriminator_logits", "discriminate", "gradient_reversal",
]
