"""Fully connected networks built from :mod:`varnet.numkit.tensor` primitives."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

FORMAT_VERSION = 1

HIDDEN_ACTIVATIONS = ("relu",)
OUTPUT_ACTIVATIONS = ("identity", "softplus")


@dataclass
class Mlp:
    """Multilayer perceptron with ReLU hidden layers.

    ``params`` alternates weights (``fan_in x fan_out``) and biases
    (``fan_out``) for each layer; each entry is a leaf :class:`Tensor` so a
    training loop can toggle ``requires_grad`` per network.
    """

    layer_sizes: list[int]
    output_activation: str = "identity"
    hidden_activation: str = "relu"
    params: list[Tensor] = field(default_factory=list)

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise ValueError("an Mlp needs at least an input and an output size")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        n_layers = len(self.layer_sizes) - 1
        if self.params and len(self.params) != 2 * n_layers:
            raise ValueError(f"expected {2 * n_layers} parameter arrays, got {len(self.params)}")
        for i, (fan_in, fan_out) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            if self.params:
                w, b = self.params[2 * i], self.params[2 * i + 1]
                if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                    raise ValueError(f"layer {i}: expected ({fan_in},{fan_out}) weights, got {w.shape}")

    @classmethod
    def init(cls, layer_sizes, rng: np.random.Generator, output_activation: str = "identity") -> "Mlp":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation for weights and biases."""
        params = []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            params.append(Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True))
            params.append(Tensor(rng.uniform(-bound, bound, size=fan_out), requires_grad=True))
        return cls(list(layer_sizes), output_activation, params=params)

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def __call__(self, X) -> Tensor:
        h = T.as_tensor(X)
        if h.ndim != 2 or h.shape[1] != self.n_in:
            raise ValueError(f"input has shape {h.shape}, network expects (N, {self.n_in})")
        n_layers = len(self.layer_sizes) - 1
        for i in range(n_layers):
            h = T.affine(h, self.params[2 * i], self.params[2 * i + 1])
            if i < n_layers - 1:
                h = T.relu(h)
        if self.output_activation == "softplus":
            h = T.softplus(h)
        return h

    def set_trainable(self, flag: bool) -> None:
        for p in self.params:
            p.requires_grad = flag
            p.grad = None

    def copy(self) -> "Mlp":
        return Mlp(
            list(self.layer_sizes),
            self.output_activation,
            self.hidden_activation,
            [Tensor(p.data.copy(), requires_grad=p.requires_grad) for p in self.params],
        )

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "layer_sizes": list(self.layer_sizes),
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
            "weights": [self.params[i].data.ravel().tolist() for i in range(0, len(self.params), 2)],
            "biases": [self.params[i].data.ravel().tolist() for i in range(1, len(self.params), 2)],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Mlp":
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported Mlp format version {doc.get('format_version')!r}")
        sizes = [int(s) for s in doc["layer_sizes"]]
        params = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = np.asarray(doc["weights"][i], dtype=np.float64).reshape(fan_in, fan_out)
            b = np.asarray(doc["biases"][i], dtype=np.float64).reshape(fan_out)
            params += [Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)]
        return cls(sizes, doc["output_activation"], doc["hidden_activation"], params)

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "Mlp":
        return cls.from_dict(json.loads(text))


def mlp_forward(net: Mlp, X) -> np.ndarray:
    """Evaluate ``net`` on the rows of ``X`` without recording a graph."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.n_in:
        raise ValueError(f"input has shape {X.shape}, network expects (N, {net.n_in})")
    n_layers = len(net.layer_sizes) - 1
    h = X
    for i in range(n_layers):
        h = h @ net.params[2 * i].data + net.params[2 * i + 1].data
        if i < n_layers - 1:
            h = np.maximum(h, 0.0)
    if net.output_activation == "softplus":
        h = T._softplus(h)
    return h
