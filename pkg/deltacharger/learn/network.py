"""Layer stacks described by a spec string such as ``conv3x3(2,16)|bn(16)|relu``"""

import re
from typing import Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from deltacharger.errors import ShapeMismatch
from deltacharger.learn.layers import BatchNorm, Conv3x3, Dense, Flatten, Layer, ReLU, cross_entropy, softmax

INPUT_CHANNELS, INPUT_SIDE = 2, 10
_TOKEN = re.compile(r"^(dense|conv3x3|bn)\((\d+)(?:,(\d+))?\)$|^(relu|flatten)$")


class NetworkSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    layers: Tuple[str, ...]

    @classmethod
    def parse(cls, text: str) -> "NetworkSpec":
        tokens = tuple(t.strip().replace(" ", "") for t in text.split("|") if t.strip())
        for token in tokens:
            if not _TOKEN.match(token):
                raise ShapeMismatch(f"unknown layer '{token}' in network spec")
        spec = cls(layers=tokens)
        spec.output_shape()
        return spec

    def __str__(self) -> str:
        return "|".join(self.layers)

    @property
    def convolutional(self) -> bool:
        return bool(self.layers) and self.layers[0].startswith("conv3x3")

    def input_shape(self) -> Tuple[int, ...]:
        if self.convolutional:
            return (INPUT_CHANNELS, INPUT_SIDE, INPUT_SIDE)
        return (INPUT_CHANNELS * INPUT_SIDE * INPUT_SIDE,)

    def output_shape(self) -> Tuple[int, ...]:
        """Walk the shapes through every layer, ShapeMismatch where they do not compose"""
        shape = self.input_shape()
        for token in self.layers:
            kind, a, b, bare = _TOKEN.match(token).groups()
            name = kind or bare
            if name == "dense":
                if len(shape) != 1 or shape[0] != int(a):
                    raise ShapeMismatch(f"{token} cannot follow shape {shape}")
                shape = (int(b),)
            elif name == "conv3x3":
                if len(shape) != 3 or shape[0] != int(a) or min(shape[1:]) < 3:
                    raise ShapeMismatch(f"{token} cannot follow shape {shape}")
                shape = (int(b), shape[1] - 2, shape[2] - 2)
            elif name == "bn":
                if shape[0] != int(a):
                    raise ShapeMismatch(f"{token} cannot follow shape {shape}")
            elif name == "flatten":
                shape = (int(np.prod(shape)),)
        return shape

    def build(self, rng: np.random.Generator) -> List[Layer]:
        layers: List[Layer] = []
        for token in self.layers:
            kind, a, b, bare = _TOKEN.match(token).groups()
            if kind == "dense":
                layers.append(Dense(int(a), int(b), rng))
            elif kind == "conv3x3":
                layers.append(Conv3x3(int(a), int(b), rng))
            elif kind == "bn":
                layers.append(BatchNorm(int(a)))
            elif bare == "relu":
                layers.append(ReLU())
            else:
                layers.append(Flatten())
        return layers


def regular_nn(n_classes: int) -> NetworkSpec:
    return NetworkSpec.parse(f"dense(200,128)|bn(128)|relu|dense(128,64)|bn(64)|relu|dense(64,{n_classes})")


def cnn(n_classes: int) -> NetworkSpec:
    return NetworkSpec.parse(
        "conv3x3(2,16)|bn(16)|relu|conv3x3(16,32)|bn(32)|relu|flatten|"
        f"dense(1152,128)|bn(128)|relu|dense(128,64)|bn(64)|relu|dense(64,{n_classes})"
    )


class Network:
    def __init__(self, spec: NetworkSpec, seed: int = 0):
        self.spec = spec
        self.layers = spec.build(np.random.default_rng(seed))
        self.n_classes = spec.output_shape()[0]

    def _shape_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x.reshape((x.shape[0],) + self.spec.input_shape())

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        out = self._shape_input(x)
        for layer in self.layers:
            out = layer.forward(out, train)
        return out

    def backward(self, dlogits: np.ndarray) -> Dict[str, np.ndarray]:
        grad = dlogits
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return self.grads()

    def loss_and_grads(self, x, labels) -> Tuple[float, Dict[str, np.ndarray]]:
        loss, dlogits = cross_entropy(self.forward(x, train=True), labels)
        return loss, self.backward(dlogits)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return softmax(self.forward(x, train=False))

    def _named(self, attr: str) -> Dict[str, np.ndarray]:
        named = {}
        for i, layer in enumerate(self.layers):
            for key, value in getattr(layer, attr).items():
                named[f"{i}.{key}"] = value
        return named

    def parameters(self) -> Dict[str, np.ndarray]:
        return self._named("params")

    def grads(self) -> Dict[str, np.ndarray]:
        return self._named("grads")

    def state(self) -> Dict[str, np.ndarray]:
        """Parameters and batch-norm running statistics, keyed ``<layer>.<name>``"""
        state = self._named("params")
        state.update(self._named("buffers"))
        return state

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for i, layer in enumerate(self.layers):
            for store in (layer.params, layer.buffers):
                for key in store:
                    name = f"{i}.{key}"
                    if name not in state:
                        raise ShapeMismatch(f"missing parameter block '{name}'")
                    value = np.asarray(state[name], dtype=float)
                    if value.shape != store[key].shape:
                        raise ShapeMismatch(f"parameter '{name}' has shape {value.shape}, expected {store[key].shape}")
                    store[key] = value.copy()
