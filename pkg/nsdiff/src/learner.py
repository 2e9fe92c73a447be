"""Small trainable approximator: MLPs with hand-written backprop and Adam.

Parameters of every network live in one flat `ParameterStore` keyed by
`<network>/<tensor>` names, which is also the checkpoint layout.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .errors import BackwardBeforeForwardError, ConfigurationError, ShapeError, TrainingError

log = logging.getLogger(__name__)

IDENTITY = "identity"
SOFTPLUS = "softplus"
HEADS = (IDENTITY, SOFTPLUS)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
# (beta1, beta2, eps)
AdamSettings = Tuple[float, float, float]
DEFAULT_ADAM: AdamSettings = (ADAM_BETA1, ADAM_BETA2, ADAM_EPS)


def softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class ParameterStore:
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    grads: Dict[str, np.ndarray] = field(default_factory=dict)
    moment1: Dict[str, np.ndarray] = field(default_factory=dict)
    moment2: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value: np.ndarray) -> None:
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.moment1[name] = np.zeros_like(value)
        self.moment2[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self, prefix: Optional[str] = None) -> List[str]:
        if prefix is None:
            return list(self.params)
        return [n for n in self.params if n.startswith(prefix + "/")]

    def zero_grad(self, prefix: Optional[str] = None) -> None:
        for name in self.names(prefix):
            self.grads[name].fill(0.0)

    def n_parameters(self, prefix: Optional[str] = None) -> int:
        return int(sum(self.params[n].size for n in self.names(prefix)))

    def snapshot(self, prefix: Optional[str] = None) -> Dict[str, np.ndarray]:
        return {n: self.params[n].copy() for n in self.names(prefix)}

    def restore(self, arrays: Dict[str, np.ndarray]) -> None:
        for name, value in arrays.items():
            if name not in self.params:
                self.add(name, value)
            else:
                self.params[name][...] = value

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        return iter(self.params.items())


@dataclass(frozen=True)
class MlpSpec:
    """
    Fully connected network description.

    `widths` lists every layer size including input and output, so a
    3-layer network has four entries. Hidden layers use ReLU.
    """
    name: str
    widths: Tuple[int, ...]
    head: str = IDENTITY

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ConfigurationError(f"{self.name}: an MLP needs at least one layer")
        if any(int(w) < 1 for w in self.widths):
            raise ConfigurationError(f"{self.name}: layer widths must be positive, got {self.widths}")
        if self.head not in HEADS:
            raise ConfigurationError(f"{self.name}: unknown head '{self.head}'")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def weight(self, i: int) -> str:
        return f"{self.name}/W{i}"

    def bias(self, i: int) -> str:
        return f"{self.name}/b{i}"


@dataclass
class MlpCache:
    inputs: List[np.ndarray]
    pre: List[np.ndarray]


def init_mlp(store: ParameterStore, spec: MlpSpec, generator: np.random.Generator) -> None:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
        bound = 1.0 / np.sqrt(fan_in)
        store.add(spec.weight(i), generator.uniform(-bound, bound, size=(fan_in, fan_out)))
        store.add(spec.bias(i), generator.uniform(-bound, bound, size=(fan_out,)))


def mlp_forward(store: ParameterStore, spec: MlpSpec, inputs: np.ndarray) -> Tuple[np.ndarray, MlpCache]:
    """
    Forward pass over a batch (B×in) or a single vector (in,).

    Returns:
        Output array with the same leading shape as the input, and the cache
        needed by mlp_backward
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    single = inputs.ndim == 1
    h = inputs[None, :] if single else inputs
    if h.ndim != 2 or h.shape[1] != spec.widths[0]:
        raise ShapeError(f"{spec.name}: expected input width {spec.widths[0]}, got shape {inputs.shape}")

    cache = MlpCache(inputs=[], pre=[])
    for i in range(spec.n_layers):
        cache.inputs.append(h)
        z = h @ store[spec.weight(i)] + store[spec.bias(i)]
        cache.pre.append(z)
        if i < spec.n_layers - 1:
            h = np.maximum(z, 0.0)
        elif spec.head == SOFTPLUS:
            h = softplus(z)
        else:
            h = z
    return (h[0] if single else h), cache


def mlp_backward(store: ParameterStore, spec: MlpSpec, cache: Optional[MlpCache],
                 grad_output: np.ndarray) -> np.ndarray:
    """Accumulate parameter gradients into the store; return the input gradient."""
    if cache is None or not cache.pre:
        raise BackwardBeforeForwardError(f"{spec.name}: backward called before forward")
    g = np.asarray(grad_output, dtype=np.float64)
    single = g.ndim == 1
    if single:
        g = g[None, :]
    if g.shape != cache.pre[-1].shape:
        raise ShapeError(f"{spec.name}: output gradient shape {g.shape} != {cache.pre[-1].shape}")

    for i in reversed(range(spec.n_layers)):
        z = cache.pre[i]
        if i == spec.n_layers - 1:
            if spec.head == SOFTPLUS:
                g = g * sigmoid(z)
        else:
            g = g * (z > 0)
        store.grads[spec.weight(i)] += cache.inputs[i].T @ g
        store.grads[spec.bias(i)] += g.sum(axis=0)
        g = g @ store[spec.weight(i)].T
    return g[0] if single else g


def adam_step(store: ParameterStore, lr: float, beta1: float = ADAM_BETA1,
              beta2: float = ADAM_BETA2, eps: float = ADAM_EPS,
              prefix: Optional[str] = None) -> None:
    """One bias-corrected adaptive-moment update of every (or every prefixed) parameter."""
    names = store.names(prefix)
    for name in names:
        if not np.all(np.isfinite(store.grads[name])):
            raise TrainingError(f"non-finite gradient in '{name}' at optimizer step {store.step + 1}")
    store.step += 1
    c1 = 1.0 - beta1 ** store.step
    c2 = 1.0 - beta2 ** store.step
    for name in names:
        g = store.grads[name]
        m = store.moment1[name]
        v = store.moment2[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        store.params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if not np.all(np.isfinite(store.params[name])):
            raise TrainingError(f"parameter '{name}' became non-finite at optimizer step {store.step}")


###################
# Step embeddings #
###################

def init_embedding(store: ParameterStore, name: str, rows: int, width: int,
                   generator: np.random.Generator) -> None:
    store.add(name, generator.normal(0.0, 1.0, size=(rows, width)))


def embedding_forward(store: ParameterStore, name: str, index: np.ndarray) -> np.ndarray:
    return store[name][np.asarray(index)]


def embedding_backward(store: ParameterStore, name: str, index: np.ndarray, grad: np.ndarray) -> None:
    np.add.at(store.grads[name], np.asarray(index), grad)
