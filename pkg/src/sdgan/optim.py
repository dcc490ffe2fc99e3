"""Parameter containers and first-order optimizers."""

import hashlib
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor


class ModelParams:
    """Ordered, uniquely named set of learnable tensors for one network."""

    def __init__(self, entries=(), spec=None):
        self._entries = {}
        self.spec = spec
        for name, tensor in entries:
            self.add(name, tensor)

    def add(self, name, tensor):
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor, requires_grad=True)
        tensor.requires_grad = True
        tensor.name = name
        self._entries[name] = tensor
        return tensor

    def __getitem__(self, name):
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def values(self):
        return self._entries.values()

    def names(self):
        return list(self._entries)

    def fingerprint(self):
        h = hashlib.sha256()
        for name, t in self._entries.items():
            h.update(name.encode())
            h.update(repr(t.shape).encode())
            h.update(str(t.dtype).encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def zero_grad(self):
        for t in self._entries.values():
            t.grad = None

    @property
    def trainable(self):
        return all(t.requires_grad for t in self._entries.values())

    @trainable.setter
    def trainable(self, flag):
        for t in self._entries.values():
            t.requires_grad = bool(flag)

    @contextmanager
    def frozen(self):
        """Stop gradients from being recorded for these parameters.

        Values still flow forward and gradients still pass *through* the
        network to upstream inputs.
        """
        previous = self.trainable
        self.trainable = False
        try:
            yield self
        finally:
            self.trainable = previous

    def copy(self):
        return ModelParams(((n, Tensor(t.data.copy(), dtype=t.dtype)) for n, t in self.items()), spec=self.spec)

    def num_values(self):
        return sum(t.size for t in self._entries.values())


OPTIMIZER_DEFAULTS = {
    "sgd": {"learning_rate": 1e-2},
    "adam": {"learning_rate": 2e-4, "beta1": 0.9, "beta2": 0.999, "epsilon": 1e-8},
}


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    moments: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in OPTIMIZER_DEFAULTS:
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")

    def settings(self):
        return {
            "kind": self.kind,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
        }


def make_optimizer(kind="adam", **overrides):
    """Optimizer state with conventional defaults (Adam lr 2e-4, SGD lr 1e-2)."""
    if kind not in OPTIMIZER_DEFAULTS:
        raise ConfigError(f"unknown optimizer kind {kind!r}")
    settings = dict(OPTIMIZER_DEFAULTS[kind])
    settings.update({k: v for k, v in overrides.items() if v is not None})
    return OptimizerState(kind=kind, **settings)


def optimizer_step(params, state):
    """Apply one update to ``params`` in place using their ``.grad`` buffers.

    Gradients are left untouched; callers clear them.
    """
    for name, t in params.items():
        if t.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    if state.kind == "sgd":
        for t in params.values():
            t.data -= (state.learning_rate * t.grad).astype(t.dtype)
        state.step_count += 1
        return params, state

    state.step_count += 1
    k = state.step_count
    bc1 = 1.0 - state.beta1**k
    bc2 = 1.0 - state.beta2**k
    for name, t in params.items():
        g = t.grad
        if name not in state.moments:
            state.moments[name] = (np.zeros_like(t.data), np.zeros_like(t.data))
        m, v = state.moments[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        t.data -= update.astype(t.dtype)
    return params, state
