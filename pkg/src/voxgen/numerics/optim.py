"""Named parameter store and the Adam update."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict

import numpy as np

from .engine import Array, NumericsError, Tensor


@dataclass
class OptimizerConfig:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise ValueError(f"{name} must lie in (0,1), got {v}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


class ParamStore:
    """Ordered map name -> parameter tensor, with Adam moment slots."""

    def __init__(self, dtype=np.float32):
        self.params: Dict[str, Tensor] = {}
        self.m: Dict[str, Array] = {}
        self.v: Dict[str, Array] = {}
        self.step_count: int = 0
        self.dtype = dtype

    def add(self, name: str, init: Array) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(init, dtype=self.dtype), requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self):
        return list(self.params.keys())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def n_values(self) -> int:
        return sum(int(t.data.size) for t in self.params.values())

    def astype(self, dtype) -> "ParamStore":
        """Copy with parameters cast to `dtype` and fresh moments."""
        out = ParamStore(dtype=dtype)
        for name, t in self.params.items():
            out.add(name, t.data.astype(dtype))
        return out

    def state_arrays(self) -> Dict[str, Array]:
        return {name: t.data for name, t in self.params.items()}

    def load_state_arrays(self, state: Dict[str, Array]):
        for name, t in self.params.items():
            if name not in state:
                raise KeyError(f"missing parameter {name!r} in state")
            arr = np.asarray(state[name], dtype=self.dtype)
            if arr.shape != t.data.shape:
                raise ValueError(
                    f"parameter {name!r} shape mismatch: stored {arr.shape}, expected {t.data.shape}"
                )
            t.data = arr.copy()


def adam_step(store: ParamStore, cfg: OptimizerConfig) -> ParamStore:
    """Bias-corrected Adam update in place; zeroes gradients afterwards."""
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, p in store.params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m = store.m[name]
        v = store.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p.data -= (cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)).astype(p.data.dtype)
        p.grad = None
    return store


def grad_check(fn: Callable[[ParamStore], Tensor], store: ParamStore, eps: float = 1e-3) -> float:
    """Max over parameters of |analytic - central difference| relative error.

    `fn` must build a scalar loss from the store's parameters. The relative
    error per parameter is the max elementwise gap scaled by the larger of
    the two gradients' max magnitudes, which keeps near-zero elements from
    blowing up the ratio while still catching real disagreements.
    """
    store.zero_grad()
    out = fn(store)
    if not np.isfinite(out.data):
        raise NumericsError(f"grad_check: non-finite function value {out.data}")
    out.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in store.params.items()
    }
    worst = 0.0
    for name, p in store.params.items():
        flat = p.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(fn(store).data)
            flat[i] = orig - eps
            f_minus = float(fn(store).data)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericsError(f"grad_check: non-finite perturbed value at {name}[{i}]")
            numeric[i] = (f_plus - f_minus) / (2.0 * eps)
        a = analytic[name].reshape(-1)
        scale = max(float(np.abs(a).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)), 1e-8)
        err = float(np.abs(a - numeric).max(initial=0.0)) / scale
        worst = max(worst, err)
    store.zero_grad()
    return worst
