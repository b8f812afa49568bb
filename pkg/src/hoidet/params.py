"""Parameter creation and bookkeeping.

All learnable state is created through one ``ParamStore`` so that
initialization is fully determined by the run seed and checkpoints can
round-trip by name.
"""

from __future__ import annotations

import numpy as np

from .tensor import Linear, Parameter


class ParamStore:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, Parameter] = {}

    def _register(self, p: Parameter) -> Parameter:
        if p.name in self.params:
            raise ValueError(f"duplicate parameter name {p.name!r}")
        self.params[p.name] = p
        return p

    def matrix(self, name: str, d_in: int, d_out: int) -> Parameter:
        """Xavier-uniform weight matrix."""
        bound = np.sqrt(6.0 / (d_in + d_out))
        return self._register(Parameter(self.rng.uniform(-bound, bound, size=(d_in, d_out)), name))

    def zeros(self, name: str, shape) -> Parameter:
        return self._register(Parameter(np.zeros(shape), name))

    def ones(self, name: str, shape) -> Parameter:
        return self._register(Parameter(np.ones(shape), name))

    def uniform(self, name: str, shape, bound: float) -> Parameter:
        return self._register(Parameter(self.rng.uniform(-bound, bound, size=shape), name))

    def const(self, name: str, values) -> Parameter:
        return self._register(Parameter(np.array(values, dtype=np.float64), name))

    def linear(self, name: str, d_in: int, d_out: int, zero: bool = False,
               scale: float | None = None, bias_init=None) -> Linear:
        if zero:
            w = self.zeros(f"{name}.w", (d_in, d_out))
        elif scale is not None:
            w = self.uniform(f"{name}.w", (d_in, d_out), scale)
        else:
            w = self.matrix(f"{name}.w", d_in, d_out)
        b = (self.const(f"{name}.b", bias_init) if bias_init is not None
             else self.zeros(f"{name}.b", (d_out,)))
        return Linear(w, b)

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.data.shape}")
            p.data = arr
