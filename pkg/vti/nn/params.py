"""
Parameter Store
Owns every trainable tensor of a model under a dotted name
"""

from typing import Iterable

import numpy as np

from vti.core.errors import ContractViolation
from vti.engine import Tensor


class ParameterStore:
    """
    Named registry of trainable tensors

    Initializers draw from the generator passed at construction, so two stores
    built with the same seed hold identical parameters.
    """

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self._params: dict[str, Tensor] = {}

    def __len__(self) -> int:
        return len(self._params)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ContractViolation(f"parameter {name!r} registered twice")
        t = Tensor(np.array(data), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def uniform(self, name: str, shape: tuple[int, ...], bound: float) -> Tensor:
        return self.add(name, self.rng.uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self.add(name, np.ones(shape))

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def parameters(self) -> Iterable[Tensor]:
        return self._params.values()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        """Copy of every parameter array"""
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        """
        Overwrite parameters in place

        Raises:
            ContractViolation: unknown name, missing name or shape mismatch
        """
        unknown = sorted(set(arrays) - set(self._params))
        if unknown:
            raise ContractViolation(f"unknown parameter name(s): {', '.join(unknown)}")
        missing = sorted(set(self._params) - set(arrays))
        if missing:
            raise ContractViolation(f"missing parameter(s): {', '.join(missing)}")
        for name, data in arrays.items():
            p = self._params[name]
            if tuple(data.shape) != p.shape:
                raise ContractViolation(f"shape mismatch for {name}: {tuple(data.shape)} vs {p.shape}")
        for name, data in arrays.items():
            p = self._params[name]
            p.data = np.array(data, dtype=p.data.dtype)
