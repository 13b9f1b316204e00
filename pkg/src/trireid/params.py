"""Named parameter registry shared by the backbone, aggregator, and heads."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every entry lies within 2 standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


class ParameterStore:
    """Insertion-ordered map of name -> trainable Tensor.

    A single store backs the whole model, so shared blocks exist exactly
    once regardless of how many modalities pass through them.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name: {name}")
        t = Tensor(array, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values in place; names must match exactly."""
        unknown = sorted(set(arrays) - set(self._params))
        if unknown:
            raise ConfigError(f"unknown parameter names in checkpoint: {unknown}")
        missing = sorted(set(self._params) - set(arrays))
        if missing:
            raise ConfigError(f"checkpoint is missing parameters: {missing}")
        for name, arr in arrays.items():
            t = self._params[name]
            if t.data.shape != arr.shape:
                raise ConfigError(
                    f"shape mismatch for {name}: have {t.data.shape}, file has {arr.shape}"
                )
            t.data[...] = arr
