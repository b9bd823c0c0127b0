from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

DTYPE_WIDTH = {"f32": 4, "f64": 8}
NUMPY_DTYPE = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class TensorSpec:
    """Static shape and element type of a dense tensor."""

    shape: tuple[int, ...]
    dtype: str = "f64"

    def __post_init__(self) -> None:
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if self.dtype not in DTYPE_WIDTH:
            raise ValueError(f"unsupported dtype {self.dtype!r}")
        if any(d < 1 for d in self.shape):
            raise ValueError(f"non-positive dimension in shape {self.shape}")

    @property
    def rank(self) -> int:
        return len(self.shape)

    @property
    def element_count(self) -> int:
        return math.prod(self.shape)

    @property
    def byte_size(self) -> int:
        return self.element_count * DTYPE_WIDTH[self.dtype]

    def with_shape(self, shape: Sequence[int]) -> "TensorSpec":
        return TensorSpec(tuple(shape), self.dtype)

    @classmethod
    def of(cls, array: np.ndarray) -> "TensorSpec":
        dtype = "f32" if array.dtype == np.float32 else "f64"
        return cls(tuple(array.shape), dtype)

    def __str__(self) -> str:
        return f"{self.dtype}[{','.join(map(str, self.shape))}]"
