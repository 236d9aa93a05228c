"""Small parameter-dict helpers shared by every model in the repo."""

from __future__ import annotations

import numpy as np

from .core import Tensor, default_dtype
from .rng import SplitRng


class ParamStore:
    """Named parameter dictionary with lazy, rng-keyed initialization."""

    def __init__(self, rng: SplitRng):
        self.rng = rng
        self.params: dict[str, Tensor] = {}

    def get(self, name: str, shape, init: str = "glorot", scale: float = 1.0) -> Tensor:
        p = self.params.get(name)
        if p is not None:
            return p
        r = self.rng.split("param", name)
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "normal":
            data = r.normal(0.0, scale, size=shape)
        else:  # glorot
            fan_in = shape[-2] if len(shape) >= 2 else shape[-1]
            fan_out = shape[-1]
            std = np.sqrt(2.0 / (fan_in + fan_out)) * scale
            data = r.normal(0.0, std, size=shape)
        p = Tensor(np.asarray(data, dtype=default_dtype()), requires_grad=True,
                   name=name)
        self.params[name] = p
        return p

    def linear(self, name: str, x: Tensor, d_out: int, bias: bool = True) -> Tensor:
        d_in = x.shape[-1]
        w = self.get(f"{name}.w", (d_in, d_out))
        y = x.matmul(w)
        if bias:
            y = y + self.get(f"{name}.b", (d_out,), init="zeros")
        return y

    def grads(self) -> dict[str, np.ndarray]:
        return {k: p.grad for k, p in self.params.items() if p.grad is not None}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def load(self, params: dict[str, Tensor]) -> None:
        self.params.update(params)


def sinusoidal_embedding(t: float | np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of a scalar in [0,1] (flow time conditioning)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(1000.0), half))
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    if emb.shape[-1] < dim:
        emb = np.pad(emb, ((0, 0), (0, dim - emb.shape[-1])))
    return emb.astype(default_dtype())
