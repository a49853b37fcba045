"""Minimal parameter-registry base for the learned components.

Parameters and stateful buffers register in construction order, which makes
weight initialization, serialization order, and checkpoint layout
deterministic for a fixed seed and architecture.
"""

from __future__ import annotations

import numpy as np

from .engine import Tensor
from .errors import FormatError

_f32 = np.float32


class Module:
    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, Tensor] = {}
        self._children: dict[str, "Module"] = {}
        self.training = True

    def param(self, name: str, arr: np.ndarray) -> Tensor:
        t = Tensor(arr, requires_grad=True)
        self._params[name] = t
        return t

    def buffer(self, name: str, arr: np.ndarray) -> Tensor:
        t = Tensor(arr)
        self._buffers[name] = t
        return t

    def child(self, name: str, mod: "Module") -> "Module":
        self._children[name] = mod
        return mod

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [(prefix + n, t) for n, t in self._params.items()]
        for cn, c in self._children.items():
            out.extend(c.named_parameters(prefix + cn + "."))
        return out

    def named_buffers(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [(prefix + n, t) for n, t in self._buffers.items()]
        for cn, c in self._children.items():
            out.extend(c.named_buffers(prefix + cn + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def set_training(self, flag: bool) -> None:
        self.training = flag
        for c in self._children.values():
            c.set_training(flag)

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Parameters then buffers, in registration order, for serialization."""
        items = [(n, t.data) for n, t in self.named_parameters()]
        items += [("buffer:" + n, t.data) for n, t in self.named_buffers()]
        return items

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for n, t in self.named_parameters():
            if n not in arrays:
                raise FormatError(f"checkpoint is missing parameter {n!r}")
            if tuple(arrays[n].shape) != t.data.shape:
                raise FormatError(
                    f"checkpoint shape {arrays[n].shape} for {n!r} != model {t.data.shape}"
                )
            t.data = arrays[n].astype(_f32)
        for n, t in self.named_buffers():
            key = "buffer:" + n
            if key not in arrays:
                raise FormatError(f"checkpoint is missing buffer {n!r}")
            t.data[...] = arrays[key].astype(_f32)


def he_conv(rng: np.random.Generator, cout: int, cin: int, k: int) -> np.ndarray:
    std = np.sqrt(2.0 / (cin * k * k * k))
    return (rng.normal(0.0, std, (cout, cin, k, k, k))).astype(_f32)


def linear_init(rng: np.random.Generator, cin: int, cout: int) -> np.ndarray:
    std = np.sqrt(1.0 / cin)
    return (rng.normal(0.0, std, (cin, cout))).astype(_f32)


class BatchNorm(Module):
    """Per-channel batch norm with running statistics (batch of one patch).

    The running-average momentum is small because single-patch statistics
    vary wildly; a longer horizon keeps inference normalization stable.
    """

    def __init__(self, channels: int, momentum: float = 0.01, eps: float = 1e-5):
        super().__init__()
        self.gamma = self.param("gamma", np.ones(channels, _f32))
        self.beta = self.param("beta", np.zeros(channels, _f32))
        self.running_mean = self.buffer("running_mean", np.zeros(channels, _f32))
        self.running_var = self.buffer("running_var", np.ones(channels, _f32))
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        from . import engine as E

        return E.batch_norm(
            x, self.gamma, self.beta,
            self.running_mean.data, self.running_var.data,
            self.training, self.momentum, self.eps,
        )
