"""Parameter containers and the checkpoint directory format.

A :class:`Module` is a plain attribute bag; anything that is a gradient-
tracking Tensor, a Module, or a list of either is picked up by
``named_parameters`` in a stable order, which is what checkpointing and the
optimizer key on.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor


class Module:
    """Base class giving parameter traversal, grad zeroing and checkpoint IO."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Tensor):
                        if item.requires_grad:
                            yield f"{key}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def param(data, requires_grad: bool = True) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


def kaiming(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return param(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))


class Linear(Module):
    """y = x @ W + b on (..., in_features) token layouts (2-D inputs)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 zero_init: bool = False):
        if zero_init:
            self.weight = param(np.zeros((in_features, out_features)))
        else:
            self.weight = kaiming(rng, (in_features, out_features), in_features)
        self.bias = param(np.zeros(out_features))

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator,
                 stride: int = 1, pad: int | None = None, zero_init: bool = False):
        self.stride = stride
        self.pad = (k - 1) // 2 if pad is None else pad
        if zero_init:
            self.weight = param(np.zeros((out_ch, in_ch, k, k)))
        else:
            self.weight = kaiming(rng, (out_ch, in_ch, k, k), in_ch * k * k)
        self.bias = param(np.zeros(out_ch))

    def __call__(self, x: Tensor) -> Tensor:
        out = T.conv2d(x, self.weight, stride=self.stride, pad=self.pad)
        return out + self.bias.reshape(-1, 1, 1)


class ConvTranspose2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator,
                 stride: int = 2, pad: int = 1):
        self.stride = stride
        self.pad = pad
        self.weight = kaiming(rng, (in_ch, out_ch, k, k), in_ch * k * k)
        self.bias = param(np.zeros(out_ch))

    def __call__(self, x: Tensor) -> Tensor:
        out = T.conv_transpose2d(x, self.weight, stride=self.stride, pad=self.pad)
        return out + self.bias.reshape(-1, 1, 1)


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        self.gamma = param(np.ones(channels))
        self.beta = param(np.zeros(channels))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, eps=self.eps)


# ---------------------------------------------------------------------------
# checkpoints: one VSST tensor file per parameter plus a manifest
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.txt"


def _stage_of(name: str) -> str:
    return name.split(".", 1)[0]


def save_checkpoint(module: Module, directory) -> None:
    """Write every parameter as ``<directory>/<index>.vsst`` plus a manifest.

    Manifest lines are tab-separated: name, file, shape (comma-joined), stage.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (name, p) in enumerate(module.named_parameters()):
        fname = f"{i:04d}.vsst"
        T.save_tensor(p, directory / fname)
        shape = ",".join(str(s) for s in p.shape)
        lines.append(f"{name}\t{fname}\t{shape}\t{_stage_of(name)}")
    (directory / MANIFEST_NAME).write_text("\n".join(lines) + "\n")


def load_checkpoint(module: Module, directory) -> None:
    """Load parameters saved by :func:`save_checkpoint` into ``module`` in place."""
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.exists():
        raise ContractError(f"no checkpoint manifest at {manifest}")
    entries = {}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        name, fname, shape, _stage = line.split("\t")
        entries[name] = (fname, shape)
    params = dict(module.named_parameters())
    missing = sorted(set(params) - set(entries))
    extra = sorted(set(entries) - set(params))
    if missing or extra:
        raise ContractError(
            f"checkpoint does not match the model (missing {missing[:4]}, "
            f"unexpected {extra[:4]})"
        )
    for name, (fname, shape) in entries.items():
        loaded = T.load_tensor(directory / fname)
        expect = params[name].shape
        if loaded.shape != expect:
            raise ContractError(
                f"parameter {name}: checkpoint shape {loaded.shape}, model {expect}"
            )
        params[name].data = loaded.data
