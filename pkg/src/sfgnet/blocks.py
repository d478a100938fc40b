"""Parameterised transforms applied between SFG layers and in task heads."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .autograd import Tensor, ops


def he_normal(rng: np.random.Generator, shape: Sequence[int]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Block:
    def __call__(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> dict[str, Tensor]:
        return {}


class PReLU(Block):
    def __init__(self, channels: int, init: float = 0.25):
        self.slope = Tensor(np.full(channels, init), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.prelu(x, self.slope)

    def parameters(self) -> dict[str, Tensor]:
        return {"slope": self.slope}


class MaxPool(Block):
    def __init__(self, size: int = 2):
        self.size = size

    def __call__(self, x: Tensor) -> Tensor:
        return ops.max_pool2d(x, self.size)


class BatchNorm(Block):
    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.stats = ops.RunningStats.zeros(channels)
        self.mode = "train"

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.mode, self.stats)

    def parameters(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}


class Conv(Block):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, bias: bool = False, padding: Optional[int] = None):
        self.weight = Tensor(he_normal(rng, (out_channels, in_channels, kernel_size, kernel_size)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True) if bias else None
        self.padding = kernel_size // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.conv2d(x, self.weight, padding=self.padding)
        if self.bias is not None:
            y = y + ops.reshape(self.bias, (1, -1, 1, 1))
        return y

    def parameters(self) -> dict[str, Tensor]:
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out


class ResidualBlock(Block):
    """Pre-activation residual block: ``x + conv(act(bn(conv(act(bn(x))))))``."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.bn1 = BatchNorm(channels)
        self.act1 = PReLU(channels)
        self.conv1 = Conv(channels, channels, 3, rng)
        self.bn2 = BatchNorm(channels)
        self.act2 = PReLU(channels)
        self.conv2 = Conv(channels, channels, 3, rng)

    def __call__(self, x: Tensor) -> Tensor:
        y = self.conv1(self.act1(self.bn1(x)))
        y = self.conv2(self.act2(self.bn2(y)))
        return x + y

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for name in ("bn1", "act1", "conv1", "bn2", "act2", "conv2"):
            for k, v in getattr(self, name).parameters().items():
                out[f"{name}.{k}"] = v
        return out

    def set_mode(self, mode: str) -> None:
        self.bn1.mode = self.bn2.mode = mode


class Chain(Block):
    def __init__(self, *blocks: Block, names: Optional[Sequence[Optional[str]]] = None):
        self.blocks = list(blocks)
        self.names = list(names) if names is not None else [None] * len(blocks)

    def __call__(self, x: Tensor) -> Tensor:
        for b in self.blocks:
            x = b(x)
        return x

    def parameters(self) -> dict[str, Tensor]:
        # blocks without a name are owned (and reported) elsewhere
        out = {}
        for name, b in zip(self.names, self.blocks):
            if name is None:
                continue
            for k, v in b.parameters().items():
                out[f"{name}.{k}"] = v
        return out


class Affine(Block):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.weight = Tensor(rng.normal(0.0, np.sqrt(1.0 / in_features), size=(in_features, out_features)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


class Lambda(Block):
    def __init__(self, fn: Callable[[Tensor], Tensor]):
        self.fn = fn

    def __call__(self, x: Tensor) -> Tensor:
        return self.fn(x)


def walk_blocks(block: Block):
    yield block
    if isinstance(block, Chain):
        for b in block.blocks:
            yield from walk_blocks(b)


def set_mode(block: Block, mode: str) -> None:
    for b in walk_blocks(block):
        if isinstance(b, BatchNorm):
            b.mode = mode
        elif isinstance(b, ResidualBlock):
            b.set_mode(mode)
