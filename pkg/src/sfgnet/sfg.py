"""Stochastic filter group layers: masking, routing and merging of feature triples.

A layer convolves its input with the whole kernel bank and then scales
output channel ``k`` by ``z[k, i]`` to form member ``i`` of the triple
``(F1, Fs, F2)``. Shapes never change between iterations; a kernel that is
not in a group simply contributes a zero (or down-weighted) channel.

Routing between consecutive layers (two tasks)::

    G1 <- h1(F1 | Fs)      Gs <- hs(Fs)      G2 <- h2(F2 | Fs)

where ``|`` is a :class:`MergeSpec` and ``h`` the junction's transforms.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autograd import Tensor, ops
from .blocks import Block, he_normal
from .concrete import SHARED, TASK1, TASK2, AssignmentSample, GroupingParams


@dataclass
class FeatureTriple:
    f1: Tensor
    fs: Tensor
    f2: Tensor

    def members(self) -> tuple[Tensor, Tensor, Tensor]:
        return self.f1, self.fs, self.f2

    def total(self) -> Tensor:
        return self.f1 + self.fs + self.f2


class SfgLayer:
    """Kernel bank ``[K, Cin, kh, kw]`` plus its grouping distribution.

    Batch norm, when enabled, normalises the full-bank output before masking
    (per channel, so one kernel's statistics never depend on another's).
    """

    def __init__(self, in_channels: int, out_channels: int, grouping: GroupingParams,
                 rng: np.random.Generator, kernel_size: int = 3, stride: int = 1,
                 padding: Optional[int] = None, batch_norm: bool = True):
        if grouping.num_kernels != out_channels:
            raise ValueError(f"grouping has {grouping.num_kernels} rows for {out_channels} kernels")
        if out_channels < grouping.num_groups:
            warnings.warn(f"SFG layer with {out_channels} kernels cannot populate all "
                          f"{grouping.num_groups} groups at once", stacklevel=2)
        self.kernels = Tensor(he_normal(rng, (out_channels, in_channels, kernel_size, kernel_size)),
                              requires_grad=True)
        self.grouping = grouping
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        self.batch_norm = batch_norm
        self.gamma = Tensor(np.ones(out_channels), requires_grad=True) if batch_norm else None
        self.beta = Tensor(np.zeros(out_channels), requires_grad=True) if batch_norm else None
        self.stats = ops.RunningStats.zeros(out_channels) if batch_norm else None
        self.mode = "train"

    @property
    def num_kernels(self) -> int:
        return self.kernels.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernels.shape[1]

    def full_bank(self, x: Tensor) -> Tensor:
        y = ops.conv2d(x, self.kernels, stride=self.stride, padding=self.padding)
        if self.batch_norm:
            y = ops.batch_norm(y, self.gamma, self.beta, self.mode, self.stats)
        return y

    def parameters(self) -> dict[str, Tensor]:
        out = {"kernels": self.kernels}
        if self.grouping.trainable:
            out["logits"] = self.grouping.logits
        if self.batch_norm:
            out["bn.gamma"] = self.gamma
            out["bn.beta"] = self.beta
        return out


def _check_sample(layer: SfgLayer, sample: AssignmentSample) -> None:
    if sample.z.shape[0] != layer.num_kernels:
        raise ValueError(f"assignment has {sample.z.shape[0]} rows, layer has {layer.num_kernels} kernels")


def _mask(y: Tensor, sample: AssignmentSample, group: int) -> Tensor:
    return ops.mask_channels(y, sample.z[:, group])


def sfg_forward(layer: SfgLayer, x: Tensor, sample: AssignmentSample) -> FeatureTriple:
    """Full-bank convolution of one input, split into the three groups."""
    _check_sample(layer, sample)
    if x.ndim != 4 or x.shape[1] != layer.in_channels:
        raise ValueError(f"input shape {x.shape} does not match layer with {layer.in_channels} input channels")
    y = layer.full_bank(x)
    return FeatureTriple(_mask(y, sample, TASK1), _mask(y, sample, SHARED), _mask(y, sample, TASK2))


def first_layer_forward(layer: SfgLayer, image: Tensor, sample: AssignmentSample) -> FeatureTriple:
    return sfg_forward(layer, image, sample)


def routed_forward(layer: SfgLayer, inputs: Sequence[Tensor], sample: AssignmentSample,
                   capture: Optional[dict] = None) -> FeatureTriple:
    """Member ``i`` of the triple from the full-bank output of ``inputs[i]``.

    Identical input objects share one convolution. A group whose weights are
    constant zeros yields a constant zero map without convolving. When given,
    ``capture`` receives the unmasked full-bank output per computed group.
    """
    _check_sample(layer, sample)
    cache: dict[int, Tensor] = {}
    members = []
    for group, x in zip((TASK1, SHARED, TASK2), inputs):
        col = sample.z.data[:, group]
        if not sample.z.requires_grad and not np.any(col):
            ref = x.shape
            Ho = (ref[2] + 2 * layer.padding - layer.kernels.shape[2]) // layer.stride + 1
            Wo = (ref[3] + 2 * layer.padding - layer.kernels.shape[3]) // layer.stride + 1
            members.append(Tensor(np.zeros((ref[0], layer.num_kernels, Ho, Wo))))
            continue
        if x.ndim != 4 or x.shape[1] != layer.in_channels:
            raise ValueError(f"input shape {x.shape} does not match layer with "
                             f"{layer.in_channels} input channels")
        y = cache.get(id(x))
        if y is None:
            y = cache[id(x)] = layer.full_bank(x)
        if capture is not None:
            capture[group] = y
        members.append(_mask(y, sample, group))
    return FeatureTriple(*members)


@dataclass
class MergeSpec:
    """How ``[F_task | F_shared]`` is formed: ``sum`` or ``concat_1x1``.

    ``concat_1x1`` concatenates along channels (task first) and maps back to
    the shared width with a 1x1 kernel ``[K, 2K, 1, 1]``.
    """

    mode: str = "sum"
    kernel: Optional[Tensor] = None

    def __post_init__(self) -> None:
        if self.mode not in ("sum", "concat_1x1"):
            raise ValueError(f"unknown merge mode {self.mode!r}")
        if self.mode == "concat_1x1":
            if self.kernel is None:
                raise ValueError("concat_1x1 merge needs a 1x1 kernel")
            k = self.kernel.shape
            if len(k) != 4 or k[1] != 2 * k[0] or k[2:] != (1, 1):
                raise ValueError(f"concat_1x1 kernel must be [K, 2K, 1, 1], got {k}")

    @classmethod
    def concat(cls, channels: int, rng: Optional[np.random.Generator] = None, noise: float = 0.0) -> "MergeSpec":
        """1x1 merge initialised to ``[I | I]``, i.e. starting out as a sum."""
        eye = np.eye(channels)
        w = np.concatenate([eye, eye], axis=1)
        if noise and rng is not None:
            w = w + rng.normal(0.0, noise, size=w.shape)
        return cls("concat_1x1", Tensor(w.reshape(channels, 2 * channels, 1, 1), requires_grad=True))

    def parameters(self) -> dict[str, Tensor]:
        return {"kernel": self.kernel} if self.kernel is not None else {}


def merge(f_task: Tensor, f_shared: Tensor, spec: MergeSpec) -> Tensor:
    if f_task.shape != f_shared.shape:
        raise ValueError(f"cannot merge feature maps of shapes {f_task.shape} and {f_shared.shape}")
    if spec.mode == "sum":
        return f_task + f_shared
    if spec.kernel.shape[0] != f_shared.shape[1]:
        raise ValueError(f"merge kernel {spec.kernel.shape} does not fit {f_shared.shape[1]} channels")
    return ops.conv2d(ops.concat([f_task, f_shared], axis=1), spec.kernel)


def route(prev: FeatureTriple, merges: Sequence[MergeSpec],
          transforms: Sequence[Block]) -> tuple[Tensor, Tensor, Tensor]:
    """Inputs for ``(G1, Gs, G2)`` of the next layer.

    ``merges`` holds the task-1 and task-2 merge specs, ``transforms`` the
    three branch transforms ``(h1, hs, h2)``.
    """
    m1, m2 = merges
    h1, hs, h2 = transforms
    shapes = {prev.f1.shape, prev.fs.shape, prev.f2.shape}
    if len(shapes) != 1:
        raise ValueError(f"feature triple members disagree in shape: {sorted(shapes)}")
    return h1(merge(prev.f1, prev.fs, m1)), hs(prev.fs), h2(merge(prev.f2, prev.fs, m2))


def head_merge(final: FeatureTriple, merges: Sequence[MergeSpec] = (MergeSpec(), MergeSpec())) -> tuple[Tensor, Tensor]:
    """Task features ``[F1 | Fs]`` and ``[F2 | Fs]`` feeding the prediction heads."""
    return merge(final.f1, final.fs, merges[0]), merge(final.f2, final.fs, merges[1])
