"""Scaled-down SFG architectures and the baselines expressed through them.

Every baseline is the same :class:`SfgNet` with a different grouping regime:

==============  =====================================================
single_task     first half of each layer frozen at [1,0,0], rest [0,0,1]
hard_sharing    every kernel frozen at [0,1,0]
constant_mask   contiguous thirds frozen at [1,0,0] / [0,1,0] / [0,0,1]
constant_p      every kernel frozen at [1/3,1/3,1/3], still sampled
cross_stitch    single_task plus a learned 2x2 mix after each SFG layer
sfg             trainable logits (default init [0.2,0.6,0.2])
==============  =====================================================
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .autograd import Tensor, ops
from .blocks import Affine, Block, Chain, Conv, MaxPool, PReLU, ResidualBlock, set_mode
from .concrete import AssignmentSample, GroupingParams, gsm_sample
from .sfg import FeatureTriple, MergeSpec, SfgLayer, head_merge, route, routed_forward

GLOBAL_TASKS = ("regression", "classification")
DENSE_TASKS = ("dense_regression", "segmentation")
TRANSFORMS = ("pool", "residual", "act")

INIT_SCHEMES = {
    "dominantly_shared": (0.2, 0.6, 0.2),
    "dominantly_task": (0.45, 0.1, 0.45),
    "random": None,
    "constant_mask": None,
}
CROSS_STITCH_INIT = ((0.9, 0.1), (0.1, 0.9))


class BaselineKind(str, Enum):
    SINGLE_TASK = "single_task"
    HARD_SHARING = "hard_sharing"
    CONSTANT_MASK = "constant_mask"
    CONSTANT_P = "constant_p"
    CROSS_STITCH = "cross_stitch"
    SFG = "sfg"


@dataclass
class LayerSpec:
    out_channels: int
    kernel_size: int = 3
    transform: str = "pool"
    merge: str = "sum"
    batch_norm: bool = True


@dataclass
class HeadSpec:
    task: str
    out_features: int = 1


@dataclass
class ArchSpec:
    name: str
    in_channels: int
    layers: list[LayerSpec]
    heads: list[HeadSpec] = field(default_factory=list)

    def validate(self) -> None:
        if not self.layers:
            raise ValueError("architecture needs at least one SFG layer")
        if len(self.heads) != 2:
            raise ValueError(f"exactly 2 task heads required, got {len(self.heads)}")
        if self.in_channels < 1:
            raise ValueError("in_channels must be positive")
        for i, l in enumerate(self.layers):
            if l.out_channels < 1 or l.kernel_size < 1:
                raise ValueError(f"layers[{i}]: widths and kernel sizes must be positive")
            if l.transform not in TRANSFORMS:
                raise ValueError(f"layers[{i}].transform: unknown transform {l.transform!r}")
            if l.merge not in ("sum", "concat_1x1"):
                raise ValueError(f"layers[{i}].merge: unknown merge mode {l.merge!r}")
        for i, h in enumerate(self.heads):
            if h.task not in GLOBAL_TASKS + DENSE_TASKS:
                raise ValueError(f"heads[{i}].task: unknown task {h.task!r}")
            if h.out_features < 1:
                raise ValueError(f"heads[{i}].out_features must be positive")
        dense = [h.task in DENSE_TASKS for h in self.heads]
        if any(dense) != all(dense):
            raise ValueError("heads must be both image-level or both dense")

    @property
    def dense(self) -> bool:
        return self.heads[0].task in DENSE_TASKS

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        spec = cls(name=d["name"], in_channels=int(d["in_channels"]),
                   layers=[LayerSpec(**l) for l in d["layers"]],
                   heads=[HeadSpec(**h) for h in d["heads"]])
        spec.validate()
        return spec


def toy_vgg_spec(width_scale: int = 1, in_channels: int = 3) -> ArchSpec:
    """Four 3x3 SFG layers (8s, 16s, 32s, 32s), each followed by PReLU + 2x2 max-pool."""
    if width_scale < 1:
        raise ValueError("width_scale must be >= 1")
    widths = [8, 16, 32, 32]
    return ArchSpec("toy_vgg", in_channels,
                    [LayerSpec(w * width_scale, 3, "pool", "sum") for w in widths],
                    [HeadSpec("regression", 1), HeadSpec("classification", 2)])


def toy_highres_spec(width_scale: int = 1, in_channels: int = 1,
                     heads: Optional[Sequence[HeadSpec]] = None) -> ArchSpec:
    """Five SFG layers at full resolution.

    SFG, residual, SFG, residual, SFG, residual, SFG, SFG, then 1x1 heads.
    Residual junctions merge with a 1x1 convolution over ``[F_task | F_shared]``.
    """
    if width_scale < 1:
        raise ValueError("width_scale must be >= 1")
    s = width_scale
    layers = [LayerSpec(8 * s, 3, "residual", "concat_1x1"),
              LayerSpec(8 * s, 3, "residual", "concat_1x1"),
              LayerSpec(16 * s, 3, "residual", "concat_1x1"),
              LayerSpec(16 * s, 3, "act", "sum"),
              LayerSpec(16 * s, 3, "act", "sum")]
    heads = list(heads) if heads is not None else [HeadSpec("dense_regression", 1), HeadSpec("segmentation", 3)]
    return ArchSpec("toy_highres", in_channels, layers, heads)


def _thirds(K: int) -> np.ndarray:
    p = np.zeros((K, 3))
    for g, idx in enumerate(np.array_split(np.arange(K), 3)):
        p[idx, g] = 1.0
    return p


def _halves(K: int) -> np.ndarray:
    p = np.zeros((K, 3))
    p[:K // 2, 0] = 1.0
    p[K // 2:, 2] = 1.0
    return p


def initial_probs(scheme: str, K: int, rng: np.random.Generator) -> np.ndarray:
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown grouping init scheme {scheme!r}")
    if scheme == "random":
        return rng.dirichlet((1.0, 1.0, 1.0), size=K)
    if scheme == "constant_mask":
        return _thirds(K)
    return np.tile(INIT_SCHEMES[scheme], (K, 1))


def grouping_for(kind: BaselineKind, K: int, rng: np.random.Generator,
                 init: str = "dominantly_shared") -> GroupingParams:
    kind = BaselineKind(kind)
    if kind in (BaselineKind.SINGLE_TASK, BaselineKind.CROSS_STITCH):
        return GroupingParams.from_probs(_halves(K), trainable=False)
    if kind == BaselineKind.HARD_SHARING:
        return GroupingParams.from_probs(np.tile((0.0, 1.0, 0.0), (K, 1)), trainable=False)
    if kind == BaselineKind.CONSTANT_MASK:
        return GroupingParams.from_probs(_thirds(K), trainable=False)
    if kind == BaselineKind.CONSTANT_P:
        return GroupingParams.from_probs(np.full((K, 3), 1.0 / 3.0), trainable=False)
    return GroupingParams.from_probs(initial_probs(init, K, rng), trainable=True)


class Head(Block):
    """Task head: optional transform, then GAP + affine (image-level) or a 1x1 conv (dense)."""

    def __init__(self, spec: HeadSpec, channels: int, transform: Block, rng: np.random.Generator):
        self.spec = spec
        self.transform = transform
        if spec.task in DENSE_TASKS:
            self.out = Conv(channels, spec.out_features, 1, rng, bias=True)
        else:
            self.out = Affine(channels, spec.out_features, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = self.transform(x)
        if self.spec.task in GLOBAL_TASKS:
            x = ops.global_avg_pool(x)
        return self.out(x)

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.out.parameters())


@dataclass
class Junction:
    merges: tuple[MergeSpec, MergeSpec]
    transforms: tuple[Block, Block, Block]
    residuals: Optional[tuple[ResidualBlock, ResidualBlock, ResidualBlock]] = None


class SfgNet:
    """A two-task CNN whose convolution layers are SFG modules."""

    def __init__(self, arch: ArchSpec, kind: BaselineKind, rng: np.random.Generator,
                 init: str = "dominantly_shared"):
        arch.validate()
        self.arch = arch
        self.kind = BaselineKind(kind)
        self.layers: list[SfgLayer] = []
        self.acts: list[PReLU] = []
        self.junctions: list[Junction] = []
        cin = arch.in_channels
        for ls in arch.layers:
            K = ls.out_channels
            if self.kind == BaselineKind.CROSS_STITCH and K % 2:
                raise ValueError("cross-stitch needs an even number of kernels per layer")
            grouping = grouping_for(self.kind, K, rng, init)
            self.layers.append(SfgLayer(cin, K, grouping, rng, ls.kernel_size, batch_norm=ls.batch_norm))
            self.acts.append(PReLU(K))
            cin = K
        for i, ls in enumerate(arch.layers[:-1]):
            self.junctions.append(self._junction(ls, self.acts[i], rng))
        last = arch.layers[-1]
        K = last.out_channels
        self.final_merges = (MergeSpec(), MergeSpec())
        self.heads = [Head(hs, K, self._head_transform(last, self.acts[-1]), rng) for hs in arch.heads]
        self.cross_stitch: Optional[list[Tensor]] = None
        if self.kind == BaselineKind.CROSS_STITCH:
            self.cross_stitch = [Tensor(np.array(CROSS_STITCH_INIT), requires_grad=True) for _ in self.layers]

    @staticmethod
    def _junction(ls: LayerSpec, act: PReLU, rng: np.random.Generator) -> Junction:
        K = ls.out_channels
        merges = (MergeSpec.concat(K), MergeSpec.concat(K)) if ls.merge == "concat_1x1" else (MergeSpec(), MergeSpec())
        if ls.transform == "pool":
            h = Chain(act, MaxPool(2))
            return Junction(merges, (h, h, h))
        if ls.transform == "act":
            return Junction(merges, (act, act, act))
        res = tuple(ResidualBlock(K, rng) for _ in range(3))
        return Junction(merges, tuple(Chain(act, r) for r in res), res)

    @staticmethod
    def _head_transform(ls: LayerSpec, act: PReLU) -> Block:
        if ls.transform == "pool":
            return Chain(act, MaxPool(2))
        return act

    # -- sampling ---------------------------------------------------------
    def sample(self, tau: float, rng: np.random.Generator, hard: bool = False) -> list[AssignmentSample]:
        return [gsm_sample(l.grouping, tau, rng, hard) for l in self.layers]

    def replay(self, samples: Sequence[AssignmentSample]) -> list[AssignmentSample]:
        """Redraw with the same Gumbel noise under the current logits."""
        return [gsm_sample(l.grouping, s.tau, hard=s.hard, gumbel=s.gumbel) for l, s in zip(self.layers, samples)]

    def grouping_probs(self) -> list[np.ndarray]:
        return [l.grouping.probs_array() for l in self.layers]

    # -- forward ----------------------------------------------------------
    def _stitch(self, i: int, triple: FeatureTriple) -> FeatureTriple:
        alpha = self.cross_stitch[i]
        K = triple.f1.shape[1]
        h = K // 2
        a1 = triple.f1[:, :h]
        a2 = triple.f2[:, h:]
        n1 = alpha[0, 0] * a1 + alpha[0, 1] * a2
        n2 = alpha[1, 0] * a1 + alpha[1, 1] * a2
        zeros = Tensor(np.zeros(a1.shape))
        return FeatureTriple(ops.concat([n1, zeros], axis=1), triple.fs, ops.concat([zeros, n2], axis=1))

    def features(self, x: Tensor, samples: Sequence[AssignmentSample],
                 capture: Optional[dict] = None) -> FeatureTriple:
        """Final-layer feature triple; ``capture`` collects per-layer triples and branch outputs."""
        if len(samples) != len(self.layers):
            raise ValueError(f"need {len(self.layers)} assignment samples, got {len(samples)}")
        inputs = (x, x, x)
        triple = None
        for i, layer in enumerate(self.layers):
            branch = {} if capture is not None else None
            triple = routed_forward(layer, inputs, samples[i], branch)
            if self.cross_stitch is not None:
                triple = self._stitch(i, triple)
            if capture is not None:
                capture[i] = {"triple": triple, "full_bank": branch}
            if i + 1 < len(self.layers):
                j = self.junctions[i]
                inputs = route(triple, j.merges, j.transforms)
        return triple

    def forward(self, x: Tensor, samples: Sequence[AssignmentSample],
                capture: Optional[dict] = None) -> tuple[Tensor, Tensor]:
        triple = self.features(x, samples, capture)
        f1, f2 = head_merge(triple, self.final_merges)
        return self.heads[0](f1), self.heads[1](f2)

    __call__ = forward

    # -- parameters -------------------------------------------------------
    def parameters(self) -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for i, layer in enumerate(self.layers):
            for k, v in layer.parameters().items():
                out[f"sfg{i}.{k}"] = v
            out[f"sfg{i}.act.slope"] = self.acts[i].slope
        for i, j in enumerate(self.junctions):
            for t, m in zip(("merge1", "merge2"), j.merges):
                for k, v in m.parameters().items():
                    out[f"junction{i}.{t}.{k}"] = v
            if j.residuals is not None:
                for t, r in zip(("res1", "res_s", "res2"), j.residuals):
                    for k, v in r.parameters().items():
                        out[f"junction{i}.{t}.{k}"] = v
        for t, head in enumerate(self.heads, start=1):
            for k, v in head.parameters().items():
                out[f"head{t}.{k}"] = v
        if self.cross_stitch is not None:
            for i, a in enumerate(self.cross_stitch):
                out[f"cs{i}.alpha"] = a
        return out

    def sfg_parameter_names(self) -> list[str]:
        return [f"sfg{i}.kernels" for i in range(len(self.layers))]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.parameters().items())

    def load_state_dict(self, state: dict, strict: bool = True) -> list[str]:
        """Copy matching entries in; returns the names that were skipped."""
        params = self.parameters()
        if strict:
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            if missing or extra:
                raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        skipped = []
        for k, p in params.items():
            if k not in state or np.shape(state[k]) != p.shape:
                if strict:
                    raise ValueError(f"{k}: shape {np.shape(state.get(k))} does not match {p.shape}")
                skipped.append(k)
                continue
            p.data = np.array(state[k], dtype=np.float64, copy=True)
        return skipped

    def set_mode(self, mode: str) -> None:
        for layer in self.layers:
            layer.mode = mode
        for j in self.junctions:
            for h in j.transforms:
                set_mode(h, mode)


def build(arch: ArchSpec, kind, rng: np.random.Generator, init: str = "dominantly_shared") -> SfgNet:
    try:
        kind = BaselineKind(kind)
    except ValueError:
        raise ValueError(f"unknown baseline kind {kind!r}; expected one of "
                         f"{[k.value for k in BaselineKind]}") from None
    return SfgNet(arch, kind, rng, init)
