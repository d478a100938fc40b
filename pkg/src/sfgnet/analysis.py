"""Grouping analysis: snapshots, proportion/trajectory CSVs, activation export and experiments."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autograd import Tensor, load_params, no_grad
from .concrete import GROUPS, fixed_sample

PROPORTION_COLUMNS = ("step", "layer", "sum_p1", "sum_ps", "sum_p2")
TRAJECTORY_COLUMNS = ("step", "layer", "kernel", "p1", "ps", "p2")
DEFAULT_ENTROPY_QUANTILE = 0.2
SWEEP_SCHEMES = ("dominantly_shared", "dominantly_task", "random", "constant_mask")


def _row_entropy(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return np.clip(-terms.sum(axis=1), 0.0, math.log(p.shape[1]))


def class_sums(p: np.ndarray) -> list[float]:
    """Column sums accumulated kernel by kernel, the same way CSV re-aggregation does."""
    sums = [0.0] * p.shape[1]
    for row in p:
        for g, v in enumerate(row):
            sums[g] += float(v)
    return sums


@dataclass
class GroupingSnapshot:
    step: int
    probs: list[np.ndarray]

    @property
    def sums(self) -> list[list[float]]:
        return [class_sums(p) for p in self.probs]

    @property
    def entropies(self) -> list[np.ndarray]:
        return [_row_entropy(p) for p in self.probs]

    def to_dict(self) -> dict:
        return {"step": self.step,
                "layers": [{"probs": p.tolist(), "sums": s, "entropy": e.tolist()}
                           for p, s, e in zip(self.probs, self.sums, self.entropies)]}

    @classmethod
    def from_dict(cls, d: dict) -> "GroupingSnapshot":
        return cls(int(d["step"]), [np.array(l["probs"], dtype=np.float64) for l in d["layers"]])


def snapshot_from_probs(step: int, probs: Sequence[np.ndarray]) -> GroupingSnapshot:
    return GroupingSnapshot(step, [np.array(p, dtype=np.float64) for p in probs])


def load_snapshots(run_dir) -> list[GroupingSnapshot]:
    snap_dir = Path(run_dir) / "snapshots"
    files = sorted(snap_dir.glob("step_*.json")) if snap_dir.is_dir() else []
    if not files:
        raise FileNotFoundError(f"no grouping snapshots found under {snap_dir}")
    return [GroupingSnapshot.from_dict(json.loads(f.read_text())) for f in files]


# -- proportions / trajectory ------------------------------------------------

def proportion_rows(snapshots: Sequence[GroupingSnapshot]) -> list[tuple]:
    return [(s.step, l, *sums) for s in snapshots for l, sums in enumerate(s.sums)]


def trajectory_rows(snapshots: Sequence[GroupingSnapshot]) -> list[tuple]:
    return [(s.step, l, k, *map(float, row))
            for s in snapshots for l, p in enumerate(s.probs) for k, row in enumerate(p)]


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def analyze_grouping(run_dir, out_dir=None) -> tuple[Path, Path]:
    """Write ``proportions.csv`` and ``trajectory.csv`` for every snapshot of a run."""
    snaps = load_snapshots(run_dir)
    out = Path(out_dir) if out_dir is not None else Path(run_dir) / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    prop, traj = out / "proportions.csv", out / "trajectory.csv"
    _write_csv(prop, PROPORTION_COLUMNS, proportion_rows(snaps))
    _write_csv(traj, TRAJECTORY_COLUMNS, trajectory_rows(snaps))
    return prop, traj


def aggregate_trajectory(path) -> list[tuple]:
    """Rebuild proportion rows from a trajectory CSV."""
    acc: dict[tuple[int, int], list[float]] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            key = (int(r["step"]), int(r["layer"]))
            sums = acc.setdefault(key, [0.0, 0.0, 0.0])
            for g, col in enumerate(("p1", "ps", "p2")):
                sums[g] += float(r[col])
    return [(step, layer, *sums) for (step, layer), sums in acc.items()]


def read_proportions(path) -> list[tuple]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["step"]), int(r["layer"]), float(r["sum_p1"]), float(r["sum_ps"]), float(r["sum_p2"]))
            for r in rows]


def layer_summary(probs: Sequence[np.ndarray]) -> list[dict]:
    """Per-layer means of p, mean entropy and mean |p1 - p2|."""
    out = []
    for l, p in enumerate(probs):
        out.append({"layer": l, "kernels": int(len(p)),
                    "mean_p1": float(p[:, 0].mean()), "mean_ps": float(p[:, 1].mean()),
                    "mean_p2": float(p[:, 2].mean()), "mean_entropy": float(_row_entropy(p).mean()),
                    "mean_abs_p1_minus_p2": float(np.abs(p[:, 0] - p[:, 2]).mean())})
    return out


# -- activations -------------------------------------------------------------

def argmax_samples(probs: Sequence[np.ndarray]):
    """Deterministic hard assignment: every kernel goes to its most probable group."""
    out = []
    for p in probs:
        z = np.zeros_like(p)
        z[np.arange(len(p)), p.argmax(axis=1)] = 1.0
        out.append(fixed_sample(z))
    return out


def _tile(maps: np.ndarray) -> np.ndarray:
    """Arrange ``[B, H, W]`` maps in a near-square grid scaled to 0..255."""
    b, h, w = maps.shape
    cols = int(math.ceil(math.sqrt(b)))
    rows = int(math.ceil(b / cols))
    grid = np.zeros((rows * (h + 1) - 1, cols * (w + 1) - 1))
    lo, hi = float(maps.min()), float(maps.max())
    scaled = (maps - lo) / (hi - lo) if hi > lo else np.zeros_like(maps)
    for i in range(b):
        r, c = divmod(i, cols)
        grid[r * (h + 1):r * (h + 1) + h, c * (w + 1):c * (w + 1) + w] = scaled[i]
    return np.round(grid * 255.0).astype(np.uint8)


def export_activations(model, images: np.ndarray, out_dir, entropy_quantile: float = DEFAULT_ENTROPY_QUANTILE) -> list[dict]:
    """Dump per-kernel activation maps grouped by argmax group and entropy band.

    Files are ``layer{l}/{group}/kernel{k:03d}_{low|high}.png`` plus a ``.npy``
    with the raw ``[B, H, W]`` maps. "low" means entropy at or below the
    layer's ``entropy_quantile``.
    """
    from PIL import Image

    if not 0.0 <= entropy_quantile <= 1.0:
        raise ValueError("entropy_quantile must be in [0, 1]")
    out = Path(out_dir)
    probs = model.grouping_probs()
    capture: dict = {}
    model.set_mode("eval")
    try:
        with no_grad():
            model.forward(Tensor(images), argmax_samples(probs), capture=capture)
    finally:
        model.set_mode("train")
    index = []
    for l, p in enumerate(probs):
        ent = _row_entropy(p)
        cut = float(np.quantile(ent, entropy_quantile))
        groups = p.argmax(axis=1)
        for g in GROUPS:
            (out / f"layer{l}" / g).mkdir(parents=True, exist_ok=True)
        members = capture[l]["triple"].members()
        for k in range(len(p)):
            g = int(groups[k])
            band = "low" if ent[k] <= cut else "high"
            maps = members[g].data[:, k]
            stem = out / f"layer{l}" / GROUPS[g] / f"kernel{k:03d}_{band}"
            np.save(stem.with_suffix(".npy"), maps)
            Image.fromarray(_tile(maps), mode="L").save(stem.with_suffix(".png"))
            index.append({"layer": l, "kernel": k, "group": GROUPS[g], "entropy": float(ent[k]), "band": band})
    (out / "index.json").write_text(json.dumps(index, indent=1) + "\n")
    return index


# -- experiments -------------------------------------------------------------

def run_experiment(cfg, run_dir=None, progress=None):
    """Build data and model from an experiment config, train, and evaluate on the test split.

    Returns ``(model, fit_result, test_metrics)``.
    """
    from .models import build
    from .train import evaluate, fit

    train_ds, val_ds, test_ds = make_splits(cfg)
    model = build(cfg.arch_spec(), cfg.kind, np.random.default_rng(cfg.train.model_seed), cfg.init)
    run = Path(run_dir) if run_dir is not None else None
    if run is not None:
        run.mkdir(parents=True, exist_ok=True)
        cfg.dump(run / "config.yaml")
    result = fit(model, train_ds, cfg.train, run, val_ds, val_passes=cfg.val_passes, progress=progress)
    if run is not None and (run / "checkpoints" / "best.ckpt").exists():
        best = build(cfg.arch_spec(), cfg.kind, np.random.default_rng(cfg.train.model_seed), cfg.init)
        best.load_state_dict(load_params(run / "checkpoints" / "best.ckpt"))
        eval_model = best
    else:
        eval_model = model
    test = evaluate(eval_model, test_ds, cfg.train.mc_passes, cfg.train.final_tau,
                    np.random.default_rng([cfg.train.sampler_seed, 0x7E57]), cfg.train.mc_hard)
    result.final_metrics = test
    if run is not None:
        (run / "metrics.json").write_text(json.dumps(
            {"test": test, "best_step": result.best_step,
             "final_layers": layer_summary(model.grouping_probs())}, indent=1, sort_keys=True) + "\n")
    return model, result, test


def make_splits(cfg):
    """Train / validation / test splits. A dataset ``path`` replaces the generated train split."""
    from . import data as datamod

    d = cfg.dataset
    if d.path:
        train_ds = datamod.load(d.path)
        if len(train_ds) < cfg.train.n_train:
            raise ValueError(f"{d.path}: holds {len(train_ds)} examples, config asks for {cfg.train.n_train}")
        train_ds = train_ds.subset(np.arange(cfg.train.n_train))
    else:
        train_ds = datamod.generate(d.kind, cfg.train.n_train, d.height, d.width, d.seed)
    # disjoint seed streams for the held-out splits
    val_ds = datamod.generate(d.kind, d.n_val, d.height, d.width, d.seed + 1_000_003)
    test_ds = datamod.generate(d.kind, d.n_test, d.height, d.width, d.seed + 2_000_003)
    return train_ds, val_ds, test_ds


def proportion_matrix(probs: Sequence[np.ndarray]) -> list[np.ndarray]:
    return [np.array(class_sums(p)) for p in probs]


def pairwise_l1(reports: dict[str, list[np.ndarray]]) -> dict[str, list[float]]:
    names = list(reports)
    out = {}
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            out[f"{a}|{b}"] = [float(np.abs(x - y).sum()) for x, y in zip(reports[a], reports[b])]
    return out


def init_sweep(base_cfg, out_dir, schemes: Sequence[str] = SWEEP_SCHEMES, progress=None) -> dict:
    """Train one sfg model per initialisation scheme and compare final proportions."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    finals: dict[str, list[np.ndarray]] = {}
    initial_entropy: dict[str, list[float]] = {}
    for scheme in schemes:
        cfg = base_cfg.with_seed(base_cfg.train.model_seed)
        cfg.kind, cfg.init = "sfg", scheme
        model, _, _ = run_experiment(cfg, out / scheme, progress)
        snaps = load_snapshots(out / scheme)
        initial_entropy[scheme] = [float(e.mean()) for e in snaps[0].entropies]
        finals[scheme] = proportion_matrix(model.grouping_probs())
    widths = [len(p) for p in model.grouping_probs()]
    report = {"schemes": list(schemes), "kernels_per_layer": widths,
              "final_proportions": {s: [v.tolist() for v in finals[s]] for s in schemes},
              "initial_mean_entropy": initial_entropy,
              "pairwise_l1": pairwise_l1(finals)}
    (out / "report.json").write_text(json.dumps(report, indent=1) + "\n")
    _write_csv(out / "final_proportions.csv", ("scheme", "layer", "sum_p1", "sum_ps", "sum_p2"),
               [(s, l, *map(float, v)) for s in schemes for l, v in enumerate(finals[s])])
    return report


def duplicate_config(base_cfg):
    """Same config, with both heads trained on the dense regression target."""
    cfg = base_cfg.with_seed(base_cfg.train.model_seed)
    cfg.kind = "sfg"
    cfg.dataset.kind = "scans"
    if cfg.arch.layers is None:
        cfg.arch.preset = "toy_highres"
    cfg.arch.heads = [{"task": "dense_regression", "out_features": 1},
                      {"task": "dense_regression", "out_features": 1}]
    cfg.arch.build_spec()
    return cfg


def duplicate_task(base_cfg, out_dir, seeds: Sequence[int] = (0,), progress=None) -> dict:
    """Train with two copies of one dense regression task and report per-layer grouping."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = []
    for seed in seeds:
        cfg = duplicate_config(base_cfg).with_seed(seed)
        model, _, test = run_experiment(cfg, out / f"seed{seed}", progress)
        runs.append({"seed": seed, "test": test, "layers": layer_summary(model.grouping_probs())})
    report = {"runs": runs}
    (out / "report.json").write_text(json.dumps(report, indent=1) + "\n")
    return report


def load_run_model(run_dir, checkpoint: str = "final"):
    """Rebuild a model from ``config.yaml`` and a checkpoint inside a run directory."""
    from .config import load_config
    from .models import build

    run = Path(run_dir)
    cfg = load_config(run / "config.yaml")
    ckpt = run / "checkpoints" / f"{checkpoint}.ckpt"
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model = build(cfg.arch_spec(), cfg.kind, np.random.default_rng(cfg.train.model_seed), cfg.init)
    model.load_state_dict(load_params(ckpt))
    return cfg, model


__all__ = [
    "GroupingSnapshot", "analyze_grouping", "aggregate_trajectory", "export_activations",
    "init_sweep", "duplicate_task", "layer_summary", "load_run_model", "make_splits", "run_experiment",
]
