"""Training loop, Monte-Carlo inference and evaluation metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .autograd import NonFiniteError, Tensor, backward, no_grad, save_params
from .concrete import TempSchedule, temperature
from .data import BatchLoader, SynthTaskPair
from .models import SfgNet
from .objective import (DEFAULT_LAMBDA1, DEFAULT_LAMBDA2, LossTerms, kl_surrogate, loss_for_head,
                        total_loss)

STEP_LOG_COLUMNS = ("step", "tau", "nll1", "nll2", "weight_l2", "entropy_sum", "total")
PSNR_CAP = 99.0
EVAL_CHUNK = 256


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    n_train: int = 4096
    batch_size: int = 32
    steps: int = 1000
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    logit_lr: Optional[float] = None
    lambda1: float = DEFAULT_LAMBDA1
    lambda2: float = DEFAULT_LAMBDA2
    anneal_rate: float = 1e-5
    tau_floor: float = 0.10
    mc_passes: int = 50
    mc_hard: bool = False
    samples_per_step: int = 1
    data_seed: int = 0
    model_seed: int = 0
    sampler_seed: int = 0
    eval_every: int = 100
    detach_likelihood: bool = False

    def __post_init__(self) -> None:
        self.betas = tuple(float(b) for b in self.betas)
        self.validate()

    def validate(self) -> None:
        for name in ("n_train", "batch_size", "steps", "mc_passes", "samples_per_step", "eval_every"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.batch_size > self.n_train:
            raise ValueError(f"batch_size ({self.batch_size}) exceeds n_train ({self.n_train})")
        if self.lr < 0 or (self.logit_lr is not None and self.logit_lr < 0):
            raise ValueError("learning rates must be non-negative")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be non-negative")
        if self.anneal_rate <= 0 or self.tau_floor <= 0:
            raise ValueError("anneal_rate and tau_floor must be positive")

    @property
    def schedule(self) -> TempSchedule:
        return TempSchedule(self.anneal_rate, self.tau_floor)

    @property
    def final_tau(self) -> float:
        return temperature(self.schedule, self.steps - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# -- optimiser ---------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float, betas=(0.9, 0.999),
              eps: float = 1e-8, lr_for: Optional[Callable[[str], float]] = None) -> None:
    """One bias-corrected Adam update of every parameter that has a gradient."""
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.shape:
            raise ValueError(f"optimiser state for {name} has shape {m.shape}, parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = lr_for(name) if lr_for is not None else lr
        p.data = p.data - step * (m / c1) / (np.sqrt(v / c2) + eps)


# -- one step ----------------------------------------------------------------

def targets_for(model: SfgNet, batch: SynthTaskPair) -> tuple[np.ndarray, np.ndarray]:
    out = []
    for h in model.arch.heads:
        out.append(batch.target_reg if h.task in ("regression", "dense_regression") else batch.target_cls)
    return out[0], out[1]


def _lr_for(cfg: TrainConfig):
    if cfg.logit_lr is None:
        return None
    return lambda name: cfg.logit_lr if name.endswith(".logits") else cfg.lr


def train_step(model: SfgNet, batch: SynthTaskPair, cfg: TrainConfig, t: int,
               rng: np.random.Generator, adam: Optional[AdamState] = None,
               n_total: Optional[int] = None) -> LossTerms:
    """Sample assignments at tau(t), evaluate the objective, backprop and apply Adam."""
    if t < 0:
        raise ValueError("step must be non-negative")
    adam = adam if adam is not None else AdamState()
    n_total = cfg.n_train if n_total is None else n_total
    tau = temperature(cfg.schedule, t)
    params = model.parameters()
    model.zero_grad()
    y1, y2 = targets_for(model, batch)
    x = Tensor(batch.images)
    try:
        nll1 = nll2 = None
        for _ in range(cfg.samples_per_step):
            o1, o2 = model(x, model.sample(tau, rng))
            l1 = loss_for_head(model.arch.heads[0].task, o1, y1)
            l2 = loss_for_head(model.arch.heads[1].task, o2, y2)
            nll1 = l1 if nll1 is None else nll1 + l1
            nll2 = l2 if nll2 is None else nll2 + l2
        if cfg.samples_per_step > 1:
            nll1 = nll1 * (1.0 / cfg.samples_per_step)
            nll2 = nll2 * (1.0 / cfg.samples_per_step)
        if cfg.detach_likelihood:
            nll1, nll2 = nll1.detach(), nll2.detach()
        kl = kl_surrogate(model.layers, cfg.lambda1, cfg.lambda2)
        loss = total_loss(nll1, nll2, kl, n_total, len(batch))
        backward(loss)
    except NonFiniteError as e:
        raise TrainingError(f"non-finite value at step {t} (tau={tau:.6g}): {e}") from e
    adam_step(params, adam, cfg.lr, cfg.betas, cfg.adam_eps, _lr_for(cfg))
    return LossTerms(nll1.item(), nll2.item(), kl.weight_l2.item(), kl.entropy_sum.item(), loss.item())


# -- Monte-Carlo inference ---------------------------------------------------

@dataclass
class McPrediction:
    task1: np.ndarray
    task2: np.ndarray
    passes: Optional[list[tuple[np.ndarray, np.ndarray]]] = None


def vote_mode(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Most frequent label along axis 0; ties go to the smallest label."""
    counts = np.zeros((num_classes,) + labels.shape[1:], dtype=np.int64)
    for c in range(num_classes):
        counts[c] = (labels == c).sum(axis=0)
    return counts.argmax(axis=0)


def _head_output(task: str, out: np.ndarray) -> np.ndarray:
    if task in ("classification", "segmentation"):
        return out.argmax(axis=1)
    if task == "regression":
        return out.reshape(len(out))
    return out


def _forward_chunked(model: SfgNet, images: np.ndarray, samples, chunk: int):
    o1, o2 = [], []
    for s in range(0, len(images), chunk):
        a, b = model(Tensor(images[s:s + chunk]), samples)
        o1.append(a.data)
        o2.append(b.data)
    return np.concatenate(o1), np.concatenate(o2)


def mc_infer(model: SfgNet, images: np.ndarray, passes: int, tau: float, rng: np.random.Generator,
             hard: bool = False, chunk: int = EVAL_CHUNK, record: bool = False) -> McPrediction:
    """Aggregate ``passes`` stochastic forwards: running mean or per-pass vote.

    One assignment is drawn per pass and shared by the whole input set.
    Batch norm always normalises with the statistics of each ``chunk``.
    """
    if passes < 1:
        raise ValueError("passes must be >= 1")
    tasks = [h.task for h in model.arch.heads]
    means: list[Optional[np.ndarray]] = [None, None]
    votes: list[list[np.ndarray]] = [[], []]
    recorded = [] if record else None
    with no_grad():
        for k in range(1, passes + 1):
            outs = _forward_chunked(model, images, model.sample(tau, rng, hard), chunk)
            per_pass = tuple(_head_output(t, o) for t, o in zip(tasks, outs))
            if record:
                recorded.append(per_pass)
            for i, (task, y) in enumerate(zip(tasks, per_pass)):
                if task in ("classification", "segmentation"):
                    votes[i].append(y)
                elif means[i] is None:
                    means[i] = y.copy()
                else:
                    # incremental mean: identical passes leave the value bit-exact
                    means[i] = means[i] + (y - means[i]) / k
    result = []
    for i, task in enumerate(tasks):
        if task in ("classification", "segmentation"):
            result.append(vote_mode(np.stack(votes[i]), model.arch.heads[i].out_features))
        else:
            result.append(means[i])
    return McPrediction(result[0], result[1], recorded)


# -- metrics -----------------------------------------------------------------

def mae(pred, target) -> float:
    pred, target = _pair(pred, target)
    return float(np.mean(np.abs(pred - target)))


def accuracy(pred, target) -> float:
    pred, target = _pair(pred, target)
    return float(np.mean(pred == target))


def psnr(pred, target, value_range: float) -> float:
    pred, target = _pair(pred, target)
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(value_range ** 2 / mse))


def dice_per_class(pred, target, num_classes: int) -> np.ndarray:
    """``2|A n B| / (|A| + |B|)`` per class; 1.0 when a class is absent from both."""
    pred, target = _pair(pred, target)
    out = np.empty(num_classes)
    for c in range(num_classes):
        a, b = pred == c, target == c
        denom = a.sum() + b.sum()
        out[c] = 1.0 if denom == 0 else 2.0 * np.logical_and(a, b).sum() / denom
    return out


def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.size == 0 or target.size == 0:
        raise ValueError("cannot compute a metric on empty input")
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match target shape {target.shape}")
    return pred, target


def metrics(pred, target, task: str, value_range: float = 1.0, num_classes: int = 2) -> dict[str, float]:
    if task == "regression":
        return {"mae": mae(pred, target)}
    if task == "dense_regression":
        return {"mae": mae(pred, target), "psnr": psnr(pred, target, value_range)}
    if task == "classification":
        return {"accuracy": accuracy(pred, target)}
    if task == "segmentation":
        d = dice_per_class(pred, target, num_classes)
        out = {"accuracy": accuracy(pred, target), "dice_mean_fg": float(d[1:].mean())}
        out.update({f"dice_{c}": float(v) for c, v in enumerate(d)})
        return out
    raise ValueError(f"unknown task kind {task!r}")


def evaluate(model: SfgNet, ds: SynthTaskPair, passes: int, tau: float, rng: np.random.Generator,
             hard: bool = False) -> dict[str, float]:
    model.set_mode("eval")
    try:
        pred = mc_infer(model, ds.images, passes, tau, rng, hard)
    finally:
        model.set_mode("train")
    y1, y2 = targets_for(model, ds)
    out = {}
    for i, (head, p, y) in enumerate(zip(model.arch.heads, (pred.task1, pred.task2), (y1, y2)), start=1):
        y = np.asarray(y)
        if head.task == "regression":
            y = y.reshape(len(y))
        for k, v in metrics(p, y, head.task, ds.value_range, head.out_features).items():
            out[f"task{i}_{k}"] = v
    return out


def selection_score(model: SfgNet, m: dict[str, float]) -> float:
    """Scalar validation score, higher is better, used for best-checkpoint selection."""
    score = 0.0
    for i, head in enumerate(model.arch.heads, start=1):
        if head.task == "regression":
            score -= m[f"task{i}_mae"]
        elif head.task == "dense_regression":
            score += m[f"task{i}_psnr"] / 100.0
        elif head.task == "classification":
            score += m[f"task{i}_accuracy"]
        else:
            score += m[f"task{i}_dice_mean_fg"]
    return score


# -- snapshots and fitting ---------------------------------------------------

def grouping_snapshot(model: SfgNet, step: int) -> dict:
    from .analysis import snapshot_from_probs
    return snapshot_from_probs(step, model.grouping_probs()).to_dict()


@dataclass
class FitResult:
    log: list[dict]
    final_metrics: dict[str, float] = field(default_factory=dict)
    best_step: Optional[int] = None
    best_score: Optional[float] = None


def _eval_rng(cfg: TrainConfig, step: int) -> np.random.Generator:
    # independent of the training sampler so evaluation never perturbs training
    return np.random.default_rng([cfg.sampler_seed, 0xE7A1, step])


def fit(model: SfgNet, train_ds: SynthTaskPair, cfg: TrainConfig, run_dir=None,
        val_ds: Optional[SynthTaskPair] = None, log_snapshots: bool = True,
        val_passes: Optional[int] = None,
        progress: Optional[Callable[[int, LossTerms], None]] = None) -> FitResult:
    """Fixed-step training with optional CSV log, snapshots and best-by-validation checkpoint."""
    if len(train_ds) < cfg.batch_size:
        raise ValueError(f"dataset has {len(train_ds)} examples, fewer than batch size {cfg.batch_size}")
    loader = iter(BatchLoader(train_ds, cfg.batch_size, cfg.data_seed))
    rng = np.random.default_rng(cfg.sampler_seed)
    adam = AdamState()
    run = Path(run_dir) if run_dir is not None else None
    writer = fh = None
    if run is not None:
        (run / "checkpoints").mkdir(parents=True, exist_ok=True)
        if log_snapshots:
            (run / "snapshots").mkdir(exist_ok=True)
        fh = open(run / "steps.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(STEP_LOG_COLUMNS)
    result = FitResult(log=[])
    try:
        if run is not None and log_snapshots:
            _write_snapshot(run, model, 0)
        for t in range(cfg.steps):
            terms = train_step(model, next(loader), cfg, t, rng, adam, len(train_ds))
            row = {"step": t, "tau": temperature(cfg.schedule, t), **{
                "nll1": terms.nll_task1, "nll2": terms.nll_task2, "weight_l2": terms.weight_l2,
                "entropy_sum": terms.entropy_sum, "total": terms.total}}
            result.log.append(row)
            if writer is not None:
                writer.writerow([t] + [repr(float(row[c])) for c in STEP_LOG_COLUMNS[1:]])
            if progress is not None:
                progress(t, terms)
            done = t + 1
            if done % cfg.eval_every == 0 or done == cfg.steps:
                if run is not None and log_snapshots:
                    _write_snapshot(run, model, done)
                if val_ds is not None:
                    m = evaluate(model, val_ds, val_passes or cfg.mc_passes, temperature(cfg.schedule, t),
                                 _eval_rng(cfg, done), cfg.mc_hard)
                    score = selection_score(model, m)
                    if result.best_score is None or score > result.best_score:
                        result.best_score, result.best_step = score, done
                        if run is not None:
                            save_params(run / "checkpoints" / "best.ckpt", model.state_dict())
        if run is not None:
            save_params(run / "checkpoints" / "final.ckpt", model.state_dict())
    finally:
        if fh is not None:
            fh.close()
    return result


def _write_snapshot(run: Path, model: SfgNet, step: int) -> None:
    path = run / "snapshots" / f"step_{step:06d}.json"
    path.write_text(json.dumps(grouping_snapshot(model, step), sort_keys=True) + "\n")


def read_step_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and tuple(rows[0].keys()) != STEP_LOG_COLUMNS:
        raise ValueError(f"{path}: unexpected columns {list(rows[0].keys())}")
    return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in rows]
