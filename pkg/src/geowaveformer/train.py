"""Training: relative-MSE loss through full roll-outs, Adam, step decay."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import DataError, Dataset, NormStats, normalize
from .rollout import RolloutDivergence, predict_steps, to_numpy
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingDivergence(FloatingPointError):
    def __init__(self, message: str, epoch: int | None = None, trajectory: int | None = None):
        self.epoch, self.trajectory = epoch, trajectory
        super().__init__(message)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    decay: float = 0.6
    decay_every: int = 5
    epochs: int = 100
    batch_size: int = 1
    rollout: int = 20  # n
    window: int = 10  # k
    seed: int = 0
    teacher_forcing: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    shuffle: bool = True
    val_every: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.window < 2 or self.rollout < 1:
            raise ValueError("need window k >= 2 and roll-out n >= 1")
        if self.batch_size != 1:
            raise ValueError("only batch size 1 (one trajectory per update) is supported")
        if not 1e-4 <= self.lr <= 1e-3:
            log.warning("learning rate %.3g is outside the usual range [1e-4, 1e-3]", self.lr)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr * config.decay ** (epoch // config.decay_every)


# -- metric ---------------------------------------------------------------

def relative_mse(pred, truth) -> float:
    """``100 * ||pred - truth||^2 / ||truth||^2`` over all entries."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"relative_mse: shapes differ, {pred.shape} vs {truth.shape}")
    denom = float(np.sum(truth * truth))
    if denom == 0.0:
        raise ValueError("relative_mse: reference field has zero norm")
    return 100.0 * float(np.sum((pred - truth) ** 2)) / denom


def relative_mse_loss(preds, truth: np.ndarray, stats: NormStats | None = None) -> Tensor:
    """Differentiable relative MSE (as a fraction) of a list of predicted
    fields against ``truth`` (steps, N, d). With ``stats`` predictions are
    mapped to physical units first; ``truth`` must already be physical."""
    truth = np.asarray(truth)
    denom = float(np.sum(truth * truth))
    if denom == 0.0:
        raise ValueError("relative_mse: reference field has zero norm")
    p = T.stack(list(preds), axis=0)
    if stats is not None:
        p = T.add(T.mul(p, stats.std.astype(p.dtype)), stats.mean.astype(p.dtype))
    diff = T.sub(p, truth.astype(p.dtype))
    return T.mul(T.tsum(T.mul(diff, diff)), 1.0 / denom)


# -- Adam -----------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update in place. ``params`` maps names to
    Tensors whose ``grad`` is set (a missing grad counts as zero)."""
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingDivergence(f"non-finite gradient in parameter '{name}'")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- loops ------------------------------------------------------------------------

def _frames(traj: np.ndarray) -> list:
    return [np.ascontiguousarray(f) for f in traj]


def rollout_trajectory(model, traj_norm: np.ndarray, k: int, n: int, teacher_forcing: bool = False) -> list:
    """Predicted (normalised) fields ``k..k+n-1`` of one trajectory."""
    frames = _frames(traj_norm[: k + n])
    if not teacher_forcing:
        return predict_steps(model, frames[:k], n)
    cache: dict = {}
    return [model.predict_next(frames[i:i + k], cache) for i in range(n)]


def check_lengths(ds: Dataset, k: int, n: int) -> None:
    if ds.n_steps < k + n:
        raise DataError(f"trajectories have {ds.n_steps} steps; window k={k} plus roll-out n={n} "
                        f"needs at least {k + n}")


def evaluate(model, ds: Dataset, stats: NormStats, split: str = "test", k: int | None = None,
             n: int = 20, progressive: bool = False) -> float:
    """Mean over a split's trajectories of the physical-unit relative MSE (%)
    of an n-step roll-out from ``u_{0:k}`` (or from ``u_0`` when progressive)."""
    from .rollout import progressive_predict

    k = model.config.window if k is None else k
    check_lengths(ds, 1 if progressive else k, n)
    errs = []
    with T.no_grad():
        for i in ds.splits[split]:
            traj = stats.apply(ds.fields[i])
            if progressive:
                pred = to_numpy(progressive_predict(model, np.ascontiguousarray(traj[0]), n, k))
                truth = ds.fields[i, 1:n + 1]
            else:
                pred = to_numpy(predict_steps(model, _frames(traj[:k]), n))
                truth = ds.fields[i, k:k + n]
            errs.append(relative_mse(stats.invert(pred), truth))
    return float(np.mean(errs)) if errs else float("nan")


def write_history(history: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_rel_mse_pct", "val_rel_mse_pct", "lr"])
        for row in history:
            w.writerow([row["epoch"], repr(row["train_rel_mse_pct"]), repr(row["val_rel_mse_pct"]),
                        repr(row["lr"])])


def fit(model, ds: Dataset, config: TrainConfig | None = None, stats: NormStats | None = None,
        history_path=None, val_split: str = "test", progress=None) -> tuple:
    """Train ``model`` in place on the training split of a physical-unit dataset.

    Returns ``(model, history, stats)``; ``history`` has one dict per epoch
    with the running train metric, the validation metric and the rate.
    """
    config = config or TrainConfig()
    k, n = config.window, config.rollout
    check_lengths(ds, k, n)
    if model.config.window != k:
        log.info("model window %d differs from training window %d", model.config.window, k)
    stats = stats or NormStats.from_dataset(ds, "train")
    norm = normalize(ds, stats)
    train_ids = list(ds.splits["train"])
    if not train_ids:
        raise DataError("training split is empty")
    params = dict(model.named_parameters())
    state = AdamState(config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        order = rng.permutation(train_ids) if config.shuffle else train_ids
        t0 = time.perf_counter()
        errs = []
        for i in order:
            model.zero_grad()
            try:
                preds = rollout_trajectory(model, norm.fields[i], k, n, config.teacher_forcing)
            except RolloutDivergence as exc:
                raise TrainingDivergence(f"{exc} at epoch {epoch}, trajectory {i}", epoch, int(i)) from None
            truth = ds.fields[i, k:k + n]
            loss = relative_mse_loss(preds, truth, stats)
            if not np.isfinite(loss.data):
                raise TrainingDivergence(f"loss is not finite at epoch {epoch}, trajectory {i}", epoch, int(i))
            loss.backward()
            try:
                adam_step(params, state, lr)
            except TrainingDivergence as exc:
                raise TrainingDivergence(f"{exc} at epoch {epoch}, trajectory {i}", epoch, int(i)) from None
            errs.append(100.0 * float(loss.data))
        val = float("nan")
        if val_split in ds.splits and ds.splits[val_split] and (
                (epoch + 1) % config.val_every == 0 or epoch == config.epochs - 1):
            val = evaluate(model, ds, stats, val_split, k, n)
        row = {"epoch": epoch, "train_rel_mse_pct": float(np.mean(errs)), "val_rel_mse_pct": val, "lr": lr}
        history.append(row)
        log.info("epoch %d  train %.3f%%  val %.3f%%  lr %.3g  (%.1fs)", epoch, row["train_rel_mse_pct"],
                 val, lr, time.perf_counter() - t0)
        if progress is not None:
            progress(row)
    if history_path is not None:
        write_history(history, history_path)
    return model, history, stats
