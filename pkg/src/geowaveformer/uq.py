"""Monte Carlo propagation of initial-condition noise through progressive roll-outs."""

from __future__ import annotations

import logging
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .rollout import RolloutDivergence, progressive_predict, to_numpy

log = logging.getLogger(__name__)


class EnsembleDivergence(FloatingPointError):
    pass


@dataclass
class EnsembleSpec:
    size: int = 100
    alpha: float = 0.01
    seed: int = 0
    bins: int = 30

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"ensemble size must be >= 1, got {self.size}")
        if self.alpha < 0:
            raise ValueError(f"noise level alpha must be >= 0, got {self.alpha}")
        if self.bins < 1:
            raise ValueError("bins must be >= 1")


@dataclass
class FieldStats:
    mean: np.ndarray  # (steps, N, d)
    std: np.ndarray
    steps: np.ndarray  # time indices of the rows (1..n)
    n_members: int
    n_excluded: int = 0
    pdfs: dict = field(default_factory=dict)  # (point, step) -> (edges (d, bins+1), density (d, bins))


def perturb_initial(u0, spec: EnsembleSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """``u0 + eta`` with ``eta ~ N(0, (alpha * std_c(u0))^2)`` per channel ``c``."""
    u0 = np.asarray(u0, dtype=np.float64)
    if spec.alpha == 0:
        return u0.copy()
    rng = rng or np.random.default_rng(spec.seed)
    flat = u0.reshape(-1, u0.shape[-1]) if u0.ndim > 1 else u0.reshape(-1, 1)
    std = flat.std(axis=0)
    if np.any(std == 0):
        warnings.warn("initial field is constant in some channel; that channel is not perturbed",
                      RuntimeWarning, stacklevel=2)
    noise = rng.standard_normal(u0.shape) * (spec.alpha * std).reshape((1,) * (u0.ndim - 1) + (-1,))
    return u0 + noise


def parse_probe(text: str) -> tuple:
    """``"12@t20"`` -> ``(12, 20)`` (point id, time step)."""
    m = re.fullmatch(r"\s*(\d+)\s*@\s*t(\d+)\s*", text)
    if not m:
        raise ValueError(f"probe {text!r} is not of the form <point>@t<step>, e.g. 12@t20")
    return int(m.group(1)), int(m.group(2))


def field_stats(members: np.ndarray, steps=None, probes=(), bins: int = 30) -> FieldStats:
    """Pointwise statistics over an ensemble ``(E, steps, N, d)``."""
    members = np.asarray(members, dtype=np.float64)
    e, n = members.shape[:2]
    steps = np.arange(1, n + 1) if steps is None else np.asarray(steps)
    # sort along the member axis so the reductions do not depend on member order
    ordered = np.sort(members, axis=0)
    # shifted moments: identical members give exactly mean = member, std = 0
    shift = ordered[0]
    dev = ordered - shift
    dmean = dev.mean(axis=0)
    mean = shift + dmean
    std = np.sqrt(np.mean((dev - dmean) ** 2, axis=0)) if e > 1 else np.zeros_like(mean)
    pdfs = {}
    for point, step in probes:
        rows = np.flatnonzero(steps == step)
        if rows.size == 0:
            raise ValueError(f"probe step {step} outside the predicted steps {steps[0]}..{steps[-1]}")
        if not 0 <= point < members.shape[2]:
            raise ValueError(f"probe point {point} outside 0..{members.shape[2] - 1}")
        vals = ordered[:, rows[0], point, :]
        edges, dens = [], []
        for c in range(vals.shape[1]):
            d, ed = np.histogram(vals[:, c], bins=bins, density=True)
            edges.append(ed)
            dens.append(d)
        pdfs[(point, step)] = (np.asarray(edges), np.asarray(dens))
    return FieldStats(mean, std, steps, e, 0, pdfs)


def ensemble_run(model, u0, spec: EnsembleSpec, n: int, stats=None, probes=(), k: int | None = None) -> FieldStats:
    """``spec.size`` progressive roll-outs from perturbed copies of ``u0``.

    ``u0`` is in physical units; with normalisation ``stats`` the model runs
    on normalised fields and results are mapped back. Diverging members are
    dropped and counted.
    """
    if n < 1:
        raise ValueError("horizon n must be >= 1")
    if spec.size == 1:
        warnings.warn("ensemble of size 1: the std field is zero by definition", RuntimeWarning, stacklevel=2)
    rng = np.random.default_rng(spec.seed)
    u0 = np.asarray(u0, dtype=np.float64)
    runs, excluded = [], 0
    deterministic = None
    with T.no_grad():
        for _ in range(spec.size):
            ui = perturb_initial(u0, spec, rng)
            if spec.alpha == 0 and deterministic is not None:
                runs.append(deterministic)
                continue
            x = stats.apply(ui) if stats is not None else ui
            try:
                pred = to_numpy(progressive_predict(model, np.ascontiguousarray(x), n, k))
            except RolloutDivergence as exc:
                log.warning("ensemble member dropped: %s", exc)
                excluded += 1
                continue
            if stats is not None:
                pred = stats.invert(pred)
            runs.append(pred)
            if spec.alpha == 0:
                deterministic = pred
    if not runs:
        raise EnsembleDivergence(f"all {spec.size} ensemble members diverged")
    if excluded:
        log.warning("%d of %d ensemble members diverged and were excluded", excluded, spec.size)
    out = field_stats(np.stack(runs), np.arange(1, n + 1), probes, spec.bins)
    out.n_excluded = excluded
    return out


def write_stats(fs: FieldStats, out_dir, channels=None) -> list:
    """One ``point_id,mean,std`` CSV per time step (and channel when several)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    d = fs.mean.shape[-1]
    channels = channels or [f"c{i}" for i in range(d)]
    paths = []
    for r, t in enumerate(fs.steps):
        for c in range(d):
            name = f"stats_t{int(t)}.csv" if d == 1 else f"stats_{channels[c]}_t{int(t)}.csv"
            lines = ["point_id,mean,std"]
            lines += [f"{i},{float(fs.mean[r, i, c])!r},{float(fs.std[r, i, c])!r}" for i in range(fs.mean.shape[1])]
            (out / name).write_text("\n".join(lines) + "\n")
            paths.append(out / name)
    return paths


def write_pdfs(fs: FieldStats, out_dir, channels=None) -> list:
    """One ``bin_left,bin_right,density`` CSV per probe (and channel when several)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for (point, step), (edges, dens) in fs.pdfs.items():
        d = len(dens)
        names = channels or [f"c{i}" for i in range(d)]
        for c in range(d):
            name = f"pdf_p{point}_t{step}.csv" if d == 1 else f"pdf_{names[c]}_p{point}_t{step}.csv"
            lines = ["bin_left,bin_right,density"]
            lines += [f"{float(edges[c][b])!r},{float(edges[c][b + 1])!r},{float(dens[c][b])!r}"
                      for b in range(len(dens[c]))]
            (out / name).write_text("\n".join(lines) + "\n")
            paths.append(out / name)
    return paths
