"""Datasets on a fixed point cloud: on-disk layout, normalisation and a
synthetic vessel generator.

The generator evolves a pressure-like and a flow-like scalar along the arc
length of a 3-D centreline (helical tube or Y-bifurcation) with explicit
upwind advection plus diffusion, driven by a pulsatile inflow. The same
finite-difference stepper is the ground truth.

Layout of a dataset directory::

    manifest.json
    geometry.csv              point_id,x,y,z,s
    traj_{i}/step_{t}.csv     point_id,<channel>,...
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PointCloud, read_cloud_csv, write_cloud_csv

log = logging.getLogger(__name__)

FORMAT = "geowaveformer-dataset"
DEFAULT_CHANNELS = ["pressure", "flow"]
DEFAULT_UNITS = ["mmHg", "cm^3/s"]


class DataError(ValueError):
    """Malformed or inconsistent dataset."""


class CFLError(ValueError):
    """Explicit step too large for the oracle stepper."""


# -- centreline networks ----------------------------------------------------

@dataclass
class VesselNetwork:
    """1-D transport network embedded in 3-D.

    ``upstream[i]`` is the node feeding ``i`` (``-1``: the inlet ghost value)
    at distance ``h_up[i]``. ``edges`` are undirected ``(i, j, length)``
    diffusion links; ``volumes`` are the dual cell lengths.
    """

    coords: np.ndarray
    arclength: np.ndarray
    upstream: np.ndarray
    h_up: np.ndarray
    edges: np.ndarray  # (n_edges, 3): i, j, length
    periodic: bool = False

    @property
    def n_points(self) -> int:
        return len(self.coords)

    @property
    def volumes(self) -> np.ndarray:
        v = np.zeros(self.n_points)
        i, j = self.edges[:, 0].astype(int), self.edges[:, 1].astype(int)
        np.add.at(v, i, 0.5 * self.edges[:, 2])
        np.add.at(v, j, 0.5 * self.edges[:, 2])
        return v

    def cloud(self) -> PointCloud:
        return PointCloud(self.coords, self.arclength)


def _chain_edges(idx: np.ndarray, h: float) -> list:
    return [(int(a), int(b), h) for a, b in zip(idx[:-1], idx[1:])]


def helix_tube(n_points: int = 64, length: float = 12.0, radius: float = 1.0, pitch: float = 0.4,
               periodic: bool = False) -> VesselNetwork:
    """Helical centreline with uniformly spaced nodes in arc length (cm).

    ``pitch`` is the rise per radian. With ``periodic`` the last node feeds
    the first (a closed loop in the dynamics, not in space).
    """
    if n_points < 16:
        raise ValueError(f"n_points must be >= 16, got {n_points}")
    h = length / (n_points if periodic else n_points - 1)
    s = h * np.arange(n_points)
    theta = s / math.hypot(radius, pitch)
    coords = np.stack([radius * np.cos(theta), radius * np.sin(theta), pitch * theta], axis=1)
    idx = np.arange(n_points)
    edges = _chain_edges(idx, h)
    if periodic:
        edges.append((n_points - 1, 0, h))
        upstream = np.roll(idx, 1)
    else:
        upstream = idx - 1
    return VesselNetwork(coords, s, upstream, np.full(n_points, h), np.asarray(edges, dtype=float), periodic)


def y_bifurcation(n_points: int = 64, parent_length: float = 6.0, angle_deg: float = 35.0) -> VesselNetwork:
    """Parent segment along ``z`` splitting into two daughters of equal
    spacing; daughters tilt slightly out of plane so the cloud is 3-D."""
    if n_points < 16:
        raise ValueError(f"n_points must be >= 16, got {n_points}")
    n_d = n_points // 3
    n_p = n_points - 2 * n_d
    h = parent_length / (n_p - 1)
    parent = np.stack([np.zeros(n_p), np.zeros(n_p), h * np.arange(n_p)], axis=1)
    a = math.radians(angle_deg)
    coords = [parent]
    s = [h * np.arange(n_p)]
    upstream = list(range(-1, n_p - 1))
    edges = _chain_edges(np.arange(n_p), h)
    junction = n_p - 1
    for sign in (1.0, -1.0):
        d = np.array([sign * math.sin(a), 0.25 * math.sin(a), math.cos(a)])
        d /= np.linalg.norm(d)
        steps = h * np.arange(1, n_d + 1)
        coords.append(parent[-1] + steps[:, None] * d)
        s.append(s[0][-1] + steps)
        start = sum(len(c) for c in coords[:-1])
        idx = np.arange(start, start + n_d)
        upstream += [junction] + list(idx[:-1])
        edges += [(junction, int(idx[0]), h)] + _chain_edges(idx, h)
    coords = np.concatenate(coords)
    return VesselNetwork(coords, np.concatenate(s), np.asarray(upstream), np.full(len(coords), h),
                         np.asarray(edges, dtype=float))


# -- finite-difference oracle -----------------------------------------------

class AdvectionDiffusion:
    """Explicit Euler for ``du/dt = -c du/ds + D d2u/ds2`` on a network.

    Advection is first-order upwind; diffusion is the finite-volume graph
    Laplacian ``(1/V_i) sum_j (u_j - u_i) / h_ij`` (zero flux at open ends).
    ``u`` is ``(N, d)``; the inlet ghost value comes from ``inflow(t)``.
    """

    def __init__(self, network: VesselNetwork, speed: float, diffusion: float):
        if speed < 0 or diffusion < 0:
            raise ValueError("speed and diffusion must be non-negative")
        self.net = network
        self.speed = float(speed)
        self.diffusion = float(diffusion)
        e = network.edges
        i, j, h = e[:, 0].astype(int), e[:, 1].astype(int), e[:, 2]
        self._i, self._j, self._inv_h = i, j, 1.0 / h
        self._inv_v = 1.0 / network.volumes
        deg = np.zeros(network.n_points)
        np.add.at(deg, i, 1.0 / h)
        np.add.at(deg, j, 1.0 / h)
        self._rate = self.speed / network.h_up + self.diffusion * deg * self._inv_v

    def max_stable_dt(self) -> float:
        """Largest step keeping every explicit update a convex combination."""
        r = float(self._rate.max())
        return math.inf if r == 0 else 1.0 / r

    def rhs(self, u: np.ndarray, ghost: np.ndarray) -> np.ndarray:
        net = self.net
        up = np.where((net.upstream >= 0)[:, None], u[np.maximum(net.upstream, 0)], ghost)
        out = -self.speed * (u - up) / net.h_up[:, None]
        if self.diffusion:
            flux = (u[self._j] - u[self._i]) * self._inv_h[:, None]
            lap = np.zeros_like(u)
            np.add.at(lap, self._i, flux)
            np.add.at(lap, self._j, -flux)
            out = out + self.diffusion * lap * self._inv_v[:, None]
        return out

    def substeps(self, dt: float, auto_substep: bool = True) -> int:
        limit = self.max_stable_dt()
        if dt <= limit * (1 + 1e-12):
            return 1
        if not auto_substep:
            raise CFLError(f"step dt={dt:.4g} exceeds the stability limit {limit:.4g} "
                           f"(speed={self.speed}, diffusion={self.diffusion}); enable auto-substep")
        return int(math.ceil(dt / limit))

    def simulate(self, u0: np.ndarray, n_steps: int, dt: float, inflow=None, t0: float = 0.0,
                 auto_substep: bool = True) -> np.ndarray:
        """States at ``t0 + i dt`` for ``i = 0..n_steps-1``, shape ``(n_steps, N, d)``."""
        u = np.array(u0, dtype=np.float64)
        if u.ndim == 1:
            u = u[:, None]
        n_sub = self.substeps(dt, auto_substep)
        h = dt / n_sub
        zero = np.zeros(u.shape[1])
        out = np.empty((n_steps,) + u.shape)
        t = t0
        for i in range(n_steps):
            out[i] = u
            if i == n_steps - 1:
                break
            for k in range(n_sub):
                tk = t + k * h
                ghost = zero if inflow is None else np.asarray(inflow(tk), dtype=np.float64)
                u = u + h * self.rhs(u, ghost)
            t = t0 + (i + 1) * dt
        return out


# -- synthetic datasets ------------------------------------------------------

@dataclass
class PulsatileInflow:
    """``mean + a1 sin(w t + p1) + a2 sin(2 w t + p2)`` per channel."""

    mean: np.ndarray
    a1: np.ndarray
    p1: np.ndarray
    a2: np.ndarray
    p2: np.ndarray
    period: float

    def __call__(self, t: float) -> np.ndarray:
        w = 2 * math.pi / self.period
        return self.mean + self.a1 * np.sin(w * t + self.p1) + self.a2 * np.sin(2 * w * t + self.p2)


def random_inflow(rng: np.random.Generator, period: float = 0.8) -> PulsatileInflow:
    """Per-trajectory amplitudes and phases; flow leads pressure by ~30 deg."""
    phase = rng.uniform(0, 2 * math.pi)
    a_p = rng.uniform(4.0, 8.0)
    a_q = rng.uniform(2.0, 4.0)
    ratio = rng.uniform(0.0, 0.4)
    p2 = rng.uniform(0, 2 * math.pi)
    return PulsatileInflow(mean=np.array([10.0, 3.0]), a1=np.array([a_p, a_q]),
                           p1=np.array([phase, phase + math.pi / 6]),
                           a2=ratio * np.array([a_p, a_q]), p2=np.array([p2, p2]), period=period)


@dataclass
class Dataset:
    cloud: PointCloud
    fields: np.ndarray  # (n_traj, n_steps, N, d)
    dt: float
    channels: list
    units: list = field(default_factory=list)
    splits: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.fields = np.asarray(self.fields, dtype=np.float64)
        if self.fields.ndim != 4:
            raise DataError(f"fields must be (trajectories, steps, points, channels), got {self.fields.shape}")
        if self.fields.shape[2] != len(self.cloud):
            raise DataError(f"fields have {self.fields.shape[2]} points, geometry has {len(self.cloud)}")
        if self.fields.shape[3] != len(self.channels):
            raise DataError(f"fields have {self.fields.shape[3]} channels, names given for {len(self.channels)}")
        if not self.units:
            self.units = [""] * len(self.channels)
        if not self.splits:
            self.splits = default_splits(self.n_trajectories)

    @property
    def n_trajectories(self) -> int:
        return self.fields.shape[0]

    @property
    def n_steps(self) -> int:
        return self.fields.shape[1]

    @property
    def n_points(self) -> int:
        return self.fields.shape[2]

    def split(self, name: str) -> np.ndarray:
        """Trajectories of a split, ``(n, steps, N, d)``."""
        if name not in self.splits:
            raise KeyError(f"unknown split {name!r}; have {sorted(self.splits)}")
        return self.fields[list(self.splits[name])]

    def select_channels(self, channels) -> "Dataset":
        """Sub-dataset with the given channel names or indices."""
        idx = [self.channels.index(c) if isinstance(c, str) else int(c) for c in channels]
        return Dataset(self.cloud, self.fields[..., idx], self.dt, [self.channels[i] for i in idx],
                       [self.units[i] for i in idx], dict(self.splits), dict(self.meta))


def default_splits(n_trajectories: int, n_test: int = 5) -> dict:
    """Last ``n_test`` trajectories for testing (27/5 at 32), the rest for training."""
    n_test = min(n_test, max(n_trajectories - 1, 0))
    cut = n_trajectories - n_test
    return {"train": list(range(cut)), "test": list(range(cut, n_trajectories))}


def gen_synthetic(kind: str = "tube", n_points: int = 64, n_steps: int = 40, n_trajectories: int = 32,
                  seed: int = 0, dt: float = 0.04, speed: float = 15.0, diffusion: float = 0.5,
                  period: float = 0.8, burn_in: float | None = None, n_test: int = 5,
                  auto_substep: bool = True) -> Dataset:
    """Synthetic pressure/flow trajectories on a tube or a bifurcation.

    Each trajectory starts from the spatially uniform inflow mean, is run
    for ``burn_in`` seconds (default: one period plus one transit time) and
    then sampled every ``dt`` for ``n_steps`` frames.
    """
    if kind == "tube":
        net = helix_tube(n_points)
    elif kind == "bifurcation":
        net = y_bifurcation(n_points)
    else:
        raise ValueError(f"unknown kind {kind!r}; expected 'tube' or 'bifurcation'")
    if n_steps < 2 or n_trajectories < 1:
        raise ValueError("need n_steps >= 2 and n_trajectories >= 1")
    oracle = AdvectionDiffusion(net, speed, diffusion)
    n_sub = oracle.substeps(dt, auto_substep)
    if n_sub > 1:
        log.info("oracle uses %d substeps per output step", n_sub)
    if burn_in is None:
        burn_in = period + (float(net.arclength.max()) / speed if speed > 0 else 0.0)
    n_burn = int(math.ceil(burn_in / dt))
    rng = np.random.default_rng(seed)
    out = np.empty((n_trajectories, n_steps, net.n_points, 2))
    params = []
    for i in range(n_trajectories):
        inflow = random_inflow(rng, period)
        u0 = np.broadcast_to(inflow.mean, (net.n_points, 2))
        traj = oracle.simulate(u0, n_burn + n_steps, dt, inflow, auto_substep=auto_substep)
        out[i] = traj[n_burn:]
        params.append({"amplitude": inflow.a1.tolist(), "phase": float(inflow.p1[0]),
                       "harmonic": (inflow.a2 / inflow.a1).tolist()[0]})
    meta = {"generator": {"kind": kind, "seed": seed, "speed": speed, "diffusion": diffusion,
                          "period": period, "burn_in": burn_in, "substeps": n_sub},
            "inflow": params}
    return Dataset(net.cloud(), out, dt, list(DEFAULT_CHANNELS), list(DEFAULT_UNITS),
                   default_splits(n_trajectories, n_test), meta)


# -- persistence ---------------------------------------------------------------

def _write_step(path: Path, values: np.ndarray, channels: list) -> None:
    lines = ["point_id," + ",".join(channels)]
    for i, row in enumerate(values):
        lines.append(str(i) + "," + ",".join(repr(float(v)) for v in row))
    path.write_text("\n".join(lines) + "\n")


def save_dataset(ds: Dataset, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {"format": FORMAT, "version": 1, "points": ds.n_points, "steps": ds.n_steps,
                "trajectories": ds.n_trajectories, "dt": ds.dt, "channels": list(ds.channels),
                "units": list(ds.units), "splits": ds.splits, "meta": ds.meta}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
    write_cloud_csv(ds.cloud, d / "geometry.csv")
    for i in range(ds.n_trajectories):
        td = d / f"traj_{i}"
        td.mkdir(exist_ok=True)
        for t in range(ds.n_steps):
            _write_step(td / f"step_{t}.csv", ds.fields[i, t], ds.channels)
    return d


def _read_step(path: Path, n_points: int, channels: list) -> np.ndarray:
    if not path.exists():
        raise DataError(f"missing field file {path}")
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        want = ["point_id"] + list(channels)
        if header != want:
            raise DataError(f"{path}: header {header} does not match manifest {want}")
        try:
            arr = np.loadtxt(fh, delimiter=",", ndmin=2, dtype=np.float64)
        except ValueError as exc:
            raise DataError(f"{path}: unreadable values ({exc})") from None
    rows = 0 if arr.size == 0 else arr.shape[0]
    if rows != n_points:
        raise DataError(f"{path}: {rows} rows but manifest declares {n_points} points")
    if not np.array_equal(arr[:, 0], np.arange(n_points)):
        raise DataError(f"{path}: point_id column must be 0..{n_points - 1} in order")
    return arr[:, 1:]


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise DataError(f"missing manifest {mpath}")
    try:
        m = json.loads(mpath.read_text())
        n_points, n_steps, n_traj = int(m["points"]), int(m["steps"]), int(m["trajectories"])
        channels = list(m["channels"])
        dt = float(m["dt"])
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"{mpath}: malformed manifest ({exc})") from None
    gpath = d / "geometry.csv"
    if not gpath.exists():
        raise DataError(f"missing geometry file {gpath}")
    try:
        cloud = read_cloud_csv(gpath)
    except ValueError as exc:
        raise DataError(f"{gpath}: {exc}") from None
    if len(cloud) != n_points:
        raise DataError(f"{gpath}: {len(cloud)} rows but manifest declares {n_points} points")
    fields = np.empty((n_traj, n_steps, n_points, len(channels)))
    for i in range(n_traj):
        for t in range(n_steps):
            fields[i, t] = _read_step(d / f"traj_{i}" / f"step_{t}.csv", n_points, channels)
    splits = {k: [int(v) for v in vals] for k, vals in m.get("splits", {}).items()}
    return Dataset(cloud, fields, dt, channels, list(m.get("units", [])), splits, m.get("meta", {}))


# -- normalisation ----------------------------------------------------------------

def _fingerprint(ds: Dataset, split: str) -> str:
    h = hashlib.blake2b(digest_size=8)
    h.update(json.dumps(sorted(ds.splits[split])).encode())
    h.update(np.ascontiguousarray(ds.split(split)).tobytes())
    return h.hexdigest()


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    split: str = "train"
    fingerprint: str = ""

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            bad = np.flatnonzero(self.std <= 0).tolist()
            raise DataError(f"zero standard deviation in channel(s) {bad}; cannot normalise")

    @classmethod
    def from_dataset(cls, ds: Dataset, split: str = "train") -> "NormStats":
        x = ds.split(split).reshape(-1, ds.fields.shape[-1])
        std = x.std(axis=0)
        if np.any(std <= 0):
            bad = [ds.channels[i] for i in np.flatnonzero(std <= 0)]
            raise DataError(f"zero standard deviation in channel(s) {bad}; cannot normalise")
        return cls(x.mean(axis=0), std, split, _fingerprint(ds, split))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) - self.mean) / self.std

    def invert(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "split": self.split,
                "fingerprint": self.fingerprint}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"]), np.asarray(d["std"]), d.get("split", "train"), d.get("fingerprint", ""))


def check_provenance(ds: Dataset, stats: NormStats) -> None:
    """Stats must come from this dataset's training split."""
    if stats.split != "train":
        raise DataError(f"normalisation stats come from split {stats.split!r}, not 'train'")
    if stats.fingerprint and "train" in ds.splits and stats.fingerprint != _fingerprint(ds, "train"):
        raise DataError("normalisation stats were not computed on this dataset's training split")


def normalize(ds: Dataset, stats: NormStats) -> Dataset:
    check_provenance(ds, stats)
    out = Dataset(ds.cloud, stats.apply(ds.fields), ds.dt, list(ds.channels), list(ds.units),
                  dict(ds.splits), dict(ds.meta))
    out.meta["normalized"] = True
    return out


def denormalize(ds: Dataset, stats: NormStats) -> Dataset:
    out = Dataset(ds.cloud, stats.invert(ds.fields), ds.dt, list(ds.channels), list(ds.units),
                  dict(ds.splits), dict(ds.meta))
    out.meta["normalized"] = False
    return out
