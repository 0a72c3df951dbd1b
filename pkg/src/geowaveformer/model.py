"""The full surrogate: graph encoder -> waveformer -> graph decoder."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .geometry import PointCloud, build_latent_grid
from .graph_op import GeometryGraphs, GraphDecoder, GraphEncoder, build_geometry_graphs, decode, encode
from .tensor import Module, Tensor
from .waveformer import ExpansionBlock, ReductionBlock, Waveformer


@dataclass
class ModelConfig:
    field_channels: int = 1
    bc_channels: int = 0
    window: int = 10
    resolution: tuple = (16, 16, 16)
    pad_fraction: float = 0.05
    enc_widths: tuple = (64, 32)
    dec_widths: tuple = (64, 32)
    kernel_hidden: int = 32
    radius_factor: float = 2.5
    grid_radius_factor: float = 1.0
    cap: int = 32
    k_density: int = 4
    width: int = 16
    lift_hidden: int = 32
    token_dim: int = 128
    heads: int = 4
    ff_dim: int = 256
    n_enc_blocks: int = 2
    n_dec_blocks: int = 2
    wavelet: str = "db4"
    wavelet_levels: int = 1
    wavelet_mode: str = "symmetric"
    positional: bool = True
    reduce: bool = False
    reduce_channels: tuple = (8, 8)
    reduce_kernels: tuple = (2, 2)
    reduce_strides: tuple = (2, 2)
    residual: bool = False
    seed: int = 0
    channel_names: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("resolution", "enc_widths", "dec_widths", "reduce_channels", "reduce_kernels",
                     "reduce_strides"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.window < 2:
            raise ValueError("window length k must be >= 2")

    @property
    def latent_channels(self) -> int:
        return self.enc_widths[-1]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def preset(name: str, **overrides) -> ModelConfig:
    """Named configurations. ``paper`` keeps the full widths (64/32 graph
    layers, 16^3 grid); ``small`` is the desk-scale setting used by the
    synthetic benchmark."""
    if name == "paper":
        cfg = ModelConfig()
    elif name == "small":
        cfg = ModelConfig(resolution=(4, 4, 8), enc_widths=(8, 8), dec_widths=(8, 8), kernel_hidden=8,
                          width=8, lift_hidden=16, token_dim=32, ff_dim=64, wavelet="db2")
    else:
        raise ValueError(f"unknown preset {name!r}; expected 'paper' or 'small'")
    return dataclasses.replace(cfg, **overrides)


class GeometryWaveformer(Module):
    """One-step predictor ``u_{k} = M(u_0, ..., u_{k-1})`` on a fixed cloud.

    Fields are ``(N, field_channels)``. Each frame is encoded, lifted and
    tokenised independently, so a roll-out re-uses that work through a
    per-roll-out ``cache`` dict keyed by frame identity.
    """

    def __init__(self, config: ModelConfig, cloud: PointCloud):
        self.config = config
        self.cloud = cloud
        rng = np.random.default_rng(config.seed)
        self.grid = build_latent_grid(cloud, config.resolution, config.pad_fraction)
        self.geometry: GeometryGraphs = build_geometry_graphs(
            cloud, self.grid, config.radius_factor, config.grid_radius_factor, config.cap,
            config.k_density, config.seed)
        c = config.latent_channels
        d0 = config.field_channels
        self.encoder = GraphEncoder.build(d0 + config.bc_channels, config.enc_widths,
                                          config.kernel_hidden, rng)
        if config.reduce:
            self.reducer = ReductionBlock(c, config.resolution, config.reduce_channels,
                                          config.reduce_kernels, config.reduce_strides, rng)
            spatial = self.reducer.plane
            wf_in = wf_out = self.reducer.channels_2d
            self.expander = ExpansionBlock(self.reducer, c, wf_out, rng)
            dec_in = c
        else:
            self.reducer = self.expander = None
            spatial = config.resolution
            wf_in, wf_out = c, d0
            dec_in = d0
        self.waveformer = Waveformer(
            wf_in, wf_out, spatial, config.width, config.lift_hidden, config.token_dim, config.heads,
            config.ff_dim, config.n_enc_blocks, config.n_dec_blocks, config.wavelet,
            config.wavelet_levels, config.wavelet_mode, config.positional, rng)
        self.decoder = GraphDecoder.build(dec_in, config.dec_widths, d0, config.kernel_hidden, rng)

    # -- stages ------------------------------------------------------------
    def encode_frames(self, fields, kernel_cache: dict | None = None) -> Tensor:
        """(T, N, d) cloud fields -> (T, S1, S2, S3, c) latent frames."""
        fields = T.as_tensor(fields)
        lat = encode(fields, self.geometry, self.encoder, kernel_cache)
        return T.reshape(lat, (fields.shape[0],) + self.grid.resolution + (lat.shape[-1],))

    def decode_frame(self, latent, kernel_cache: dict | None = None) -> Tensor:
        """(S1, S2, S3, c) latent -> (N, d0)."""
        latent = T.as_tensor(latent)
        flat = T.reshape(latent, (self.grid.n_nodes, latent.shape[-1]))
        return decode(flat, self.geometry, self.decoder, kernel_cache)

    def embed_frames(self, fields, kernel_cache: dict | None = None) -> tuple:
        lat = self.encode_frames(fields, kernel_cache)
        if self.reducer is not None:
            lat = self.reducer(lat)
        return self.waveformer.tokens(self.waveformer.lift(lat))

    def _check_field(self, u) -> Tensor:
        u = T.as_tensor(u)
        want = (len(self.cloud), self.config.field_channels + self.config.bc_channels)
        if u.shape != want:
            raise ValueError(f"field has shape {u.shape}, model expects {want}")
        return u

    def predict_next(self, window, cache: dict | None = None) -> Tensor:
        """Next field from a window of ``k >= 2`` fields (each (N, d))."""
        if len(window) < 2:
            raise ValueError(f"window needs at least 2 fields, got {len(window)}")
        cache = {} if cache is None else cache
        kcache = cache.setdefault("_kernels", {})
        tokens = cache.setdefault("_tokens", {})
        missing = []
        for u in window:
            if id(u) not in tokens and all(id(u) != id(m) for m in missing):
                missing.append(u)
        if missing:
            batch = T.stack([self._check_field(u) for u in missing], axis=0)
            wave, phys = self.embed_frames(batch, kcache)
            for i, u in enumerate(missing):
                # the cache holds a reference so ids stay unique while cached
                tokens[id(u)] = (wave[i:i + 1], phys[i:i + 1], u)
        wave = T.concat([tokens[id(u)][0] for u in window], axis=0)
        phys = T.concat([tokens[id(u)][1] for u in window], axis=0)
        out = self.waveformer.project(self.waveformer.integral_from_tokens(wave, phys))
        if self.expander is not None:
            out = self.expander(T.reshape(out, (1,) + out.shape))[0]
        pred = self.decode_frame(out, kcache)
        if self.config.residual:
            last = T.as_tensor(window[-1])
            pred = T.add(pred, last[:, : self.config.field_channels])
        return pred

    def forward_latent(self, latent_window) -> Tensor:
        """Waveformer alone on encoded frames (k, S1, S2, S3, c) -> next latent."""
        lat = T.as_tensor(latent_window)
        if self.reducer is not None:
            lat = self.reducer(lat)
        out = self.waveformer(lat)
        if self.expander is not None:
            out = self.expander(T.reshape(out, (1,) + out.shape))[0]
        return out

    # -- persistence -----------------------------------------------------------
    def save(self, path, extra: dict | None = None) -> None:
        path = Path(path)
        T.save_checkpoint(path, self.state_dict())
        meta = {"config": self.config.to_dict(), "cloud": self.cloud.coords.tolist()}
        if self.cloud.arclength is not None:
            meta["arclength"] = self.cloud.arclength.tolist()
        meta.update(extra or {})
        path.with_suffix(".json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, path) -> tuple:
        """Returns (model, metadata dict)."""
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        arc = meta.get("arclength")
        cloud = PointCloud(np.asarray(meta["cloud"]), None if arc is None else np.asarray(arc))
        model = cls(ModelConfig.from_dict(meta["config"]), cloud)
        model.load_state_dict(T.load_checkpoint(path))
        return model, meta
