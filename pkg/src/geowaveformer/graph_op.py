"""Learnable kernel integration between the irregular cloud and the latent grid.

An :class:`EdgeGraph` fixes the neighbourhoods, quadrature weights and the
geometric part of the edge features ``e(x, y) = (x, y, T(x), T(y), a(y))``
once per geometry. A :class:`KernelNet` turns edge features into one
``c_in x c_out`` matrix per edge; :func:`kernel_integrate` forms

    out(x) = sum_{y in N(x)} kappa(e(x, y)) v(y) mu(y).

Fields carry channels last: ``(..., n_points, channels)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .geometry import (LatentGrid, NeighborSet, PointCloud, ball_neighbors, distance_features,
                       grid_weights, riemann_weights)
from .layers import Linear
from .tensor import Module, Tensor

log = logging.getLogger(__name__)

GEO_DIM = 8  # x(3), y(3), T(x), T(y)


@dataclass
class EdgeGraph:
    neighbors: NeighborSet
    n_queries: int
    n_targets: int
    gather: sp.csr_matrix  # (E, n_targets) selection
    geo: np.ndarray  # (E, GEO_DIM) normalised geometric edge features
    weights: np.ndarray  # (E,) quadrature weight per edge

    @property
    def n_edges(self) -> int:
        return len(self.weights)

    @property
    def empty(self) -> np.ndarray:
        return self.neighbors.empty()

    def scatter(self, normalize: bool = False) -> sp.csr_matrix:
        """(n_queries, E) matrix summing weighted messages into their query."""
        key = "_scatter_norm" if normalize else "_scatter"
        cached = self.__dict__.get(key)
        if cached is not None:
            return cached
        w = self.weights
        if normalize:
            q = self.neighbors.edge_queries()
            tot = np.bincount(q, weights=w, minlength=self.n_queries)
            w = w / np.where(tot[q] > 0, tot[q], 1.0)
        mat = sp.csr_matrix((w, (self.neighbors.edge_queries(), np.arange(self.n_edges))),
                            shape=(self.n_queries, self.n_edges))
        self.__dict__[key] = mat
        return mat


def build_edge_graph(queries: np.ndarray, targets: np.ndarray, r: float, cap: int,
                     query_dist: np.ndarray, target_dist: np.ndarray, grid: LatentGrid,
                     target_weights: np.ndarray | None = None, seed: int = 0) -> EdgeGraph:
    """Neighbourhoods of ``queries`` among ``targets``.

    With ``target_weights`` each edge gets the weight of its target point
    (Riemann sum over an irregular cloud); otherwise ``1 / M`` per query.
    """
    nb = ball_neighbors(queries, targets, r, cap, seed)
    e = nb.n_edges
    qi = nb.edge_queries()
    gather = sp.csr_matrix((np.ones(e), (np.arange(e), nb.indices)), shape=(e, len(targets)))
    scale = float(np.linalg.norm(grid.upper - grid.origin))
    geo = np.concatenate([grid.normalized(queries[qi]), grid.normalized(targets[nb.indices]),
                          (query_dist[qi] / scale)[:, None], (target_dist[nb.indices] / scale)[:, None]],
                         axis=1)
    if target_weights is None:
        w = grid_weights(nb)
    else:
        w = np.asarray(target_weights, dtype=np.float64)[nb.indices]
    return EdgeGraph(nb, len(queries), len(targets), gather, geo, w)


class KernelNet(Module):
    """Edge features -> ``c_in x c_out`` kernel matrix (one hidden layer).

    The first layer is split into a geometric part, shared by every time
    frame, and an optional part reading field values ``a(y)`` at the target.
    """

    def __init__(self, c_in: int, c_out: int, hidden: int, rng: np.random.Generator,
                 value_dim: int = 0):
        fan = GEO_DIM + value_dim
        self.w_geo = T.uniform_init((GEO_DIM, hidden), fan, rng)
        self.w_val = T.uniform_init((value_dim, hidden), fan, rng) if value_dim else None
        self.b1 = T.uniform_init((hidden,), fan, rng)
        self.out = Linear(hidden, c_in * c_out, rng)
        self.c_in, self.c_out, self.value_dim = c_in, c_out, value_dim

    def hidden(self, geo: np.ndarray, edge_values: Tensor | None = None) -> Tensor:
        """Hidden edge activations ``(..., E, hidden)``."""
        h = T.linear(Tensor(geo, dtype=self.w_geo.dtype), self.w_geo, self.b1)
        if self.w_val is not None:
            if edge_values is None:
                raise ValueError("this kernel reads target values; none given")
            if edge_values.shape[-1] != self.value_dim:
                raise ValueError(f"kernel expects {self.value_dim} value channels, "
                                 f"got {edge_values.shape[-1]}")
            h = T.add(h, T.linear(edge_values, self.w_val))
        return T.gelu(h)

    def __call__(self, geo: np.ndarray, edge_values: Tensor | None = None) -> Tensor:
        """Explicit per-edge kernel matrices ``(..., E, c_in, c_out)``."""
        k = self.out(self.hidden(geo, edge_values))
        return T.reshape(k, k.shape[:-1] + (self.c_in, self.c_out))

    def messages(self, hidden: Tensor, edge_values: Tensor) -> Tensor:
        """``kappa(e) v`` per edge without materialising the kernel matrices.

        ``kappa = reshape(W h + b)`` is linear in ``h``, so the product is
        contracted directly from ``h``, ``v``, ``W`` and ``b``.
        """
        return T.edge_messages(hidden, edge_values, self.out.weight, self.out.bias)


class IdentityKernel(Module):
    """Frozen ``kappa = I``; turns a layer into a (weighted) neighbour average."""

    def __init__(self, channels: int):
        self.c_in = self.c_out = channels
        self.value_dim = 0

    def hidden(self, geo: np.ndarray, edge_values=None):
        return None

    def __call__(self, geo: np.ndarray, edge_values=None) -> Tensor:
        eye = np.broadcast_to(np.eye(self.c_in), (len(geo), self.c_in, self.c_in))
        return Tensor(eye)

    def messages(self, hidden, edge_values: Tensor) -> Tensor:
        return edge_values


_LETTERS = "tsbq"


def integrate_matrices(target_values, kernel: Tensor, graph: EdgeGraph, normalize: bool = False) -> Tensor:
    """Weighted neighbour sum with explicit kernel matrices ``(..., E, c_in, c_out)``."""
    v = T.as_tensor(target_values)
    _check_values(v, graph, kernel.shape[-2])
    if kernel.shape[-3] != graph.n_edges:
        raise ValueError(f"kernel has {kernel.shape[-3]} edges, graph has {graph.n_edges}")
    vals = T.sparse_apply(graph.gather, v)
    lead_v = _LETTERS[: v.ndim - 2]
    lead_k = _LETTERS[: kernel.ndim - 3]
    if lead_k and lead_k != lead_v:
        raise ValueError(f"kernel leading shape {kernel.shape[:-3]} incompatible with values {v.shape[:-2]}")
    msg = T.einsum(f"{lead_k}eio,{lead_v}ei->{lead_v}eo", kernel, vals)
    return T.sparse_apply(graph.scatter(normalize), msg)


def _check_values(v: Tensor, graph: EdgeGraph, c_in: int) -> None:
    if v.shape[-2] != graph.n_targets:
        raise ValueError(f"values have {v.shape[-2]} points, graph has {graph.n_targets} targets")
    if v.shape[-1] != c_in:
        raise ValueError(f"channel mismatch: values carry {v.shape[-1]} channels, kernel expects {c_in}")


def kernel_integrate(target_values, graph: EdgeGraph, net, normalize: bool = False,
                     value_features: bool = False, hidden_cache: dict | None = None) -> Tensor:
    """``out(x) = sum_{y in N(x)} kappa(e(x, y)) v(y) mu(y)``; empty queries get zeros.

    ``target_values`` is ``(..., n_targets, c_in)``. With ``value_features``
    the edge features include the target values; otherwise the kernel is
    purely geometric and its hidden activations may be shared through
    ``hidden_cache``.
    """
    v = T.as_tensor(target_values)
    _check_values(v, graph, net.c_in)
    vals = T.sparse_apply(graph.gather, v)
    if value_features:
        hidden = net.hidden(graph.geo, vals)
    else:
        key = id(net)
        hidden = None if hidden_cache is None else hidden_cache.get(key)
        if hidden is None:
            hidden = net.hidden(graph.geo)
            if hidden_cache is not None and hidden is not None:
                hidden_cache[key] = hidden
    msg = net.messages(hidden, vals)
    return T.sparse_apply(graph.scatter(normalize), msg)


class KernelLayer(Module):
    """One kernel-integration layer ``act(K v + W v + b)`` on a fixed graph.

    ``W`` (pointwise skip) only exists when queries and targets coincide.
    """

    def __init__(self, graph_key: str, kernel, rng: np.random.Generator | None = None,
                 skip: bool = False, bias: bool = True, activation: bool = True,
                 normalize: bool = False, value_features: bool = False):
        self.graph_key = graph_key
        self.kernel = kernel
        self.skip = Linear(kernel.c_in, kernel.c_out, rng, bias=False) if skip else None
        self.bias = Tensor(np.zeros(kernel.c_out), requires_grad=True) if bias else None
        self._activation = activation
        self._normalize = normalize
        self._value_features = value_features

    def __call__(self, v, graphs: dict, kernel_cache: dict | None = None) -> Tensor:
        g = graphs[self.graph_key]
        v = T.as_tensor(v)
        out = kernel_integrate(v, g, self.kernel, self._normalize, self._value_features, kernel_cache)
        if self.skip is not None:
            out = T.add(out, self.skip(v))
        if self.bias is not None:
            out = T.add(out, self.bias)
        return T.gelu(out) if self._activation else out


class GraphEncoder(Module):
    """Irregular cloud -> latent grid: ``a(y)`` on the cloud to ``c`` channels per node."""

    def __init__(self, layers: list):
        self.layers = layers

    @classmethod
    def build(cls, in_channels: int, widths, hidden: int, rng: np.random.Generator,
              value_features: bool = True) -> "GraphEncoder":
        widths = list(widths)
        layers = [KernelLayer("enc", KernelNet(in_channels, widths[0], hidden, rng,
                                               value_dim=in_channels if value_features else 0),
                              rng, activation=len(widths) > 1, value_features=value_features)]
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            layers.append(KernelLayer("grid", KernelNet(a, b, hidden, rng), rng, skip=True,
                                      activation=not last))
        return cls(layers)

    @classmethod
    def averaging(cls, channels: int) -> "GraphEncoder":
        """Frozen single layer: normalised quadrature-weighted neighbour mean."""
        return cls([KernelLayer("enc", IdentityKernel(channels), bias=False, activation=False,
                                normalize=True)])

    @property
    def out_channels(self) -> int:
        return self.layers[-1].kernel.c_out

    def __call__(self, a, graphs: dict, kernel_cache: dict | None = None) -> Tensor:
        v = a
        for layer in self.layers:
            v = layer(v, graphs, kernel_cache)
        return v


class GraphDecoder(Module):
    """Latent grid -> cloud, ending in a pointwise projection to the field channels."""

    def __init__(self, layers: list, head: Linear | None = None):
        self.layers = layers
        self.head = head

    @classmethod
    def build(cls, in_channels: int, widths, out_channels: int, hidden: int,
              rng: np.random.Generator) -> "GraphDecoder":
        widths = list(widths)
        chans = [in_channels] + widths
        layers = []
        for i in range(len(widths)):
            last = i == len(widths) - 1
            key = "dec" if last else "grid"
            layers.append(KernelLayer(key, KernelNet(chans[i], chans[i + 1], hidden, rng), rng,
                                      skip=not last))
        return cls(layers, Linear(widths[-1], out_channels, rng))

    @classmethod
    def averaging(cls, channels: int) -> "GraphDecoder":
        return cls([KernelLayer("dec", IdentityKernel(channels), bias=False, activation=False)])

    def __call__(self, latent, graphs: dict, kernel_cache: dict | None = None) -> Tensor:
        v = latent
        for layer in self.layers:
            v = layer(v, graphs, kernel_cache)
        return self.head(v) if self.head is not None else v


@dataclass
class GeometryGraphs:
    """All fixed graph structure for one cloud/grid pair."""

    cloud: PointCloud
    grid: LatentGrid
    graphs: dict
    radius: float
    grid_radius: float
    decode_radius: float
    cloud_dist: np.ndarray
    grid_dist: np.ndarray

    def __getitem__(self, key) -> EdgeGraph:
        return self.graphs[key]

    def flags(self) -> dict:
        """Count of queries without neighbours per graph."""
        return {k: int(g.empty.sum()) for k, g in self.graphs.items()}


def build_geometry_graphs(cloud: PointCloud, grid: LatentGrid, radius_factor: float = 2.5,
                          grid_radius_factor: float = 1.0, cap: int = 32, k_density: int = 4,
                          seed: int = 0, radius: float | None = None,
                          decode_radius: float | None = None, grid_cap: int | None = None) -> GeometryGraphs:
    """Encoder (grid <- cloud), latent (grid <- grid) and decoder (cloud <- grid) graphs.

    Encoder edges carry Riemann weights of the cloud divided by the ball
    volume, so the sum approximates a ball average. The decoder radius is
    raised to at least one grid diagonal half-step so every cloud point sees
    a grid node.
    """
    nodes = grid.nodes()
    r = radius if radius is not None else radius_factor * cloud.mean_spacing()
    h = float(grid.spacing.max())
    r_grid = grid_radius_factor * h
    min_dec = 0.5 * float(np.linalg.norm(grid.spacing)) * 1.0001
    r_dec = decode_radius if decode_radius is not None else max(r, min_dec)
    cloud_dist = np.zeros(len(cloud))
    grid_dist = distance_features(nodes, cloud)
    mu = riemann_weights(cloud, min(k_density, len(cloud) - 1))
    mu = mu / (4.0 / 3.0 * math.pi * r ** 3)
    graphs = {
        "enc": build_edge_graph(nodes, cloud.coords, r, cap, grid_dist, cloud_dist, grid, mu, seed),
        "grid": build_edge_graph(nodes, nodes, r_grid, grid_cap or 125, grid_dist, grid_dist, grid, None, seed),
        "dec": build_edge_graph(cloud.coords, nodes, r_dec, cap, cloud_dist, grid_dist, grid, None, seed),
    }
    n_dec_empty = int(graphs["dec"].empty.sum())
    if n_dec_empty:
        log.warning("%d cloud points have no grid node within the decoder radius", n_dec_empty)
    return GeometryGraphs(cloud, grid, graphs, r, r_grid, r_dec, cloud_dist, grid_dist)


def encode(a, geo: GeometryGraphs, net: GraphEncoder, kernel_cache: dict | None = None) -> Tensor:
    """Fields on the cloud ``(..., N, d_a)`` -> latent ``(..., S1*S2*S3, c)``."""
    a = T.as_tensor(a)
    if a.shape[-2] != len(geo.cloud):
        raise ValueError(f"field has {a.shape[-2]} points, cloud has {len(geo.cloud)}")
    return net(a, geo.graphs, kernel_cache)


def decode(latent, geo: GeometryGraphs, net: GraphDecoder, kernel_cache: dict | None = None) -> Tensor:
    """Latent ``(..., S1*S2*S3, c)`` -> fields on the cloud ``(..., N, d_out)``."""
    latent = T.as_tensor(latent)
    if latent.shape[-2] != geo.grid.n_nodes:
        raise ValueError(f"latent has {latent.shape[-2]} nodes, grid has {geo.grid.n_nodes}")
    return net(latent, geo.graphs, kernel_cache)
