"""
Graph representation and graph-convolution building blocks.

Node features are handled either as a single N×d matrix or as a batch
B×N×d; `propagate` multiplies every sample in a batch by the same Â without
mixing samples.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from diffirm.core.tensor import (
    Tensor,
    activation,
    elementwise,
    matmul,
    permute,
    relu,
    reshape,
)
from diffirm.errors import ContractError, DimensionError


@dataclass(frozen=True)
class Graph:
    """Undirected graph with a dense 0/1 adjacency and no self-loops."""

    adjacency: np.ndarray
    node_ids: tuple[str, ...] = field(default=())

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
            raise ContractError(f"adjacency must be a non-empty square matrix, got shape {a.shape}")
        if not np.isin(a, (0.0, 1.0)).all():
            raise ContractError("adjacency entries must be 0 or 1")
        if not np.array_equal(a, a.T):
            raise ContractError("adjacency must be symmetric (undirected graph)")
        if np.any(np.diag(a) != 0):
            raise ContractError("adjacency must have a zero diagonal; self-loops are added during normalization")
        if self.node_ids and len(self.node_ids) != a.shape[0]:
            raise ContractError("node_ids length does not match adjacency size")
        object.__setattr__(self, "adjacency", a)

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @classmethod
    def from_edges(cls, n_nodes: int, edges, node_ids=()) -> Graph:
        a = np.zeros((n_nodes, n_nodes))
        for i, j in edges:
            if i != j:
                a[i, j] = a[j, i] = 1.0
        return cls(a, tuple(node_ids))


def ring_graph(n: int) -> Graph:
    if n < 3:
        return path_graph(n)
    return Graph.from_edges(n, [(i, (i + 1) % n) for i in range(n)])


def path_graph(n: int) -> Graph:
    return Graph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


def normalize_adjacency(g: Graph) -> Tensor:
    """Â = D̃^(−1/2)(A + I)D̃^(−1/2), D̃ the degree matrix of A + I."""
    if not isinstance(g, Graph):
        g = Graph(np.asarray(g))
    a_tilde = g.adjacency + np.eye(g.n_nodes)
    d_inv_sqrt = 1.0 / np.sqrt(a_tilde.sum(axis=1))
    return Tensor(d_inv_sqrt[:, None] * a_tilde * d_inv_sqrt[None, :])


def spectral_radius(matrix, iterations: int = 500, seed: int = 0) -> float:
    """Power iteration estimate of the largest |eigenvalue| of a symmetric matrix."""
    m = matrix.data if isinstance(matrix, Tensor) else np.asarray(matrix, dtype=np.float64)
    v = np.random.default_rng(seed).standard_normal(m.shape[0])
    v /= np.linalg.norm(v)
    estimate = 0.0
    for _ in range(iterations):
        w = m @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        estimate = float(abs(v @ w))
        v = w / norm
    return estimate


def propagate(h: Tensor, a_hat: Tensor) -> Tensor:
    """Â·H for H of shape N×d or B×N×d."""
    n = a_hat.shape[0]
    if a_hat.ndim != 2 or a_hat.shape[1] != n:
        raise DimensionError(f"Â must be square, got {a_hat.shape}")
    if h.ndim == 2:
        if h.shape[0] != n:
            raise DimensionError(f"Â is {a_hat.shape} but H has {h.shape[0]} nodes")
        return matmul(a_hat, h)
    if h.ndim != 3 or h.shape[1] != n:
        raise DimensionError(f"Â is {a_hat.shape} but H has shape {h.shape}")
    b, _, d = h.shape
    flat = reshape(permute(h, (1, 0, 2)), (n, b * d))
    return permute(reshape(matmul(a_hat, flat), (n, b, d)), (1, 0, 2))


def gcn_layer(h: Tensor, a_hat: Tensor, w: Tensor, act: str = "relu") -> Tensor:
    """H' = act(Â H W); H is N×d_in or B×N×d_in."""
    if w.ndim != 2 or h.shape[-1] != w.shape[0]:
        raise DimensionError(f"gcn_layer: H {h.shape} does not match W {w.shape}")
    mixed = propagate(h, a_hat)
    if mixed.ndim == 2:
        return activation(matmul(mixed, w), act)
    b, n, d = mixed.shape
    out = matmul(reshape(mixed, (b * n, d)), w)
    return activation(reshape(out, (b, n, w.shape[1])), act)


def adaptive_adjacency(x: Tensor, params: dict[str, Tensor]) -> Tensor:
    """A_adp = W1 · relu((X W2) W3 (X W4)ᵀ + b) for X of shape N×F.

    W1 and b are scalars; W2, W4 are F×d and W3 is d×d.
    """
    w1, w2, w3, w4, b = (params[k] for k in ("w1", "w2", "w3", "w4", "b"))
    if x.ndim != 2 or w2.shape[0] != x.shape[1] or w4.shape[0] != x.shape[1]:
        raise DimensionError(f"adaptive_adjacency: X {x.shape} vs W2 {w2.shape}, W4 {w4.shape}")
    if w3.shape != (w2.shape[1], w4.shape[1]):
        raise DimensionError(f"adaptive_adjacency: W3 {w3.shape} not conformable")
    left = matmul(matmul(x, w2), w3)
    right = matmul(x, w4)
    bilinear = matmul(left, permute(right, (1, 0)))
    return elementwise(relu(elementwise(bilinear, b, "add")), w1, "mul")


def init_adaptive_params(n_features: int, dim: int, rng: np.random.Generator) -> dict[str, Tensor]:
    s = np.sqrt(6.0 / (n_features + dim))
    return {
        "w1": Tensor(1.0, requires_grad=True),
        "w2": Tensor(rng.uniform(-s, s, (n_features, dim)), requires_grad=True),
        "w3": Tensor(np.eye(dim), requires_grad=True),
        "w4": Tensor(rng.uniform(-s, s, (n_features, dim)), requires_grad=True),
        "b": Tensor(0.0, requires_grad=True),
    }
