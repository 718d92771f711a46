#!/usr/bin/env python3
"""
Communication Graph (networkx backed)
Weighted undirected topology, Laplacian, ordered spectrum and the
relative-output term (L ⊗ I_n) y exchanged between neighbours.
"""

import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
import networkx as nx

logger = logging.getLogger(__name__)

# lambda_2 below this counts as a disconnected graph
CONNECTIVITY_TOL = 1e-10


class TopologyError(ValueError):
    """Invalid adjacency or dimension mismatch."""


class SpectrumError(RuntimeError):
    """Eigensolver failure."""


def _validate_adjacency(adjacency: np.ndarray):
    if adjacency.ndim != 2 or adjacency.shape[0] != adjacency.shape[1]:
        raise TopologyError(f"Adjacency must be square, got shape {adjacency.shape}")
    if not np.all(np.isfinite(adjacency)):
        raise TopologyError("Adjacency has non-finite entries")
    if np.any(adjacency < 0):
        raise TopologyError("Adjacency has negative weights")
    if not np.array_equal(adjacency, adjacency.T):
        raise TopologyError("Adjacency is not symmetric (directed graphs are not supported)")
    if np.any(np.diag(adjacency) != 0):
        raise TopologyError("Adjacency has self edges (nonzero diagonal)")


@dataclass(frozen=True, eq=False)
class Topology:
    """Undirected weighted graph over N agents."""
    adjacency: np.ndarray

    def __post_init__(self):
        adjacency = np.array(self.adjacency, dtype=float)
        _validate_adjacency(adjacency)
        adjacency.setflags(write=False)
        object.__setattr__(self, "adjacency", adjacency)

    @property
    def N(self) -> int:
        return self.adjacency.shape[0]

    @classmethod
    def ring(cls, n: int) -> "Topology":
        """Unit-weight ring 1-2-...-n-1."""
        if n < 1:
            raise TopologyError("A topology needs at least one agent")
        if n < 3:
            return cls.complete(n)
        return cls(nx.to_numpy_array(nx.cycle_graph(n), nodelist=range(n)))

    @classmethod
    def complete(cls, n: int) -> "Topology":
        if n < 1:
            raise TopologyError("A topology needs at least one agent")
        return cls(nx.to_numpy_array(nx.complete_graph(n), nodelist=range(n)))

    @classmethod
    def from_flat(cls, n: int, values: Sequence[float]) -> "Topology":
        """Build from a row-major list of n*n weights."""
        values = list(values)
        if len(values) != n * n:
            raise TopologyError(f"Custom adjacency needs {n * n} entries, got {len(values)}")
        return cls(np.asarray(values, dtype=float).reshape(n, n))

    def to_networkx(self) -> nx.Graph:
        return nx.from_numpy_array(np.asarray(self.adjacency))

    def is_connected(self) -> bool:
        return nx.is_connected(self.to_networkx())

    def neighbors(self, i: int) -> Tuple[int, ...]:
        return tuple(int(j) for j in np.flatnonzero(self.adjacency[i]))


@dataclass(frozen=True)
class Spectrum:
    """Laplacian eigenvalues sorted ascending."""
    eigenvalues: Tuple[float, ...]

    @property
    def lambda1(self) -> float:
        return self.eigenvalues[0]

    @property
    def lambda2(self) -> float:
        return self.eigenvalues[1] if len(self.eigenvalues) > 1 else 0.0

    @property
    def lambdaN(self) -> float:
        return self.eigenvalues[-1]

    @property
    def connected(self) -> bool:
        return len(self.eigenvalues) == 1 or self.lambda2 > CONNECTIVITY_TOL


def laplacian(top: Topology) -> np.ndarray:
    """L with l_ii = sum_j a_ij and l_ij = -a_ij."""
    _validate_adjacency(np.asarray(top.adjacency))
    graph = top.to_networkx()
    return nx.laplacian_matrix(graph, nodelist=range(top.N), weight="weight").toarray().astype(float)


def spectrum(L: np.ndarray) -> Spectrum:
    """Ascending eigenvalues of a symmetric Laplacian."""
    L = np.asarray(L, dtype=float)
    try:
        values = np.linalg.eigvalsh(L)
    except np.linalg.LinAlgError as e:
        raise SpectrumError(f"Laplacian eigensolver did not converge: {e}") from e
    values = np.sort(values)
    # lambda_1 is zero up to round-off
    values[0] = 0.0 if abs(values[0]) < CONNECTIVITY_TOL else values[0]
    return Spectrum(tuple(float(v) for v in values))


def relative_output(top, y) -> np.ndarray:
    """(L ⊗ I_n) y; row i equals sum_j a_ij (y_i - y_j).

    Args:
        top: Topology or a precomputed Laplacian
        y: stacked vector of length n*N, or an (N, n) array

    Returns:
        same shape as y
    """
    L = laplacian(top) if isinstance(top, Topology) else np.asarray(top, dtype=float)
    N = L.shape[0]
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        if y.size % N != 0:
            raise TopologyError(f"Stacked output of length {y.size} does not split over {N} agents")
        return (L @ y.reshape(N, -1)).ravel()
    if y.ndim != 2 or y.shape[0] != N:
        raise TopologyError(f"Output array of shape {y.shape} does not match {N} agents")
    return L @ y


def orthogonal_frame(N: int) -> Tuple[np.ndarray, np.ndarray]:
    """r1 = 1/sqrt(N) and an orthonormal basis r2 of its complement."""
    from scipy.linalg import null_space

    r1 = np.full((N, 1), 1.0 / np.sqrt(N))
    r2 = null_space(np.ones((1, N))) if N > 1 else np.zeros((1, 0))
    return r1, r2
