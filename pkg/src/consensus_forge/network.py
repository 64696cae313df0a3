"""Communication graph, pinning, grounded Laplacian and its spectral data.

Nodes are labelled 1..N throughout the public API (edges, pinned sets);
arrays are indexed 0..N-1 internally.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import DimensionMismatch, NotPositiveDefinite, NumericalFailure

ORTH_TOL = 1e-12
# relative gap below which two eigenvalues count as tied
TIE_TOL = 1e-10


@dataclass(frozen=True)
class Graph:
    """Simple undirected graph on nodes 1..node_count with unit edge weights."""

    node_count: int
    edges: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if int(self.node_count) != self.node_count or self.node_count < 1:
            raise ValueError(f"node_count must be a positive integer, got {self.node_count!r}")
        normalized = set()
        for edge in self.edges:
            i, j = (int(v) for v in edge)
            if i == j:
                raise ValueError(f"self-loop at node {i}")
            if not (1 <= i <= self.node_count and 1 <= j <= self.node_count):
                raise ValueError(f"edge ({i}, {j}) outside nodes 1..{self.node_count}")
            pair = (min(i, j), max(i, j))
            if pair in normalized:
                raise ValueError(f"repeated edge {pair}")
            normalized.add(pair)
        object.__setattr__(self, "node_count", int(self.node_count))
        object.__setattr__(self, "edges", frozenset(normalized))

    @classmethod
    def from_edges(cls, node_count, edges):
        return cls(node_count, frozenset(tuple(e) for e in edges))

    @classmethod
    def path(cls, node_count):
        return cls.from_edges(node_count, [(i, i + 1) for i in range(1, node_count)])

    def sorted_edges(self):
        return sorted(self.edges)

    def adjacency(self):
        a = np.zeros((self.node_count, self.node_count))
        for i, j in self.edges:
            a[i - 1, j - 1] = a[j - 1, i - 1] = 1.0
        return a

    def neighbors(self, node):
        """1-based neighbour labels of ``node`` in increasing order."""
        out = [j if i == node else i for i, j in self.edges if node in (i, j)]
        return sorted(out)

    def is_connected(self):
        if self.node_count == 1:
            return True
        n_comp, _ = connected_components(self.adjacency(), directed=False)
        return n_comp == 1


@dataclass(frozen=True)
class Pinning:
    """Leader-access gains g_i in {0, 1}, one per node."""

    gains: tuple

    def __post_init__(self):
        gains = tuple(int(g) for g in self.gains)
        if any(g not in (0, 1) for g in gains):
            raise ValueError(f"pinning gains must be 0 or 1, got {self.gains!r}")
        object.__setattr__(self, "gains", gains)

    @classmethod
    def from_nodes(cls, node_count, pinned):
        pinned = {int(p) for p in pinned}
        bad = [p for p in pinned if not 1 <= p <= node_count]
        if bad:
            raise ValueError(f"pinned nodes {bad} outside 1..{node_count}")
        return cls(tuple(1 if i in pinned else 0 for i in range(1, node_count + 1)))

    @property
    def node_count(self):
        return len(self.gains)

    @property
    def pinned_nodes(self):
        return [i + 1 for i, g in enumerate(self.gains) if g]

    def matrix(self):
        return np.diag(np.asarray(self.gains, dtype=float))


@dataclass(frozen=True)
class SpectralData:
    """Orthogonal diagonalisation of L + G and the coupling coefficients.

    ``f = T' G T``; ``p[i] = f[i, i] - lambdas[i]``;
    ``q[i] = sqrt(sum_{j != i} f[i, j]**2)``. ``f``, ``p`` and ``q`` are
    ``None`` until :func:`coupling_coefficients` fills them in.
    """

    T: np.ndarray
    lambdas: np.ndarray
    f: np.ndarray | None = None
    p: np.ndarray | None = None
    q: np.ndarray | None = None

    @property
    def N(self):
        return len(self.lambdas)

    @property
    def lambda_min(self):
        return float(self.lambdas.min())

    @property
    def lambda_max(self):
        return float(self.lambdas.max())

    @property
    def p_sq(self):
        return float(np.max(self.p**2))

    @property
    def q_sq(self):
        return float(np.max(self.q**2))

    @property
    def complete(self):
        return self.f is not None


def build_laplacian(graph: Graph) -> np.ndarray:
    """L = D - A for a simple undirected unit-weight graph."""
    a = graph.adjacency()
    return np.diag(a.sum(axis=1)) - a


def smallest_eigenvalue(m):
    return float(np.linalg.eigvalsh(m)[0])


def grounded_matrix(laplacian, pinning: Pinning) -> np.ndarray:
    """Return L + G, raising :class:`NotPositiveDefinite` unless it is PD."""
    laplacian = np.asarray(laplacian, dtype=float)
    if laplacian.shape != (pinning.node_count, pinning.node_count):
        raise DimensionMismatch(
            f"Laplacian is {laplacian.shape}, pinning has {pinning.node_count} nodes"
        )
    lg = laplacian + pinning.matrix()
    lam = smallest_eigenvalue(lg)
    if lam <= ORTH_TOL * max(1.0, np.abs(lg).max()):
        raise NotPositiveDefinite(
            f"grounded matrix not positive definite (smallest eigenvalue {lam:.3e}); "
            "graph disconnected or no node pinned"
        )
    return lg


def _canonical_order(lambdas, vectors):
    dominant = np.argmax(np.abs(vectors), axis=0)
    order = list(np.argsort(lambdas, kind="stable"))
    scale = max(1.0, float(np.abs(lambdas).max()))
    out, k = [], 0
    while k < len(order):
        cluster = [order[k]]
        while k + 1 < len(order) and lambdas[order[k + 1]] - lambdas[cluster[-1]] <= TIE_TOL * scale:
            k += 1
            cluster.append(order[k])
        out.extend(sorted(cluster, key=lambda c: dominant[c]))
        k += 1
    return np.asarray(out, dtype=int)


def spectral_decomposition(lg, orth_tol=ORTH_TOL) -> SpectralData:
    """Orthogonally diagonalise a symmetric PD matrix.

    Eigenvalues come back ascending, ties ordered by the row index of each
    eigenvector's dominant component, and every column of ``T`` is signed so
    that its dominant component is positive.
    """
    lg = np.asarray(lg, dtype=float)
    if lg.ndim != 2 or lg.shape[0] != lg.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {lg.shape}")
    try:
        lambdas, vectors = np.linalg.eigh(0.5 * (lg + lg.T))
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"eigendecomposition failed: {exc}") from exc

    order = _canonical_order(lambdas, vectors)
    lambdas, T = lambdas[order], vectors[:, order]
    dominant = np.argmax(np.abs(T), axis=0)
    signs = np.sign(T[dominant, np.arange(T.shape[1])])
    T = T * np.where(signs == 0, 1.0, signs)

    n = T.shape[0]
    orth_err = np.linalg.norm(T.T @ T - np.eye(n))
    if orth_err > orth_tol * max(1, n):
        raise NumericalFailure(f"eigenvector basis not orthogonal: ||T'T - I||_F = {orth_err:.3e}")
    return SpectralData(T=T, lambdas=lambdas)


def coupling_coefficients(spectral: SpectralData, pinning: Pinning) -> SpectralData:
    T = spectral.T
    if T.shape[0] != pinning.node_count:
        raise DimensionMismatch(f"T is {T.shape}, pinning has {pinning.node_count} nodes")
    f = T.T @ pinning.matrix() @ T
    diag = np.diag(f).copy()
    off = f - np.diag(diag)
    return SpectralData(
        T=T,
        lambdas=spectral.lambdas,
        f=f,
        p=diag - spectral.lambdas,
        q=np.sqrt((off**2).sum(axis=1)),
    )


def analyze(graph: Graph, pinning: Pinning) -> SpectralData:
    """Laplacian -> grounded matrix -> eigenbasis -> coupling coefficients."""
    lg = grounded_matrix(build_laplacian(graph), pinning)
    return coupling_coefficients(spectral_decomposition(lg), pinning)
