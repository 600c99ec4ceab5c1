"""Areal adjacency structures and intrinsic Gaussian precision matrices.

Provides the region graph abstraction (symmetric neighbor lists with
optional planar centroids), the intrinsic autoregressive precision
A = D - W used for areal smoothing, the two-dimensional second-order
random-walk (thin-plate) precision on a regular lattice, a k-nearest-
neighbour graph builder, and the text-file readers for adjacency and
centroid inputs.

Intrinsic precisions are represented together with their null-space
constraint vectors and rank deficiency so downstream inference can
enforce the identifiability constraints exactly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

__all__ = [
    "RegionGraph",
    "SparsePrecision",
    "LatticeMap",
    "GraphConnectivityError",
    "icar_precision",
    "knn_graph",
    "rw2d_precision",
    "snap_to_lattice",
    "rook_lattice",
    "read_adjacency",
    "read_centroids",
]


class GraphConnectivityError(ValueError):
    """Raised when an operation requires a connected region graph."""

    def __init__(self, message: str, components=None):
        super().__init__(message)
        self.components = components


def _format_components(components, limit: int = 12) -> str:
    parts = []
    for comp in components:
        shown = ", ".join(str(i) for i in comp[:limit])
        more = f", ... ({len(comp)} regions)" if len(comp) > limit else ""
        parts.append(f"[{shown}{more}]")
    return "; ".join(parts)


@dataclass(frozen=True)
class RegionGraph:
    """Symmetric areal neighborhood structure.

    ``neighbor_lists[i]`` is the sorted tuple of regions adjacent to
    region ``i``; ``centroids`` optionally carries an (n, 2) array of
    planar coordinates.
    """

    n: int
    neighbor_lists: tuple
    centroids: np.ndarray | None = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("graph needs at least one region")
        if len(self.neighbor_lists) != self.n:
            raise ValueError("neighbor_lists length must equal n")
        seen = set()
        for i, nbrs in enumerate(self.neighbor_lists):
            if list(nbrs) != sorted(set(nbrs)):
                raise ValueError(f"neighbors of region {i} not sorted/unique")
            for j in nbrs:
                if not (0 <= j < self.n):
                    raise ValueError(f"neighbor index {j} out of range")
                if j == i:
                    raise ValueError(f"self-loop at region {i}")
                seen.add((i, j))
        for i, j in seen:
            if (j, i) not in seen:
                raise ValueError(f"asymmetric edge {i}-{j}")
        if self.centroids is not None:
            c = np.asarray(self.centroids, dtype=float)
            if c.shape != (self.n, 2) or not np.all(np.isfinite(c)):
                raise ValueError("centroids must be a finite (n, 2) array")
            object.__setattr__(self, "centroids", c)

    @classmethod
    def from_edges(cls, n: int, edges, centroids=None) -> "RegionGraph":
        """Build from an iterable of undirected (i, j) pairs."""
        lists = [set() for _ in range(n)]
        for i, j in edges:
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"edge ({i}, {j}) out of range for n={n}")
            if i == j:
                raise ValueError(f"self-loop edge ({i}, {j})")
            lists[i].add(j)
            lists[j].add(i)
        return cls(n=n,
                   neighbor_lists=tuple(tuple(sorted(s)) for s in lists),
                   centroids=centroids)

    @property
    def degrees(self) -> np.ndarray:
        return np.array([len(nbrs) for nbrs in self.neighbor_lists])

    def edge_list(self):
        """Sorted list of undirected edges as (i, j) with i < j."""
        return [(i, j) for i in range(self.n)
                for j in self.neighbor_lists[i] if i < j]

    def adjacency_matrix(self) -> sparse.csr_array:
        """0/1 neighborhood matrix W as sparse CSR."""
        rows, cols = [], []
        for i, nbrs in enumerate(self.neighbor_lists):
            rows.extend([i] * len(nbrs))
            cols.extend(nbrs)
        data = np.ones(len(rows))
        return sparse.csr_array((data, (rows, cols)), shape=(self.n, self.n))

    def with_centroids(self, centroids) -> "RegionGraph":
        return dataclasses.replace(self, centroids=np.asarray(centroids,
                                                              dtype=float))

    def connected_components(self):
        """List of components, each a sorted list of region indices."""
        if self.n == 1:
            return [[0]]
        ncomp, labels = csgraph.connected_components(
            self.adjacency_matrix(), directed=False)
        return [sorted(np.flatnonzero(labels == c).tolist())
                for c in range(ncomp)]


@dataclass(frozen=True)
class SparsePrecision:
    """Symmetric (possibly intrinsic) precision with its constraints.

    ``constraint_vectors`` span the intended null space; ``rank_deficiency``
    is its dimension (0 for proper precisions).
    """

    matrix: sparse.csr_array
    constraint_vectors: tuple = ()
    rank_deficiency: int = 0

    def __post_init__(self):
        m = self.matrix
        if m.shape[0] != m.shape[1]:
            raise ValueError("precision must be square")
        asym = abs(m - m.T)
        if asym.nnz and asym.max() > 1e-12:
            raise ValueError("precision must be symmetric")
        if self.rank_deficiency < 0:
            raise ValueError("rank_deficiency must be nonnegative")
        cons = tuple(np.asarray(v, dtype=float) for v in
                     self.constraint_vectors)
        for v in cons:
            if v.shape != (m.shape[0],):
                raise ValueError("constraint vector has wrong length")
        object.__setattr__(self, "constraint_vectors", cons)

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def scaled(self, tau: float) -> "SparsePrecision":
        """Same structure with every entry multiplied by tau > 0."""
        if not tau > 0:
            raise ValueError("tau must be positive")
        return SparsePrecision(matrix=(self.matrix * tau).tocsr(),
                               constraint_vectors=self.constraint_vectors,
                               rank_deficiency=self.rank_deficiency)


@dataclass(frozen=True)
class LatticeMap:
    """Assignment of regions to cells of an m1 x m2 regular lattice.

    ``cell_index[r]`` is the flattened cell (row * m2 + col) hosting
    region r; several regions may share a cell.
    """

    shape: tuple
    cell_index: np.ndarray
    cell_size: tuple = (1.0, 1.0)

    def __post_init__(self):
        m1, m2 = self.shape
        idx = np.asarray(self.cell_index, dtype=np.int64)
        if idx.ndim != 1:
            raise ValueError("cell_index must be one-dimensional")
        if idx.size and (idx.min() < 0 or idx.max() >= m1 * m2):
            raise ValueError("cell_index out of lattice bounds")
        object.__setattr__(self, "cell_index", idx)

    @property
    def n_cells(self) -> int:
        return int(self.shape[0] * self.shape[1])

    @property
    def n_regions(self) -> int:
        return int(self.cell_index.size)

    def membership_matrix(self) -> sparse.csr_array:
        """(n_regions, n_cells) 0/1 matrix mapping cells to regions."""
        n = self.n_regions
        data = np.ones(n)
        rows = np.arange(n)
        return sparse.csr_array((data, (rows, self.cell_index)),
                                shape=(n, self.n_cells))


def icar_precision(graph: RegionGraph) -> SparsePrecision:
    """Intrinsic autoregressive precision A = D - W for a connected graph.

    Row sums are exactly zero, the null space is the constant vector,
    and the sum-to-zero constraint is attached.  Raises
    GraphConnectivityError naming the components if the graph is
    disconnected (each component would need its own constraint).
    """
    comps = graph.connected_components()
    if len(comps) > 1:
        raise GraphConnectivityError(
            f"graph has {len(comps)} connected components; the intrinsic "
            f"autoregressive prior needs a single component. Components: "
            f"{_format_components(comps)}", components=comps)
    w = graph.adjacency_matrix()
    d = sparse.diags_array(graph.degrees.astype(float)).tocsr()
    a = (d - w).tocsr()
    return SparsePrecision(matrix=a,
                           constraint_vectors=(np.ones(graph.n),),
                           rank_deficiency=1)


def knn_graph(centroids, k_per_node) -> RegionGraph:
    """Union-symmetrized k-nearest-neighbour graph on planar points.

    Node i is linked to its ``k_per_node[i]`` nearest other nodes
    (Euclidean distance, ties broken by smaller index), then the
    directed sets are OR-symmetrized.  Deterministic for any input,
    including coincident points.
    """
    pts = np.asarray(centroids, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("centroids must be an (n, 2) array")
    if not np.all(np.isfinite(pts)):
        raise ValueError("centroids must be finite")
    n = pts.shape[0]
    ks = np.asarray(k_per_node, dtype=np.int64)
    if ks.shape != (n,):
        raise ValueError("k_per_node must have one entry per node")
    if np.any(ks < 0) or np.any(ks >= n):
        bad = int(np.flatnonzero((ks < 0) | (ks >= n))[0])
        raise ValueError(
            f"k_per_node[{bad}]={ks[bad]} outside [0, n-1] for n={n}")
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    edges = set()
    idx = np.arange(n)
    for i in range(n):
        if ks[i] == 0:
            continue
        order = np.lexsort((idx, dist[i]))
        order = order[order != i][:ks[i]]
        for j in order:
            edges.add((min(i, int(j)), max(i, int(j))))
    return RegionGraph.from_edges(n, sorted(edges), centroids=pts)


def rook_lattice(nrows: int, ncols: int) -> RegionGraph:
    """Regular lattice with rook (edge-sharing) adjacency.

    Region (r, c) has index r * ncols + c and centroid (c, r).
    """
    if nrows < 1 or ncols < 1:
        raise ValueError("lattice dimensions must be positive")
    edges = []
    for r in range(nrows):
        for c in range(ncols):
            i = r * ncols + c
            if c + 1 < ncols:
                edges.append((i, i + 1))
            if r + 1 < nrows:
                edges.append((i, i + ncols))
    cent = np.array([[c, r] for r in range(nrows) for c in range(ncols)],
                    dtype=float)
    return RegionGraph.from_edges(nrows * ncols, edges, centroids=cent)


def rw2d_precision(lattice: LatticeMap) -> SparsePrecision:
    """Second-order random-walk (thin-plate) precision on the lattice.

    Q = B'B where B stacks all row-wise second differences, column-wise
    second differences, and sqrt(2)-scaled mixed first differences.  The
    interior stencil is (20, -8, 2, 1) and the null space is exactly
    {constant, row ramp, column ramp} (rank deficiency 3), so the
    precision is positive definite on the complement of those trends.
    """
    m1, m2 = int(lattice.shape[0]), int(lattice.shape[1])
    if m1 < 4 or m2 < 4:
        raise ValueError(f"lattice {m1}x{m2} too small; need at least 4x4")
    ncell = m1 * m2

    def flat(r, c):
        return r * m2 + c

    rows, cols, vals = [], [], []
    nrow = 0

    def add(entries):
        nonlocal nrow
        for r, c, v in entries:
            rows.append(nrow)
            cols.append(flat(r, c))
            vals.append(v)
        nrow += 1

    for r in range(m1):
        for c in range(1, m2 - 1):
            add([(r, c - 1, 1.0), (r, c, -2.0), (r, c + 1, 1.0)])
    for c in range(m2):
        for r in range(1, m1 - 1):
            add([(r - 1, c, 1.0), (r, c, -2.0), (r + 1, c, 1.0)])
    s = np.sqrt(2.0)
    for r in range(m1 - 1):
        for c in range(m2 - 1):
            add([(r, c, s), (r, c + 1, -s), (r + 1, c, -s),
                 (r + 1, c + 1, s)])

    b = sparse.csr_array((vals, (rows, cols)), shape=(nrow, ncell))
    q = (b.T @ b).tocsr()
    rr, cc = np.meshgrid(np.arange(m1), np.arange(m2), indexing="ij")
    constraints = (np.ones(ncell), rr.ravel().astype(float),
                   cc.ravel().astype(float))
    return SparsePrecision(matrix=q, constraint_vectors=constraints,
                           rank_deficiency=3)


def snap_to_lattice(centroids, grid) -> LatticeMap:
    """Affinely rescale the centroid bounding box onto an m1 x m2 grid.

    The y coordinate maps to rows, x to columns; each region gets the
    nearest cell.  Collisions are allowed.  If one axis is degenerate
    (all equal) the regions share the middle row/column of that axis;
    if both are degenerate the mapping is undefined and an error is
    raised.
    """
    pts = np.asarray(centroids, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("centroids must be an (n, 2) array")
    if not np.all(np.isfinite(pts)):
        raise ValueError("centroids must be finite")
    m1, m2 = int(grid[0]), int(grid[1])
    if m1 * m2 < 16:
        raise ValueError(f"grid {m1}x{m2} too coarse; need m1*m2 >= 16")
    spans = pts.max(axis=0) - pts.min(axis=0)
    if np.all(spans == 0.0):
        raise ValueError("degenerate bounding box: all centroids identical")

    def axis_cells(vals, m):
        lo, hi = vals.min(), vals.max()
        if hi == lo:
            return np.full(vals.shape, (m - 1) // 2, dtype=np.int64)
        scaled = (vals - lo) / (hi - lo) * (m - 1)
        return np.clip(np.rint(scaled).astype(np.int64), 0, m - 1)

    rows = axis_cells(pts[:, 1], m1)
    cols = axis_cells(pts[:, 0], m2)
    size = (spans[0] / max(m2 - 1, 1), spans[1] / max(m1 - 1, 1))
    return LatticeMap(shape=(m1, m2), cell_index=rows * m2 + cols,
                      cell_size=(float(size[0]), float(size[1])))


def read_adjacency(path, n: int | None = None) -> RegionGraph:
    """Read an edge-list file: one undirected edge "i j" per line.

    Indices are 0-based with i < j; blank lines and lines starting with
    '#' are skipped.  If ``n`` is omitted it is inferred as max index + 1.
    Errors carry the offending line number.
    """
    path = Path(path)
    edges = []
    seen = set()
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(
                    f"{path}:{lineno}: expected two indices, got {line!r}")
            try:
                i, j = int(parts[0]), int(parts[1])
            except ValueError:
                raise ValueError(
                    f"{path}:{lineno}: non-integer index in {line!r}") \
                    from None
            if i < 0 or j < 0:
                raise ValueError(f"{path}:{lineno}: negative index")
            if i >= j:
                raise ValueError(
                    f"{path}:{lineno}: edges must satisfy i < j, got {i} {j}")
            if (i, j) in seen:
                raise ValueError(f"{path}:{lineno}: duplicate edge {i} {j}")
            seen.add((i, j))
            edges.append((i, j))
    inferred = (max((j for _, j in edges), default=0) + 1) if edges else 1
    size = inferred if n is None else int(n)
    if n is not None and inferred > size:
        raise ValueError(
            f"{path}: edge index {inferred - 1} exceeds region count {size}")
    return RegionGraph.from_edges(size, edges)


def read_centroids(path):
    """Read a centroid CSV with header ``id,x,y``.

    Returns (ids, coords) with ids as strings in file order and coords
    an (n, 2) float array.  Errors carry the offending line number.
    """
    path = Path(path)
    ids, xs, ys = [], [], []
    with path.open() as fh:
        header = fh.readline()
        cols = [c.strip().lower() for c in header.strip().split(",")]
        if cols[:3] != ["id", "x", "y"]:
            raise ValueError(
                f"{path}:1: expected header 'id,x,y', got {header.strip()!r}")
        for lineno, raw in enumerate(fh, start=2):
            line = raw.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 3:
                raise ValueError(
                    f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
            try:
                x, y = float(parts[1]), float(parts[2])
            except ValueError:
                raise ValueError(
                    f"{path}:{lineno}: non-numeric coordinate in {line!r}") \
                    from None
            if not (np.isfinite(x) and np.isfinite(y)):
                raise ValueError(f"{path}:{lineno}: non-finite coordinate")
            ids.append(parts[0])
            xs.append(x)
            ys.append(y)
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ValueError(f"{path}: duplicate ids {dup}")
    return ids, np.column_stack([xs, ys]) if ids else np.empty((0, 2))
