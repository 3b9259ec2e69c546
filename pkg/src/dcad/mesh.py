"""Static mesh topology utilities.

Topology is fixed per program: faces, derived unique edges, and a fan
triangulation are computed once. Position-dependent quantities (geodesic
distances, cotangent weights, bi-Laplacian, volume, center of mass) take
vertex positions as input and are built on top of that fixed structure.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse import csgraph

COT_LIMIT = 1e6
DEGENERATE_AREA = 1e-12


class TopologyError(ValueError):
    pass


class DegenerateVolume(ArithmeticError):
    """Mesh volume too close to zero for a meaningful centroid."""


@dataclass(frozen=True)
class MeshTopology:
    n: int
    faces: tuple[tuple[int, ...], ...]
    edges: np.ndarray  # (E, 2) int, each row sorted, rows lexicographic
    tris: np.ndarray  # (T, 3) int, fan triangulation
    tri_face: np.ndarray  # (T,) source polygon index

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(a), int(b)) for a, b in self.edges}


def triangulate(faces: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Fan triangulation anchored at each polygon's first vertex."""
    tris: list[tuple[int, int, int]] = []
    tri_face: list[int] = []
    for fi, face in enumerate(faces):
        if len(face) < 3:
            raise TopologyError(f"face {fi} has fewer than 3 vertices")
        for i in range(1, len(face) - 1):
            tris.append((face[0], face[i], face[i + 1]))
            tri_face.append(fi)
    return (
        np.array(tris, dtype=np.int64).reshape(-1, 3),
        np.array(tri_face, dtype=np.int64),
    )


def build_topology(n: int, faces: Sequence[Sequence[int]]) -> MeshTopology:
    for fi, face in enumerate(faces):
        for v in face:
            if v < 0 or v >= n:
                raise TopologyError(f"face {fi} references vertex {v} outside 0..{n - 1}")
    edge_keys = set()
    for face in faces:
        for i, a in enumerate(face):
            b = face[(i + 1) % len(face)]
            edge_keys.add((a, b) if a < b else (b, a))
    edges = np.array(sorted(edge_keys), dtype=np.int64).reshape(-1, 2)
    tris, tri_face = triangulate(faces)
    return MeshTopology(n, tuple(tuple(f) for f in faces), edges, tris, tri_face)


def geodesic_distances(
    topology: MeshTopology, positions: np.ndarray, sources: Iterable[int]
) -> np.ndarray:
    """Multi-source shortest-path distance over the edge graph, weighted by
    Euclidean edge length at the given positions. Unreachable vertices get
    the sum of all edge lengths as a finite sentinel."""
    sources = list(sources)
    if not sources:
        raise ValueError("geodesic_distances needs at least one source")
    V = np.asarray(positions, dtype=float).reshape(topology.n, 3)
    lengths = np.linalg.norm(V[topology.edges[:, 0]] - V[topology.edges[:, 1]], axis=1)
    adjacency: list[list[tuple[int, float]]] = [[] for _ in range(topology.n)]
    for (a, b), w in zip(topology.edges, lengths):
        adjacency[int(a)].append((int(b), float(w)))
        adjacency[int(b)].append((int(a), float(w)))

    dist = np.full(topology.n, np.inf)
    heap: list[tuple[float, int]] = []
    for s in sources:
        dist[s] = 0.0
        heap.append((0.0, int(s)))
    heapq.heapify(heap)
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for v, w in adjacency[u]:
            nd = d + w
            if nd < dist[v]:
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    sentinel = float(lengths.sum())
    dist[~np.isfinite(dist)] = sentinel
    return dist


@dataclass
class DeformationData:
    """Cotangent Laplacian L, barycentric mass M, bi-Laplacian Q = L^T M^-1 L,
    plus one-ring structure for rigid-fit steps. Sparsity depends only on
    topology; values are frozen at the positions used to build it.

    ``rigid_edge_weights`` clamps negative cotangent weights (obtuse
    triangles) to zero: a rigid-fit energy with mixed-sign weights is
    unbounded below and its covariance fit no longer prefers the identity at
    rest."""

    L: sp.csr_matrix
    M_diag: np.ndarray
    Q: sp.csr_matrix
    edge_weights: dict[tuple[int, int], float]
    rigid_edge_weights: dict[tuple[int, int], float]
    neighbors: tuple[tuple[int, ...], ...]

    @property
    def n(self) -> int:
        return self.L.shape[0]


def build_deformation_data(topology: MeshTopology, positions: np.ndarray) -> DeformationData:
    V = np.asarray(positions, dtype=float).reshape(topology.n, 3)
    n = topology.n
    tris = topology.tris

    weights: dict[tuple[int, int], float] = {}
    mass = np.zeros(n)
    for t in tris:
        i, j, k = (int(v) for v in t)
        p = V[[i, j, k]]
        double_area = np.linalg.norm(np.cross(p[1] - p[0], p[2] - p[0]))
        area = 0.5 * double_area
        for a, b, c in ((i, j, k), (j, k, i), (k, i, j)):
            # cot of the angle at c, opposite edge (a, b)
            u, w = V[a] - V[c], V[b] - V[c]
            cross = np.linalg.norm(np.cross(u, w))
            if area < DEGENERATE_AREA or cross < 1e-300:
                cot = COT_LIMIT
            else:
                cot = float(np.clip(np.dot(u, w) / cross, -COT_LIMIT, COT_LIMIT))
            key = (a, b) if a < b else (b, a)
            weights[key] = weights.get(key, 0.0) + 0.5 * cot
        third = max(area, DEGENERATE_AREA) / 3.0
        mass[i] += third
        mass[j] += third
        mass[k] += third

    rows, cols, vals = [], [], []
    diag = np.zeros(n)
    neighbor_sets: list[set[int]] = [set() for _ in range(n)]
    for (a, b), w in weights.items():
        rows += [a, b]
        cols += [b, a]
        vals += [-w, -w]
        diag[a] += w
        diag[b] += w
        neighbor_sets[a].add(b)
        neighbor_sets[b].add(a)
    rows += list(range(n))
    cols += list(range(n))
    vals += list(diag)
    L = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    # isolated vertices (none in valid meshes) keep unit mass to stay invertible
    mass[mass == 0] = 1.0
    Minv = sp.diags(1.0 / mass)
    Q = (L.T @ Minv @ L).tocsr()
    return DeformationData(
        L=L,
        M_diag=mass,
        Q=Q,
        edge_weights=weights,
        rigid_edge_weights={k: max(w, 0.0) for k, w in weights.items()},
        neighbors=tuple(tuple(sorted(s)) for s in neighbor_sets),
    )


# ---------------------------------------------------------------------------
# Volume and center of mass (signed, over the triangulated surface)


def signed_volume(tris: np.ndarray, positions: np.ndarray) -> float:
    """(1/6) sum of det[va, vb, vc]; exact for closed, outward-oriented
    surfaces; open meshes give the signed value of the implied cone."""
    V = np.asarray(positions, dtype=float).reshape(-1, 3)
    a, b, c = V[tris[:, 0]], V[tris[:, 1]], V[tris[:, 2]]
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def signed_volume_gradient(tris: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """d(volume)/d(positions), shape (n, 3)."""
    V = np.asarray(positions, dtype=float).reshape(-1, 3)
    a, b, c = V[tris[:, 0]], V[tris[:, 1]], V[tris[:, 2]]
    grad = np.zeros_like(V)
    np.add.at(grad, tris[:, 0], np.cross(b, c) / 6.0)
    np.add.at(grad, tris[:, 1], np.cross(c, a) / 6.0)
    np.add.at(grad, tris[:, 2], np.cross(a, b) / 6.0)
    return grad


def centroid(tris: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Center of mass of the enclosed solid: signed-tet-volume weighted
    average of tetrahedron centroids (apex at the origin)."""
    V = np.asarray(positions, dtype=float).reshape(-1, 3)
    vol = signed_volume(tris, V)
    if abs(vol) < 1e-10:
        raise DegenerateVolume(f"|volume| = {abs(vol):.3e} < 1e-10")
    a, b, c = V[tris[:, 0]], V[tris[:, 1]], V[tris[:, 2]]
    tet_vol = np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0
    tet_centroid = (a + b + c) / 4.0
    return (tet_vol[:, None] * tet_centroid).sum(axis=0) / vol


def centroid_jacobian(tris: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """d(center of mass)/d(positions), shape (3, n, 3)."""
    V = np.asarray(positions, dtype=float).reshape(-1, 3)
    n = V.shape[0]
    vol = signed_volume(tris, V)
    if abs(vol) < 1e-10:
        raise DegenerateVolume(f"|volume| = {abs(vol):.3e} < 1e-10")
    a, b, c = V[tris[:, 0]], V[tris[:, 1]], V[tris[:, 2]]
    tet_vol = np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0
    tet_centroid = (a + b + c) / 4.0
    com = (tet_vol[:, None] * tet_centroid).sum(axis=0) / vol

    dvol = np.zeros((n, 3))
    np.add.at(dvol, tris[:, 0], np.cross(b, c) / 6.0)
    np.add.at(dvol, tris[:, 1], np.cross(c, a) / 6.0)
    np.add.at(dvol, tris[:, 2], np.cross(a, b) / 6.0)

    # first moment M1 = sum tet_vol * tet_centroid; dM1[k, v, ax]
    dM1 = np.zeros((3, n, 3))
    dvol_t = [np.cross(b, c) / 6.0, np.cross(c, a) / 6.0, np.cross(a, b) / 6.0]
    for corner in range(3):
        idx = tris[:, corner]
        # volume-variation term: d(tet_vol)/dv outer tet_centroid
        for k in range(3):
            np.add.at(dM1[k], idx, dvol_t[corner] * tet_centroid[:, k : k + 1])
        # centroid-variation term: tet_vol / 4 on the diagonal
        for k in range(3):
            contrib = np.zeros((len(tris), 3))
            contrib[:, k] = tet_vol / 4.0
            np.add.at(dM1[k], idx, contrib)
    return (dM1 - com[:, None, None] * dvol[None, :, :]) / vol


def export_obj(positions: np.ndarray, faces: Sequence[Sequence[int]]) -> str:
    V = np.asarray(positions, dtype=float).reshape(-1, 3)
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in V]
    for face in faces:
        lines.append("f " + " ".join(str(int(v) + 1) for v in face))
    return "\n".join(lines) + "\n"


def solve_biharmonic_displacement(
    deform: DeformationData, fixed_ids: np.ndarray, fixed_disp: np.ndarray
) -> np.ndarray:
    """Minimize Tr(D^T Q D) over displacements D with the given rows pinned:
    the free-geometry smooth deformation, ignoring any program structure.
    Connected components without any pinned vertex stay put (their minimal
    energy is any constant; zero is the canonical choice)."""
    n = deform.n
    fixed_ids = np.asarray(fixed_ids, dtype=int)
    fixed_disp = np.asarray(fixed_disp, dtype=float).reshape(len(fixed_ids), 3)

    n_comp, labels = csgraph.connected_components(abs(deform.L) > 0, directed=False)
    anchored = set(labels[fixed_ids])
    extra = [
        int(np.argmax(labels == comp)) for comp in range(n_comp) if comp not in anchored
    ]
    if extra:
        fixed_ids = np.concatenate([fixed_ids, np.array(extra, dtype=int)])
        fixed_disp = np.vstack([fixed_disp, np.zeros((len(extra), 3))])

    free = np.setdiff1d(np.arange(n), fixed_ids)
    D = np.zeros((n, 3))
    D[fixed_ids] = fixed_disp
    if len(free) == 0:
        return D
    Q = deform.Q
    Q_ff = Q[free][:, free].tocsc()
    Q_fc = Q[free][:, fixed_ids]
    rhs = -Q_fc @ D[fixed_ids]
    try:
        solve = spla.factorized(Q_ff)
        for k in range(3):
            D[free, k] = solve(rhs[:, k])
    except RuntimeError as exc:  # singular factorization
        raise ArithmeticError(f"biharmonic solve failed: {exc}")
    return D
