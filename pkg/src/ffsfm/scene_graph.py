"""Scene graph construction from pairwise image similarities.

The graph over N images is a spanning tree whose edges select which image
pairs get decoded.  Edge costs come from cosine similarities of per-image
embeddings shifted to be nonnegative (cost = shift - S, default shift 1.0;
Dijkstra needs nonnegative costs, so the raw negated similarity cannot be
used directly).  Tie-breaks are by lowest index everywhere so that graph
construction is reproducible byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ZeroEmbedding

DEFAULT_COST_SHIFT = 1.0


@dataclass(frozen=True)
class SimilarityMatrix:
    """Symmetric n x n matrix of pairwise similarities in [-1, 1]."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2 or vals.shape[0] != vals.shape[1] or vals.shape[0] < 2:
            raise ValueError(f"similarity matrix must be square with n >= 2, got {vals.shape}")
        if np.abs(vals - vals.T).max() > 1e-9:
            raise ValueError("similarity matrix must be symmetric")
        if vals.max() > 1.0 + 1e-9 or vals.min() < -1.0 - 1e-9:
            raise ValueError("similarities must lie in [-1, 1]")
        vals = 0.5 * (vals + vals.T)
        vals = np.clip(vals, -1.0, 1.0)
        np.fill_diagonal(vals, 1.0)
        object.__setattr__(self, "values", vals)

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class SceneGraph:
    """Rooted spanning tree with edges listed in BFS order from the root.

    Every (parent, child) edge appears after the edge that introduced its
    parent, so sequential consumers can register children immediately.
    """

    n: int
    root: int
    edges: tuple

    def __post_init__(self):
        edges = tuple((int(p), int(c)) for p, c in self.edges)
        if len(edges) != self.n - 1:
            raise ValueError(f"spanning tree over {self.n} nodes needs {self.n - 1} edges")
        seen = {self.root}
        for parent, child in edges:
            if parent not in seen:
                raise ValueError(f"edge ({parent}, {child}) precedes its parent")
            if child in seen:
                raise ValueError(f"node {child} reached twice; not a tree")
            seen.add(child)
        if len(seen) != self.n:
            raise ValueError("edge list does not span all nodes")
        object.__setattr__(self, "edges", edges)

    def parents(self) -> list:
        """parent[i] for every node; the root maps to itself."""
        parent = [None] * self.n
        parent[self.root] = self.root
        for p, c in self.edges:
            parent[c] = p
        return parent

    def depths(self) -> np.ndarray:
        depth = np.zeros(self.n, dtype=int)
        for p, c in self.edges:
            depth[c] = depth[p] + 1
        return depth


def compute_similarity(embeddings) -> SimilarityMatrix:
    """Cosine similarities between per-image embedding vectors.

    Raises ZeroEmbedding if any vector has norm < 1e-12.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] < 2:
        raise ValueError("need at least two embeddings of equal dimension")
    norms = np.linalg.norm(emb, axis=1)
    bad = np.nonzero(norms < 1e-12)[0]
    if bad.size:
        raise ZeroEmbedding(f"embedding {bad[0]} has near-zero norm")
    unit = emb / norms[:, None]
    s = unit @ unit.T
    return SimilarityMatrix(np.clip(0.5 * (s + s.T), -1.0, 1.0))


def select_root(s: SimilarityMatrix) -> int:
    """Node with the highest total similarity to all others; ties -> lowest index."""
    totals = s.values.sum(axis=0)
    return int(np.argmax(totals))


def _bfs_edge_order(n: int, root: int, parent: list) -> list:
    children = [[] for _ in range(n)]
    for v in range(n):
        if v != root and parent[v] is not None:
            children[parent[v]].append(v)
    order = []
    queue = [root]
    while queue:
        u = queue.pop(0)
        for v in sorted(children[u]):
            order.append((u, v))
            queue.append(v)
    return order


def build_spt(s: SimilarityMatrix, root: int, shift: float = DEFAULT_COST_SHIFT) -> SceneGraph:
    """Shortest path tree from the root under edge costs shift - S_ij.

    Plain O(n^2) Dijkstra over the complete graph.  Parent ties at equal
    distance resolve to the lower parent index.
    """
    n = s.n
    cost = shift - s.values
    dist = np.full(n, np.inf)
    parent = [None] * n
    done = np.zeros(n, dtype=bool)
    dist[root] = 0.0
    parent[root] = root
    for _ in range(n):
        u = -1
        best = np.inf
        for v in range(n):
            if not done[v] and dist[v] < best:
                best = dist[v]
                u = v
        if u < 0:
            break
        done[u] = True
        for v in range(n):
            if done[v] or v == u:
                continue
            cand = dist[u] + cost[u, v]
            if cand < dist[v] or (cand == dist[v] and parent[v] is not None and u < parent[v]):
                dist[v] = cand
                parent[v] = u
    return SceneGraph(n, root, tuple(_bfs_edge_order(n, root, parent)))


def build_mst(s: SimilarityMatrix, shift: float = DEFAULT_COST_SHIFT) -> SceneGraph:
    """Minimum spanning tree under costs shift - S_ij, re-rooted at select_root.

    Prim's algorithm; among equal-cost crossing edges the lexicographically
    smallest (cost, attach-point, new-node) wins.
    """
    n = s.n
    cost = shift - s.values
    in_tree = np.zeros(n, dtype=bool)
    in_tree[0] = True
    best_cost = cost[0].copy()
    best_from = np.zeros(n, dtype=int)
    parent = [None] * n
    parent[0] = 0
    for _ in range(n - 1):
        u = -1
        key = None
        for v in range(n):
            if in_tree[v]:
                continue
            cand = (best_cost[v], best_from[v], v)
            if key is None or cand < key:
                key = cand
                u = v
        in_tree[u] = True
        parent[u] = int(best_from[u])
        for v in range(n):
            if in_tree[v]:
                continue
            if cost[u, v] < best_cost[v] or (cost[u, v] == best_cost[v] and u < best_from[v]):
                best_cost[v] = cost[u, v]
                best_from[v] = u
    root = select_root(s)
    # re-root: orient the undirected tree away from the new root
    adj = [[] for _ in range(n)]
    for v in range(n):
        if v != 0:
            adj[v].append(parent[v])
            adj[parent[v]].append(v)
    oriented = [None] * n
    oriented[root] = root
    queue = [root]
    seen = {root}
    while queue:
        u = queue.pop(0)
        for v in sorted(adj[u]):
            if v not in seen:
                seen.add(v)
                oriented[v] = u
                queue.append(v)
    return SceneGraph(n, root, tuple(_bfs_edge_order(n, root, oriented)))


def root_path_costs(graph: SceneGraph, s: SimilarityMatrix, shift: float = DEFAULT_COST_SHIFT) -> np.ndarray:
    """Accumulated root-to-node path cost for every node of a tree."""
    cost = shift - s.values
    out = np.zeros(graph.n)
    for p, c in graph.edges:
        out[c] = out[p] + cost[p, c]
    return out


def overlap_similarity(scene) -> SimilarityMatrix:
    """Ground-truth co-visibility similarity between all image pairs.

    For every valid point of image i, project into camera j and count the
    fraction landing in front of the camera and inside the image bounds.
    The symmetric fraction is rescaled from [0, 1] to [-1, 1].
    """
    n = scene.n_images
    frac = np.zeros((n, n))
    world_pts = [scene.pointmaps[i].valid_points() for i in range(n)]
    for j in range(n):
        w2c = scene.poses[j].inverse()
        intr = scene.intrinsics[j]
        h, w = scene.pointmaps[j].height, scene.pointmaps[j].width
        for i in range(n):
            pts = world_pts[i]
            if len(pts) == 0:
                continue
            cam = w2c.transform(pts)
            front = cam[:, 2] > 0
            if not front.any():
                continue
            uv = intr.project(cam[front])
            inside = (
                (uv[:, 0] >= -0.5) & (uv[:, 0] <= w - 0.5) & (uv[:, 1] >= -0.5) & (uv[:, 1] <= h - 0.5)
            )
            frac[i, j] = inside.sum() / len(pts)
    sym = 0.5 * (frac + frac.T)
    return SimilarityMatrix(np.clip(2.0 * sym - 1.0, -1.0, 1.0))
