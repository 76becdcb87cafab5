"""2D curve extraction from binary masks.

Pipeline: mask -> thin skeleton with per-pixel radii -> node/edge graph ->
upward-oriented DAG -> exhaustive path search for the primary branch curve
-> junction subpath search for secondary branch curves.

Pixels are (x, y) pairs; masks are indexed mask[y, x].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage.morphology import skeletonize

from .geometry import (
    CubicBezier,
    DegenerateFitError,
    InsufficientDataError,
    arclength_spaced_params,
    bezier_fit_lsq,
    chord_length_params,
    curve_point_distances,
    nearest_curve_params,
)

INLIER_THRESHOLD_PX = 4.0
SAMPLE_SPACING_PX = 30.0
MIN_PRIMARY_SCORE = 50
MIN_SECONDARY_LENGTH_PX = 40.0
MIN_SECONDARY_INLIER_RATE = 0.75
MAX_PATHS = 10_000
ATTACHMENT_RANGE = (0.05, 0.95)
BORDER_MARGIN_PX = 10

_NEIGHBOR_OFFSETS = [
    (-1, -1), (0, -1), (1, -1),
    (-1, 0), (1, 0),
    (-1, 1), (0, 1), (1, 1),
]


@dataclass
class PixelSkeleton:
    """Thin skeleton pixels with radii from the Euclidean distance transform."""

    mask: np.ndarray            # source foreground mask (bool, HxW)
    skeleton: np.ndarray        # bool, HxW
    points: np.ndarray          # (N, 2) int, (x, y)
    radii: np.ndarray           # (N,) float, EDT value at each skeletal pixel
    _tree: cKDTree | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.points)

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.points.astype(np.float64))
        return self._tree

    def radius_at(self, pixels: np.ndarray) -> np.ndarray:
        """Radius of the closest skeletal pixel for each query pixel."""
        _, idx = self.tree.query(np.atleast_2d(pixels))
        return self.radii[idx]


def medial_axis(mask: np.ndarray) -> PixelSkeleton:
    """Thin 8-connected skeleton plus exact EDT radii at skeletal pixels."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return PixelSkeleton(
            mask, np.zeros_like(mask), np.empty((0, 2), int), np.empty(0)
        )
    skel = skeletonize(mask)
    edt = ndimage.distance_transform_edt(mask)
    ys, xs = np.nonzero(skel)
    points = np.column_stack([xs, ys]).astype(int)
    # EDT measures to the nearest background pixel center, half a pixel
    # beyond the foreground boundary
    radii = np.maximum(edt[ys, xs] - 0.5, 0.5)
    return PixelSkeleton(mask, skel, points, radii)


@dataclass
class SkeletonEdge:
    a: int                      # node index (tail after orientation)
    b: int                      # node index (head after orientation)
    pixels: np.ndarray          # (K, 2) chain from a to b, endpoints included


@dataclass
class SkeletonGraph:
    nodes: np.ndarray           # (M, 2) int, (x, y)
    edges: list[SkeletonEdge]
    directed: bool = False

    def incident(self, node_idx: int) -> list[int]:
        return [
            i for i, e in enumerate(self.edges) if node_idx in (e.a, e.b)
        ]

    def out_edges(self, node_idx: int) -> list[int]:
        return [i for i, e in enumerate(self.edges) if e.a == node_idx]


def _degree_map(skel: np.ndarray) -> np.ndarray:
    kernel = np.array([[1, 1, 1], [1, 0, 1], [1, 1, 1]])
    deg = ndimage.convolve(skel.astype(np.uint8), kernel, mode="constant")
    deg[~skel] = 0
    return deg


def build_graph(skel: PixelSkeleton) -> SkeletonGraph:
    """Nodes at endpoints (deg 1), junctions (deg >= 3) and isolated pixels;
    edges are the degree-2 pixel chains between them."""
    sk = skel.skeleton
    if not sk.any():
        return SkeletonGraph(np.empty((0, 2), int), [])
    deg = _degree_map(sk)
    h, w = sk.shape

    node_pixels = [
        (x, y) for x, y in skel.points if deg[y, x] != 2
    ]
    node_index = {p: i for i, p in enumerate(node_pixels)}

    def neighbors(p):
        x, y = p
        out = []
        for dx, dy in _NEIGHBOR_OFFSETS:
            nx, ny = x + dx, y + dy
            if 0 <= nx < w and 0 <= ny < h and sk[ny, nx]:
                out.append((nx, ny))
        return out

    edges: list[SkeletonEdge] = []
    used_steps: set[tuple] = set()  # directed (from_pixel, to_pixel) start steps

    def trace(start, first):
        chain = [start, first]
        seen = {start, first}
        prev, cur = start, first
        while cur not in node_index:
            nxt = None
            for q in neighbors(cur):
                if q != prev and q not in seen:
                    nxt = q
                    break
            if nxt is None:
                # dead end inside a chain (shouldn't happen on clean skeletons)
                return chain, None
            chain.append(nxt)
            seen.add(nxt)
            prev, cur = cur, nxt
        return chain, cur

    for p in node_pixels:
        for q in neighbors(p):
            if (p, q) in used_steps:
                continue
            chain, end = trace(p, q)
            if end is None:
                continue
            used_steps.add((p, q))
            used_steps.add((end, chain[-2]))
            edges.append(
                SkeletonEdge(node_index[p], node_index[end], np.array(chain))
            )

    # Pure cycles (all pixels degree 2): promote one pixel to a node and
    # record the loop as a self-edge; orientation drops it later.
    covered = set(node_pixels)
    for e in edges:
        covered.update(map(tuple, e.pixels))
    leftover = [tuple(p) for p in skel.points if tuple(p) not in covered]
    while leftover:
        start = min(leftover, key=lambda p: (p[1], p[0]))
        node_index[start] = len(node_pixels)
        node_pixels.append(start)
        leftover_set = set(leftover)
        cand = [n for n in neighbors(start) if n in leftover_set]
        if not cand:
            # stray degree-2 pixel whose neighbors were already traced
            leftover = [p for p in leftover if p != start]
            continue
        chain, end = trace(start, cand[0])
        if end is not None:
            edges.append(
                SkeletonEdge(node_index[start], node_index[end], np.array(chain))
            )
        cycle_set = set(chain)
        leftover = [p for p in leftover if p not in cycle_set and p != start]

    return SkeletonGraph(np.array(node_pixels, dtype=int), edges)


def orient_up(graph: SkeletonGraph) -> SkeletonGraph:
    """Direct each edge toward the endpoint higher in the image (smaller y;
    ties toward smaller x). Self-loop edges are dropped, so the result is a
    DAG: every directed edge strictly decreases (y, x) lexicographically."""
    nodes = graph.nodes
    oriented = []
    for e in graph.edges:
        if e.a == e.b:
            continue  # cycle: drop the loop edge
        ka = (nodes[e.a][1], nodes[e.a][0])
        kb = (nodes[e.b][1], nodes[e.b][0])
        if kb < ka:
            oriented.append(SkeletonEdge(e.a, e.b, e.pixels))
        else:
            oriented.append(SkeletonEdge(e.b, e.a, e.pixels[::-1]))
    return SkeletonGraph(nodes, oriented, directed=True)


@dataclass
class Detection2D:
    curve: CubicBezier
    samples: np.ndarray         # (N, 2) float pixel positions
    radii: np.ndarray           # (N,) pixel radii
    kind: str                   # "primary" | "secondary"
    attachment_t: float | None = None
    score: int = 0
    inliers: np.ndarray | None = None   # skeletal inlier pixels of the fit
    truncated: bool = False


def _path_pixels(graph: SkeletonGraph, edge_indices: list[int]) -> np.ndarray:
    pieces = []
    for i, ei in enumerate(edge_indices):
        px = graph.edges[ei].pixels
        pieces.append(px if i == 0 else px[1:])
    return np.concatenate(pieces)


def _fit_path(path_px: np.ndarray):
    pts = path_px.astype(np.float64)
    try:
        return bezier_fit_lsq(pts)
    except (InsufficientDataError, DegenerateFitError):
        return None


def _inlier_distances(curve: CubicBezier, skel_points: np.ndarray) -> np.ndarray:
    n = int(np.clip(curve.arc_length(64), 64, 512))
    return curve_point_distances(curve, skel_points.astype(np.float64), n_dense=n)


def _iter_paths(graph: SkeletonGraph, max_paths: int):
    """Root-to-leaf edge paths of a directed multigraph, capped."""
    out_by_node: dict[int, list[int]] = {}
    in_deg = np.zeros(len(graph.nodes), dtype=int)
    for i, e in enumerate(graph.edges):
        out_by_node.setdefault(e.a, []).append(i)
        in_deg[e.b] += 1
    roots = [n for n in range(len(graph.nodes)) if in_deg[n] == 0]
    count = 0
    truncated = False

    def dfs(node, path):
        nonlocal count, truncated
        if count >= max_paths:
            truncated = True
            return
        outs = out_by_node.get(node, [])
        if not outs:
            if path:
                count += 1
                yield list(path)
            return
        for ei in outs:
            if count >= max_paths:
                truncated = True
                return
            path.append(ei)
            yield from dfs(graph.edges[ei].b, path)
            path.pop()

    def gen():
        for r in roots:
            yield from dfs(r, [])

    return gen(), lambda: truncated


def _subsample_detection(curve, skel, mask, kind, attachment_t=None, score=0,
                         inliers=None, truncated=False):
    ts = arclength_spaced_params(curve, SAMPLE_SPACING_PX)
    pts = curve.point(ts)
    h, w = mask.shape
    xi = np.rint(pts[:, 0]).astype(int)
    yi = np.rint(pts[:, 1]).astype(int)
    # samples hugging the image border sit on clipped tube ends; both their
    # radii and their lifted 3D positions are unreliable
    m = BORDER_MARGIN_PX
    inside = (xi >= m) & (xi < w - m) & (yi >= m) & (yi < h - m)
    keep = inside.copy()
    keep[inside] &= mask[yi[inside], xi[inside]]
    pts = pts[keep]
    if len(pts) < 2:
        return None
    # restrict radius lookups to this curve's own skeletal pixels, so a
    # crossing branch's thinner skeleton cannot hijack the estimate
    d = curve_point_distances(curve, skel.points.astype(np.float64))
    band = d <= INLIER_THRESHOLD_PX
    if band.any():
        from scipy.spatial import cKDTree
        _, idx = cKDTree(skel.points[band].astype(np.float64)).query(pts)
        radii = skel.radii[band][idx]
    else:
        radii = skel.radius_at(pts)
    return Detection2D(curve, pts, radii, kind, attachment_t, score,
                       inliers, truncated)


def find_primary(graph: SkeletonGraph, skel: PixelSkeleton,
                 min_score: int = MIN_PRIMARY_SCORE,
                 max_paths: int = MAX_PATHS) -> Detection2D | None:
    """Best root-to-leaf path by the unique-inlier-y score (4 px inliers)."""
    if not graph.directed:
        raise ValueError("find_primary requires an oriented graph")
    if len(skel) == 0 or not graph.edges:
        return None
    skel_pts = skel.points.astype(np.float64)
    best = None  # (score, -path_order, curve, inlier_pixels)
    paths, was_truncated = _iter_paths(graph, max_paths)
    for order, edge_path in enumerate(paths):
        path_px = _path_pixels(graph, edge_path)
        if len(path_px) < 4:
            continue
        curve = _fit_path(path_px)
        if curve is None:
            continue
        dists = _inlier_distances(curve, skel_pts)
        inlier_pts = skel.points[dists <= INLIER_THRESHOLD_PX]
        score = len(np.unique(inlier_pts[:, 1]))
        if best is None or score > best[0]:
            best = (score, order, curve, inlier_pts)
    if best is None or best[0] < min_score:
        return None
    score, _, curve, inlier_pts = best
    return _subsample_detection(curve, skel, skel.mask, "primary",
                                score=score, inliers=inlier_pts,
                                truncated=was_truncated())


def _iter_subpaths(graph: SkeletonGraph, start_node: int, first_edge: int,
                   blocked_nodes: set[int], max_paths: int = 1000):
    """All simple edge paths starting with first_edge (every prefix yielded)."""
    count = 0

    def other(e, n):
        return e.b if e.a == n else e.a

    def dfs(node, path, visited_nodes, visited_edges):
        nonlocal count
        if count >= max_paths:
            return
        count += 1
        yield list(path)
        for ei in graph.incident(node):
            if ei in visited_edges:
                continue
            e = graph.edges[ei]
            nxt = other(e, node)
            if nxt in visited_nodes or nxt in blocked_nodes:
                continue
            path.append(ei)
            visited_edges.add(ei)
            visited_nodes.add(nxt)
            yield from dfs(nxt, path, visited_nodes, visited_edges)
            visited_nodes.discard(nxt)
            visited_edges.discard(ei)
            path.pop()

    e0 = graph.edges[first_edge]
    nxt = other(e0, start_node)
    if nxt in blocked_nodes:
        yield [first_edge]
        return
    yield from dfs(nxt, [first_edge], {start_node, nxt}, {first_edge})


def _oriented_path_pixels(graph, edge_path, start_node):
    """Path pixels ordered away from start_node."""
    pieces = []
    node = start_node
    for i, ei in enumerate(edge_path):
        e = graph.edges[ei]
        px = e.pixels if e.a == node else e.pixels[::-1]
        node = e.b if e.a == node else e.a
        pieces.append(px if i == 0 else px[1:])
    return np.concatenate(pieces)


def _polyline_length(px: np.ndarray) -> float:
    return float(np.linalg.norm(np.diff(px.astype(float), axis=0), axis=1).sum())


def find_secondaries(graph: SkeletonGraph, skel: PixelSkeleton,
                     primary: Detection2D,
                     min_length: float = MIN_SECONDARY_LENGTH_PX,
                     min_inlier_rate: float = MIN_SECONDARY_INLIER_RATE,
                     ) -> list[Detection2D]:
    """Branch curves hanging off the interior of the primary detection.

    Works on the undirected graph: junction nodes lying on the primary curve
    (within the inlier threshold, attachment t in [0.05, 0.95]) seed an
    exhaustive subpath search along each non-primary incident edge.
    """
    if graph.directed:
        raise ValueError("find_secondaries expects the undirected graph")
    if primary is None or not graph.edges:
        return []
    nodes_f = graph.nodes.astype(np.float64)
    node_dist = curve_point_distances(primary.curve, nodes_f)
    node_t = nearest_curve_params(primary.curve, nodes_f)
    on_primary = node_dist <= INLIER_THRESHOLD_PX
    lo, hi = ATTACHMENT_RANGE

    detections = []
    for n in np.nonzero(on_primary)[0]:
        if not (lo <= node_t[n] <= hi):
            continue
        blocked = {int(m) for m in np.nonzero(on_primary)[0] if m != n}
        for ei in graph.incident(int(n)):
            e = graph.edges[ei]
            # skip edges running along the primary itself
            mid = e.pixels[len(e.pixels) // 2].astype(np.float64)
            if curve_point_distances(primary.curve, mid[None, :])[0] <= INLIER_THRESHOLD_PX:
                continue
            best = None  # (inlier_count, curve, length, rate)
            for sub in _iter_subpaths(graph, int(n), ei, blocked):
                path_px = _oriented_path_pixels(graph, sub, int(n))
                if len(path_px) < 4:
                    continue
                curve = _fit_path(path_px)
                if curve is None:
                    continue
                d = curve_point_distances(curve, path_px.astype(np.float64))
                rate = float((d <= INLIER_THRESHOLD_PX).mean())
                length = _polyline_length(path_px)
                n_in = rate * len(path_px)
                if best is None or n_in > best[0]:
                    best = (n_in, curve, length, rate)
            if best is None:
                continue
            _, curve, length, rate = best
            if length < min_length or rate < min_inlier_rate:
                continue
            det = _subsample_detection(curve, skel, skel.mask, "secondary",
                                       attachment_t=float(node_t[n]))
            if det is not None:
                detections.append(det)
    return detections


def extract_curves(mask: np.ndarray):
    """Full Fig-3-style front end: mask -> (primary, secondaries, skeleton)."""
    skel = medial_axis(mask)
    if len(skel) == 0:
        return None, [], skel
    graph = build_graph(skel)
    primary = find_primary(orient_up(graph), skel)
    if primary is None:
        return None, [], skel
    secondaries = find_secondaries(graph, skel, primary)
    return primary, secondaries, skel
