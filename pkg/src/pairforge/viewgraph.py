"""Weighted view graph over matched image pairs and its normalized-cut
partitioning.

Edge weights blend match quantity (log-scaled inlier count) with match
spatial spread (convex hull coverage of the matched keypoints in both
images). Partitioning recursively bisects along the second generalized
eigenvector of the graph Laplacian until every cluster fits the size cap.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .recon import ParseError, canonical_pair

DEFAULT_R_EW = 0.5
DEFAULT_MAX_CLUSTER_SIZE = 500

_POWER_TOL = 1e-8
_POWER_MAX_ITER = 10_000


class DegenerateGraphError(ValueError):
    pass


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points):
    """Monotone-chain convex hull, counter-clockwise, collinear points
    dropped. Returns fewer than 3 vertices for degenerate input."""
    pts = sorted(set((float(x), float(y)) for x, y in points))
    if len(pts) <= 2:
        return pts
    lower = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def convex_hull_area(points):
    """Area of the convex hull of 2-d points; 0 for degenerate input."""
    hull = convex_hull(points)
    if len(hull) < 3:
        return 0.0
    xs = np.array([p[0] for p in hull])
    ys = np.array([p[1] for p in hull])
    return 0.5 * abs(np.dot(xs, np.roll(ys, 1)) - np.dot(ys, np.roll(xs, 1)))


@dataclass(frozen=True)
class ViewGraphEdge:
    pair: tuple[int, int]
    n_inlier: int
    w_inlier: float
    w_overlap: float
    weight: float


@dataclass
class ViewGraph:
    vertices: list[int]
    edges: dict[tuple[int, int], ViewGraphEdge] = field(default_factory=dict)
    r_ew: float = DEFAULT_R_EW
    n_maxinlier: int = 0


@dataclass
class Partition:
    assignment: dict[int, int]

    @property
    def n_clusters(self):
        return len(set(self.assignment.values())) if self.assignment else 0

    def clusters(self):
        out = defaultdict(list)
        for vertex, idx in self.assignment.items():
            out[idx].append(vertex)
        return {idx: sorted(members) for idx, members in out.items()}


def edge_weight(pair_matches, image_i, image_j, n_maxinlier, r_ew=DEFAULT_R_EW):
    """Weight one matched pair.

    w_inlier = log(n_inlier) / log(n_maxinlier); w_overlap is the summed
    convex-hull area of the matched keypoints over the summed image areas.
    The blend coefficient r_ew interpolates the two in [0, 1].
    """
    if not 0.0 <= r_ew <= 1.0:
        raise ValueError(f"r_ew must be in [0, 1], got {r_ew}")
    n = pair_matches.n_inlier
    if n < 1:
        raise ValueError("edge weight needs at least one inlier")
    if n_maxinlier < 2:
        raise DegenerateGraphError(
            f"max inlier count {n_maxinlier} < 2: every w_inlier would divide by log(1)")
    if n > n_maxinlier:
        raise ValueError(f"n_inlier {n} exceeds n_maxinlier {n_maxinlier}")
    w_inlier = float(np.log(n) / np.log(n_maxinlier))
    corr = pair_matches.correspondences
    hull_i = convex_hull_area(corr[:, 0:2])
    hull_j = convex_hull_area(corr[:, 2:4])
    w_overlap = (hull_i + hull_j) / (image_i.area + image_j.area)
    weight = r_ew * w_inlier + (1.0 - r_ew) * w_overlap
    pair = canonical_pair(image_i.id, image_j.id)
    return ViewGraphEdge(pair=pair, n_inlier=n, w_inlier=w_inlier,
                         w_overlap=w_overlap, weight=weight)


def build_view_graph(matches, recon, r_ew=DEFAULT_R_EW):
    """One weighted edge per matched pair with >= 1 inlier. The global
    maximum inlier count is fixed before any weight is computed."""
    for (id_i, id_j) in matches:
        for image_id in (id_i, id_j):
            if image_id not in recon.images:
                raise ValueError(f"matched pair ({id_i}, {id_j}) references "
                                 f"unknown image {image_id}")
    active = {pair: pm for pair, pm in matches.items() if pm.n_inlier >= 1}
    graph = ViewGraph(vertices=sorted(recon.images), r_ew=r_ew)
    if not active:
        return graph
    graph.n_maxinlier = max(pm.n_inlier for pm in active.values())
    for (id_i, id_j), pm in sorted(active.items()):
        graph.edges[(id_i, id_j)] = edge_weight(
            pm, recon.images[id_i], recon.images[id_j], graph.n_maxinlier, r_ew)
    return graph


# ---------------------------------------------------------------------------
# normalized cut


def _second_eigenvector(weights):
    """Second generalized eigenvector of (D - W) x = lambda D x.

    Works on the normalized affinity M = D^-1/2 W D^-1/2 whose leading
    eigenvector is known in closed form, so the second one is reached by
    power iteration on (M + I)/2 with the leading direction deflated.
    """
    n = weights.shape[0]
    degrees = weights.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(degrees)
    m = weights * inv_sqrt[:, None] * inv_sqrt[None, :]
    top = np.sqrt(degrees)
    top /= np.linalg.norm(top)

    rng = np.random.Generator(np.random.PCG64(0x5EED))
    x = rng.standard_normal(n)
    x -= top * (top @ x)
    x /= np.linalg.norm(x)
    for _ in range(_POWER_MAX_ITER):
        y = 0.5 * (m @ x + x)
        y -= top * (top @ y)
        norm = np.linalg.norm(y)
        if norm < 1e-300:
            break
        y /= norm
        if np.linalg.norm(y - x) < _POWER_TOL or np.linalg.norm(y + x) < _POWER_TOL:
            x = y
            break
        x = y
    return x * inv_sqrt


def _ncut_value(weights, mask):
    cut = weights[mask][:, ~mask].sum()
    degrees = weights.sum(axis=1)
    assoc_a = degrees[mask].sum()
    assoc_b = degrees[~mask].sum()
    if assoc_a <= 0 or assoc_b <= 0:
        return np.inf
    return cut / assoc_a + cut / assoc_b


_EXACT_SPLIT_LIMIT = 15


def _best_split(weights):
    """Minimum-Ncut bipartition mask.

    Components small enough for exhaustive enumeration are split exactly;
    larger ones use the spectral sweep (all n-1 threshold cuts of the
    sorted second eigenvector) followed by greedy single-vertex
    improvement, since the sweep family alone can miss small optimal
    clusters that cross the eigenvector ordering.
    """
    n = weights.shape[0]
    if n <= _EXACT_SPLIT_LIMIT:
        return _exact_split(weights)
    vec = _second_eigenvector(weights)
    order = np.argsort(vec, kind="stable")
    best_mask, best_value = None, np.inf
    for cut_pos in range(1, n):
        mask = np.zeros(n, dtype=bool)
        mask[order[:cut_pos]] = True
        value = _ncut_value(weights, mask)
        if value < best_value:
            best_value, best_mask = value, mask
    return _refine_split(weights, best_mask, best_value)


def _exact_split(weights):
    """Enumerate all bipartitions, vectorized over the mask axis."""
    n = weights.shape[0]
    codes = np.arange(1, 2 ** (n - 1), dtype=np.int64)
    masks = (codes[:, None] >> np.arange(n)) & 1  # vertex n-1 fixed to side 0
    degrees = weights.sum(axis=1)
    vol_a = masks @ degrees
    vol_b = degrees.sum() - vol_a
    cut = np.zeros(len(codes))
    ii, jj = np.nonzero(np.triu(weights, k=1))
    for i, j in zip(ii, jj):
        cut += weights[i, j] * (masks[:, i] != masks[:, j])
    with np.errstate(divide="ignore"):
        values = cut * (1.0 / vol_a + 1.0 / vol_b)
    values[(vol_a <= 0) | (vol_b <= 0)] = np.inf
    return masks[int(np.argmin(values))].astype(bool)


def _refine_split(weights, mask, value):
    """First-improvement vertex flips until a full pass finds none."""
    n = len(mask)
    improved = True
    while improved:
        improved = False
        for v in range(n):
            side = mask.sum()
            if (mask[v] and side == 1) or (not mask[v] and side == n - 1):
                continue
            mask[v] = not mask[v]
            flipped = _ncut_value(weights, mask)
            if flipped < value * (1.0 - 1e-12):
                value = flipped
                improved = True
            else:
                mask[v] = not mask[v]
    return mask


def _connected_components(vertices, edges):
    adjacency = {v: [] for v in vertices}
    for (a, b) in edges:
        adjacency[a].append(b)
        adjacency[b].append(a)
    seen = set()
    components = []
    for start in vertices:
        if start in seen:
            continue
        stack, comp = [start], []
        seen.add(start)
        while stack:
            v = stack.pop()
            comp.append(v)
            for u in adjacency[v]:
                if u not in seen:
                    seen.add(u)
                    stack.append(u)
        components.append(sorted(comp))
    return components


def normalized_cut(graph, max_cluster_size=DEFAULT_MAX_CLUSTER_SIZE):
    """Recursively bisect every connected component whose size exceeds
    max_cluster_size; singleton components become singleton clusters."""
    if max_cluster_size < 2:
        raise ValueError(f"max_cluster_size must be >= 2, got {max_cluster_size}")
    clusters = []
    for comp in _connected_components(graph.vertices, graph.edges):
        clusters.extend(_split_recursive(comp, graph.edges, max_cluster_size))
    clusters.sort(key=lambda members: members[0])
    assignment = {}
    for idx, members in enumerate(clusters):
        for v in members:
            assignment[v] = idx
    return Partition(assignment=assignment)


def _split_recursive(members, edges, max_cluster_size):
    if len(members) <= max_cluster_size:
        return [members]
    index = {v: i for i, v in enumerate(members)}
    weights = np.zeros((len(members), len(members)))
    for (a, b), edge in edges.items():
        if a in index and b in index:
            weights[index[a], index[b]] = edge.weight
            weights[index[b], index[a]] = edge.weight
    mask = _best_split(weights)
    side_a = [v for v in members if mask[index[v]]]
    side_b = [v for v in members if not mask[index[v]]]
    out = []
    for side in (side_a, side_b):
        for comp in _connected_components(side, _induced(edges, set(side))):
            out.extend(_split_recursive(comp, edges, max_cluster_size))
    return out


def _induced(edges, subset):
    return {pair: e for pair, e in edges.items() if pair[0] in subset and pair[1] in subset}


# ---------------------------------------------------------------------------
# file formats


def write_view_graph(graph):
    lines = [f"# view graph: {len(graph.vertices)} vertices, {len(graph.edges)} edges, "
             f"r_ew={graph.r_ew!r}, n_maxinlier={graph.n_maxinlier}"]
    for (id_i, id_j) in sorted(graph.edges):
        e = graph.edges[(id_i, id_j)]
        lines.append(f"EDGE {id_i} {id_j} {e.n_inlier} "
                     f"{repr(e.w_inlier)} {repr(e.w_overlap)} {repr(e.weight)}")
    return "\n".join(lines) + "\n"


def parse_view_graph(text):
    edges = {}
    vertices = set()
    n_maxinlier = 0
    r_ew = DEFAULT_R_EW
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if raw.startswith("#"):
            for token in raw.split(","):
                token = token.strip()
                if token.startswith("r_ew="):
                    r_ew = float(token.split("=", 1)[1])
            continue
        line = raw.strip()
        if not line:
            continue
        fields = line.split()
        if fields[0] != "EDGE" or len(fields) != 7:
            raise ParseError("expected `EDGE <i> <j> <n_inlier> <w_inlier> "
                             "<w_overlap> <weight>`", lineno)
        id_i, id_j, n = int(fields[1]), int(fields[2]), int(fields[3])
        edge = ViewGraphEdge(pair=canonical_pair(id_i, id_j), n_inlier=n,
                             w_inlier=float(fields[4]), w_overlap=float(fields[5]),
                             weight=float(fields[6]))
        edges[edge.pair] = edge
        vertices.update(edge.pair)
        n_maxinlier = max(n_maxinlier, n)
    return ViewGraph(vertices=sorted(vertices), edges=edges, r_ew=r_ew,
                     n_maxinlier=n_maxinlier)


def write_partition(partition):
    lines = []
    for idx, members in sorted(partition.clusters().items()):
        lines.append("CLUSTER " + str(idx) + " " + " ".join(str(v) for v in members))
    return "\n".join(lines) + ("\n" if lines else "")


def parse_partition(text):
    assignment = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if fields[0] != "CLUSTER" or len(fields) < 3:
            raise ParseError("expected `CLUSTER <idx> <image_id>...`", lineno)
        idx = int(fields[1])
        for token in fields[2:]:
            vertex = int(token)
            if vertex in assignment:
                raise ParseError(f"vertex {vertex} assigned twice", lineno)
            assignment[vertex] = idx
    return Partition(assignment=assignment)
