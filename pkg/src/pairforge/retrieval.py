"""Nearest-neighbor retrieval over global descriptors.

An exact brute-force search serves as the baseline; the approximate path
is a layered navigable small-world graph (greedy beam search through
progressively denser layers). Also holds the pair-accuracy metric against
geometrically verified ground truth and the timing split between feature
extraction and neighbor search.
"""

from __future__ import annotations

import heapq
import io
import time
from dataclasses import dataclass, field

import numpy as np

from .recon import DescriptorSet, ParseError

DEFAULT_RETRIEVAL_NUMBER = 30
DEFAULT_INLIER_THRESHOLD = 15


@dataclass(frozen=True)
class AnnConfig:
    max_degree: int = 16
    build_beam: int = 200
    query_beam: int = 64
    seed: int = 0


@dataclass
class TimingReport:
    t_feature_extraction: float
    t_nn_search: float

    def __post_init__(self):
        if self.t_feature_extraction < 0 or self.t_nn_search < 0:
            raise ValueError("timing components must be non-negative")

    @property
    def total(self):
        return self.t_feature_extraction + self.t_nn_search


def brute_force_knn(queries, corpus, k):
    """Exact k nearest neighbors per query by Euclidean distance, ties
    broken by ascending candidate name; a query never retrieves itself."""
    if k >= len(corpus):
        raise ValueError(f"k={k} must be smaller than the corpus ({len(corpus)})")
    if queries.dim != corpus.dim:
        raise ValueError(f"query dim {queries.dim} != corpus dim {corpus.dim}")
    corpus_names = np.array(corpus.names)
    name_rank = np.argsort(np.argsort(corpus_names, kind="stable"), kind="stable")
    results = {}
    sq = np.sum(corpus.vectors ** 2, axis=1)
    for name, vec in zip(queries.names, queries.vectors):
        d2 = np.maximum(sq - 2.0 * (corpus.vectors @ vec) + vec @ vec, 0.0)
        order = np.lexsort((name_rank, d2))
        ranked = []
        for idx in order:
            if corpus_names[idx] == name:
                continue
            ranked.append((str(corpus_names[idx]), float(np.sqrt(d2[idx]))))
            if len(ranked) == k:
                break
        results[name] = ranked
    return results


# ---------------------------------------------------------------------------
# layered navigable small-world index


class HnswIndex:
    """Greedy-searchable layered proximity graph.

    Nodes are inserted one by one; each new node is connected to a
    diversity-pruned set of near neighbors on every layer it occupies.
    Layer membership is geometric with ratio 1/2, drawn from the build
    seed, so construction is fully deterministic.
    """

    def __init__(self, dim, cfg=AnnConfig(), reserve=1024):
        self.dim = dim
        self.cfg = cfg
        reserve = max(reserve, 1)
        self._storage = np.zeros((reserve, dim))
        self.names = []
        self.levels = []
        # per layer: fixed-cap adjacency rows plus a fill count per node
        self._adj = []
        self._cnt = []
        self.entry_point = None
        self.max_level = -1
        self._rng = np.random.Generator(np.random.PCG64(cfg.seed))
        self._ml = 1.0 / np.log(2.0)
        self._stamp = np.zeros(reserve, dtype=np.int64)
        self._search_id = 0

    def __len__(self):
        return len(self.names)

    @property
    def vectors(self):
        return self._storage[:len(self.names)]

    @vectors.setter
    def vectors(self, array):
        self._storage = np.asarray(array, dtype=np.float64)
        self._stamp = np.zeros(self._storage.shape[0], dtype=np.int64)

    @property
    def neighbors(self):
        """Per node: list over occupied layers of neighbor id lists."""
        out = []
        for node, level in enumerate(self.levels):
            out.append([self._links(node, layer).tolist()
                        for layer in range(level + 1)])
        return out

    _SLACK = 8  # rows may overflow the cap this far before re-pruning

    def _layer_cap(self, layer):
        return self.cfg.max_degree * (2 if layer == 0 else 1)

    def _ensure_layer(self, layer, node_capacity):
        while len(self._adj) <= layer:
            width = self._layer_cap(len(self._adj)) + self._SLACK
            self._adj.append(np.zeros((node_capacity, width), dtype=np.int64))
            self._cnt.append(np.zeros(node_capacity, dtype=np.int64))
        if self._adj[layer].shape[0] < node_capacity:
            for lay in range(len(self._adj)):
                grown = np.zeros((node_capacity, self._adj[lay].shape[1]),
                                 dtype=np.int64)
                grown[:self._adj[lay].shape[0]] = self._adj[lay]
                self._adj[lay] = grown
                counts = np.zeros(node_capacity, dtype=np.int64)
                counts[:self._cnt[lay].shape[0]] = self._cnt[lay]
                self._cnt[lay] = counts

    def _links(self, node, layer):
        return self._adj[layer][node, :self._cnt[layer][node]]

    def _set_links(self, node, layer, ids):
        self._adj[layer][node, :len(ids)] = ids
        self._cnt[layer][node] = len(ids)

    def _sq_distances(self, vec, ids):
        diff = self._storage[ids] - vec
        return np.einsum("ij,ij->i", diff, diff)

    def _search_layer(self, vec, entry_ids, layer, beam):
        """Best-first expansion keeping at most ``beam`` candidates;
        returns (squared distance, id) pairs sorted ascending."""
        self._search_id += 1
        stamp = self._search_id
        self._stamp[entry_ids] = stamp
        dists = self._sq_distances(vec, entry_ids)
        candidates = [(d, i) for d, i in zip(dists, entry_ids)]
        heapq.heapify(candidates)
        best = [(-d, i) for d, i in zip(dists, entry_ids)]
        heapq.heapify(best)
        while candidates:
            d, node = heapq.heappop(candidates)
            if len(best) >= beam and d > -best[0][0]:
                break
            links = self._links(node, layer)
            fresh = links[self._stamp[links] != stamp]
            if not fresh.size:
                continue
            self._stamp[fresh] = stamp
            for nd, n in zip(self._sq_distances(vec, fresh), fresh):
                if len(best) < beam or nd < -best[0][0]:
                    heapq.heappush(candidates, (nd, n))
                    heapq.heappush(best, (-nd, n))
                    if len(best) > beam:
                        heapq.heappop(best)
        return sorted((-d, i) for d, i in best)

    def _select_neighbors(self, candidates, m):
        """Diversity pruning on squared distances: keep a candidate only
        when it is closer to the query than to every neighbor already
        kept; backfill with the nearest discards. A running minimum makes
        each kept neighbor cost one vector op."""
        if len(candidates) <= m:
            return [i for _, i in candidates]
        ids = np.fromiter((i for _, i in candidates), dtype=np.int64)
        dq2 = np.fromiter((d for d, _ in candidates), dtype=np.float64)
        x = self._storage[ids]
        sq = np.einsum("ij,ij->i", x, x)
        d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0)
        kept, spare = [], []
        min_d2 = np.full(len(ids), np.inf)
        for row in range(len(ids)):
            if len(kept) == m:
                break
            if min_d2[row] > dq2[row]:
                kept.append(row)
                np.minimum(min_d2, d2[:, row], out=min_d2)
            else:
                spare.append(row)
        for row in spare:
            if len(kept) >= m:
                break
            kept.append(row)
        return [int(ids[row]) for row in kept]

    def add(self, name, vec):
        node = len(self.names)
        if node >= self._storage.shape[0]:
            grown = np.zeros((2 * self._storage.shape[0], self.dim))
            grown[:node] = self._storage[:node]
            self._storage = grown
            stamps = np.zeros(grown.shape[0], dtype=np.int64)
            stamps[:node] = self._stamp[:node]
            self._stamp = stamps
        self._storage[node] = np.asarray(vec, dtype=np.float64)
        self.names.append(name)
        level = int(-np.log(self._rng.uniform(low=np.finfo(float).tiny, high=1.0))
                    * self._ml)
        self.levels.append(level)
        self._ensure_layer(level, self._storage.shape[0])

        if self.entry_point is None:
            self.entry_point = node
            self.max_level = level
            return node

        entries = [self.entry_point]
        for layer in range(self.max_level, level, -1):
            entries = [self._search_layer(vec, entries, layer, 1)[0][1]]
        for layer in range(min(level, self.max_level), -1, -1):
            found = self._search_layer(vec, entries, layer, self.cfg.build_beam)
            cap = self._layer_cap(layer)
            chosen = self._select_neighbors(found, cap)
            self._set_links(node, layer, chosen)
            for other in chosen:
                count = self._cnt[layer][other]
                if count < cap + self._SLACK:
                    self._adj[layer][other, count] = node
                    self._cnt[layer][other] = count + 1
                else:
                    links = np.append(self._links(other, layer), node)
                    self._shrink(other, layer, links, cap)
            entries = [i for _, i in found]
        if level > self.max_level:
            self.max_level = level
            self.entry_point = node
        return node

    def _shrink(self, node, layer, links, cap):
        dists = self._sq_distances(self._storage[node], links)
        ranked = sorted(zip(dists, links.tolist()))
        self._set_links(node, layer, self._select_neighbors(ranked, cap))

    def finalize(self):
        """Re-prune any row still overflowing its degree cap; called after
        bulk construction so the stored graph honors max_degree."""
        for layer in range(len(self._adj)):
            cap = self._layer_cap(layer)
            for node in np.flatnonzero(self._cnt[layer] > cap):
                self._shrink(int(node), layer, self._links(int(node), layer), cap)
        return self

    def search(self, vec, beam):
        """(distance, id) pairs for the beam nearest reachable nodes."""
        if self.entry_point is None:
            raise ValueError("index is empty")
        entries = [self.entry_point]
        for layer in range(self.max_level, 0, -1):
            entries = [self._search_layer(vec, entries, layer, 1)[0][1]]
        found = self._search_layer(vec, entries, 0, beam)
        return [(float(np.sqrt(d)), i) for d, i in found]


def build_ann_index(corpus, cfg=AnnConfig()):
    if len(corpus) == 0:
        raise ValueError("cannot index an empty corpus")
    index = HnswIndex(corpus.dim, cfg, reserve=len(corpus))
    for name, vec in zip(corpus.names, corpus.vectors):
        index.add(name, vec)
    return index.finalize()


def ann_query(index, queries, k):
    """Approximate k nearest neighbors per query; self-matches are
    skipped during candidate collection so k stays meaningful."""
    if k >= len(index):
        raise ValueError(f"k={k} must be smaller than the corpus ({len(index)})")
    beam = max(index.cfg.query_beam, k + 1)
    results = {}
    for name, vec in zip(queries.names, queries.vectors):
        found = index.search(np.asarray(vec, dtype=np.float64), beam)
        ranked = sorted((d, index.names[i]) for d, i in found
                        if index.names[i] != name)
        results[name] = [(n, float(d)) for d, n in ranked[:k]]
    return results


# ---------------------------------------------------------------------------
# accuracy metric


def canonical_name_pair(a, b):
    return (a, b) if a <= b else (b, a)


def ground_truth_from_matches(matches, recon=None,
                              inlier_threshold=DEFAULT_INLIER_THRESHOLD):
    """Set of canonical name pairs with more inliers than the threshold.
    Ids map to names through the reconstruction when given, else ids
    print as decimal names."""
    names = {}
    if recon is not None:
        names = {image_id: img.name for image_id, img in recon.images.items()}
    truth = set()
    for (id_i, id_j), pm in matches.items():
        if pm.n_inlier > inlier_threshold:
            truth.add(canonical_name_pair(names.get(id_i, str(id_i)),
                                          names.get(id_j, str(id_j))))
    return truth


def retrieved_pairs(results):
    """Deduplicated canonical pairs out of a retrieval result."""
    pairs = set()
    for query, ranked in results.items():
        for candidate, _ in ranked:
            pairs.add(canonical_name_pair(query, candidate))
    return pairs


def retrieval_accuracy(results, truth):
    """Fraction of retrieved (deduplicated) pairs that are verified
    matches; 0 when nothing was retrieved."""
    pairs = retrieved_pairs(results)
    if not pairs:
        return 0.0
    return len(pairs & truth) / len(pairs)


def timed_pipeline(inputs, k, head=None, cfg=AnnConfig(), forward=None):
    """Retrieve every input against all others, reporting the time split
    between feature extraction and neighbor search.

    ``inputs`` is either a DescriptorSet (extraction cost 0 by definition)
    or a mapping name -> feature map, aggregated through ``forward``
    (a callable map -> GlobalDescriptor-like with .vector).
    """
    if isinstance(inputs, DescriptorSet):
        corpus = inputs
        t_fe = 0.0
    else:
        if forward is None:
            raise ValueError("feature-map inputs need a forward callable")
        start = time.perf_counter()
        names = sorted(inputs)
        vectors = [forward(inputs[name]).vector for name in names]
        t_fe = time.perf_counter() - start
        corpus = DescriptorSet(names=names, vectors=np.stack(vectors))
    start = time.perf_counter()
    index = build_ann_index(corpus, cfg)
    results = ann_query(index, corpus, k)
    t_nns = time.perf_counter() - start
    return results, TimingReport(t_feature_extraction=t_fe, t_nn_search=t_nns)


# ---------------------------------------------------------------------------
# serialization


def save_index(index):
    flat, spans = [], []
    neighbors = index.neighbors
    for node in range(len(index)):
        for layer, links in enumerate(neighbors[node]):
            spans.append((node, layer, len(links)))
            flat.extend(links)
    arrays = {
        "vectors": index.vectors,
        "names": np.frombuffer("\n".join(index.names).encode(), dtype=np.uint8),
        "levels": np.array(index.levels, dtype=np.int64),
        "spans": np.array(spans, dtype=np.int64).reshape(-1, 3),
        "flat": np.array(flat, dtype=np.int64),
        "entry": np.array([index.entry_point if index.entry_point is not None else -1,
                           index.max_level], dtype=np.int64),
        "cfg": np.array([index.cfg.max_degree, index.cfg.build_beam,
                         index.cfg.query_beam, index.cfg.seed], dtype=np.int64),
    }
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def load_index(data):
    try:
        archive = np.load(io.BytesIO(data), allow_pickle=False)
        vectors = archive["vectors"]
        names = bytes(archive["names"]).decode().split("\n") if archive["names"].size else []
    except Exception as exc:
        raise ParseError(f"unreadable index file: {exc}") from exc
    cfg = AnnConfig(max_degree=int(archive["cfg"][0]), build_beam=int(archive["cfg"][1]),
                    query_beam=int(archive["cfg"][2]), seed=int(archive["cfg"][3]))
    index = HnswIndex(vectors.shape[1], cfg)
    index.vectors = vectors.astype(np.float64)
    index.names = names
    index.levels = [int(v) for v in archive["levels"]]
    if index.levels:
        index._ensure_layer(max(index.levels), len(names))
    cursor = 0
    flat = archive["flat"]
    for node, layer, count in archive["spans"]:
        index._set_links(int(node), int(layer),
                         [int(v) for v in flat[cursor:cursor + count]])
        cursor += int(count)
    entry, max_level = archive["entry"]
    index.entry_point = int(entry) if entry >= 0 else None
    index.max_level = int(max_level)
    return index


def write_pairs(results):
    lines = []
    for query in sorted(results):
        for rank, (candidate, dist) in enumerate(results[query], start=1):
            lines.append(f"{query} {candidate} {rank} {repr(dist)}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_pairs(text):
    results = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 4:
            raise ParseError("expected `<query> <candidate> <rank> <distance>`", lineno)
        query, candidate = fields[0], fields[1]
        results.setdefault(query, []).append((candidate, float(fields[3])))
    return results
