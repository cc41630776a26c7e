"""Metric losses over L2-normalized embeddings with exact analytic
gradients: triplet loss and ranked list loss, in single-query and batch
forms.

The ranked list loss combines a hypersphere term (positives pulled inside
radius alpha - m, negatives pushed beyond alpha) with an ordering term
that penalizes a higher-ranked positive sitting farther from the query
than the next one. Zero-loss (trivial) hinge terms can be dropped from
the averaging denominator so they stop diluting the gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_MARGIN = 0.1
DEFAULT_ALPHA = 0.9
# the NetVLAD head concatenates many sub-vectors, which spreads embeddings
# across a wider shell; its hypersphere radius is larger
HEAD_ALPHA = {"netvlad": 1.35, "gem": 0.9, "max": 0.9, "linear": 0.9}

_ZERO_NORM_TOL = 0.0


class NormalizationError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    margin: float = DEFAULT_MARGIN
    alpha: float = DEFAULT_ALPHA
    nontrivial_only: bool = True

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")
        if self.alpha - self.margin <= 0:
            raise ValueError(f"alpha ({self.alpha}) must exceed margin ({self.margin}) "
                             "so the inner hypersphere has positive radius")


@dataclass
class LossReport:
    value: float
    grads: dict = field(default_factory=dict)
    active_terms: int = 0
    total_terms: int = 0


def _unit(v, what="embedding"):
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm <= _ZERO_NORM_TOL:
        raise NormalizationError(f"cannot normalize zero-norm {what}")
    return v / norm, norm


def distance(a, b):
    """Euclidean distance between the L2-normalized inputs."""
    ah, _ = _unit(a)
    bh, _ = _unit(b)
    return float(np.linalg.norm(ah - bh))


def _distance_with_grads(a, b):
    """Distance plus its gradients with respect to the raw (unnormalized)
    inputs. The gradient at coincident inputs is taken as zero."""
    ah, na = _unit(a)
    bh, nb = _unit(b)
    diff = ah - bh
    d = float(np.linalg.norm(diff))
    if d == 0.0:
        z = np.zeros_like(ah)
        return d, z, z.copy()
    gu = diff / d
    ga = (gu - ah * (ah @ gu)) / na
    gb = (-gu - bh * (bh @ -gu)) / nb
    return d, ga, gb


def triplet_loss(anchor, positive, negative, cfg=LossConfig()):
    """Hinge on D(A,P) - D(A,N) + margin. The subgradient at the kink
    (and below) is zero, so an easy triplet contributes nothing."""
    d_ap, g_ap_a, g_ap_p = _distance_with_grads(anchor, positive)
    d_an, g_an_a, g_an_n = _distance_with_grads(anchor, negative)
    hinge = d_ap - d_an + cfg.margin
    if hinge > 0.0:
        grads = {
            "anchor": g_ap_a - g_an_a,
            "positive": g_ap_p,
            "negative": -g_an_n,
        }
        return LossReport(value=float(hinge), grads=grads, active_terms=1, total_terms=1)
    zero = np.zeros(np.asarray(anchor, dtype=np.float64).shape)
    return LossReport(value=0.0,
                      grads={"anchor": zero, "positive": zero.copy(),
                             "negative": zero.copy()},
                      active_terms=0, total_terms=1)


def ranked_list_loss(query, positives, negatives, cfg=LossConfig()):
    """Ranked list loss for one query.

    ``positives`` must be ordered by the caller from most to least
    geometrically similar; the ordering term hinges on each adjacent pair
    so the loss is zero only when distances follow that ranking.
    ``negatives`` may be empty.
    """
    positives = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    negatives = np.asarray(negatives, dtype=np.float64).reshape(-1, positives.shape[1]) \
        if np.size(negatives) else np.zeros((0, positives.shape[1]))
    n_pos, n_neg = positives.shape[0], negatives.shape[0]
    if n_pos < 1:
        raise ValueError("ranked list loss needs at least one positive")

    query = np.asarray(query, dtype=np.float64)
    g_query = np.zeros_like(query)
    g_pos = np.zeros_like(positives)
    g_neg = np.zeros_like(negatives)

    d_pos, gq_pos, gp_pos = [], [], []
    for p in positives:
        d, gq, gp = _distance_with_grads(query, p)
        d_pos.append(d)
        gq_pos.append(gq)
        gp_pos.append(gp)
    d_neg, gq_neg, gn_neg = [], [], []
    for n in negatives:
        d, gq, gn = _distance_with_grads(query, n)
        d_neg.append(d)
        gq_neg.append(gq)
        gn_neg.append(gn)

    inner = cfg.alpha - cfg.margin
    pos_hinges = [d - inner for d in d_pos]
    neg_hinges = [cfg.alpha - d for d in d_neg]
    active_pos = [i for i, h in enumerate(pos_hinges) if h > 0.0]
    active_neg = [j for j, h in enumerate(neg_hinges) if h > 0.0]

    if cfg.nontrivial_only:
        denom = max(1, len(active_pos) + len(active_neg))
    else:
        denom = n_pos + n_neg
    l1 = (sum(pos_hinges[i] for i in active_pos)
          + sum(neg_hinges[j] for j in active_neg)) / denom
    for i in active_pos:
        g_query += gq_pos[i] / denom
        g_pos[i] += gp_pos[i] / denom
    for j in active_neg:
        g_query -= gq_neg[j] / denom
        g_neg[j] -= gn_neg[j] / denom

    l2 = 0.0
    active_order = 0
    for i in range(n_pos - 1):
        hinge = d_pos[i] - d_pos[i + 1]
        if hinge > 0.0:
            active_order += 1
            l2 += hinge / n_pos
            g_query += (gq_pos[i] - gq_pos[i + 1]) / n_pos
            g_pos[i] += gp_pos[i] / n_pos
            g_pos[i + 1] -= gp_pos[i + 1] / n_pos

    return LossReport(
        value=float(l1 + l2),
        grads={"query": g_query, "positives": g_pos, "negatives": g_neg},
        active_terms=len(active_pos) + len(active_neg) + active_order,
        total_terms=n_pos + n_neg + max(0, n_pos - 1),
    )


def batch_ranked_list_loss(batch, embeddings, cfg=LossConfig()):
    """Mean ranked list loss over the queries of a batch.

    Each query's negatives are the positives of the other queries; an
    image serving several roles accumulates every gradient it receives.
    ``embeddings`` maps image id -> raw embedding vector. Gradients are
    returned per image id under ``grads['by_image']``.
    """
    n_queries = len(batch.queries)
    grads = {}
    total_value = 0.0
    active = total = 0
    for i, entry in enumerate(batch.queries):
        pos_ids = [e.image_id for e in entry.positives]
        neg_ids = batch.negatives_of(i)
        report = ranked_list_loss(
            embeddings[entry.query],
            np.stack([np.asarray(embeddings[p], dtype=np.float64) for p in pos_ids]),
            np.stack([np.asarray(embeddings[n], dtype=np.float64) for n in neg_ids])
            if neg_ids else np.zeros((0, np.size(embeddings[entry.query]))),
            cfg,
        )
        total_value += report.value / n_queries
        active += report.active_terms
        total += report.total_terms
        _accumulate(grads, entry.query, report.grads["query"] / n_queries)
        for p, g in zip(pos_ids, report.grads["positives"]):
            _accumulate(grads, p, g / n_queries)
        for n, g in zip(neg_ids, report.grads["negatives"]):
            _accumulate(grads, n, g / n_queries)
    return LossReport(value=total_value, grads={"by_image": grads},
                      active_terms=active, total_terms=total)


def batch_triplet_loss(batch, embeddings, cfg=LossConfig()):
    """Triplet loss over every (query, positive, cross-query negative)
    combination in the batch, averaged over the active hinges when
    ``nontrivial_only`` is set and over all hinges otherwise."""
    terms = []
    for i, entry in enumerate(batch.queries):
        q = entry.query
        d_cache = {}

        def dist(a, b):
            key = (a, b)
            if key not in d_cache:
                d_cache[key] = _distance_with_grads(embeddings[a], embeddings[b])
            return d_cache[key]

        for p_entry in entry.positives:
            for n in batch.negatives_of(i):
                d_ap, g_ap_a, g_ap_p = dist(q, p_entry.image_id)
                d_an, g_an_a, g_an_n = dist(q, n)
                hinge = d_ap - d_an + cfg.margin
                terms.append((hinge, q, p_entry.image_id, n,
                              g_ap_a, g_ap_p, g_an_a, g_an_n))
    active = [t for t in terms if t[0] > 0.0]
    denom = max(1, len(active)) if cfg.nontrivial_only else max(1, len(terms))
    grads = {}
    value = 0.0
    for hinge, q, p, n, g_ap_a, g_ap_p, g_an_a, g_an_n in active:
        value += hinge / denom
        _accumulate(grads, q, (g_ap_a - g_an_a) / denom)
        _accumulate(grads, p, g_ap_p / denom)
        _accumulate(grads, n, -g_an_n / denom)
    return LossReport(value=float(value), grads={"by_image": grads},
                      active_terms=len(active), total_terms=len(terms))


def _accumulate(grads, image_id, g):
    if image_id in grads:
        grads[image_id] = grads[image_id] + g
    else:
        grads[image_id] = np.array(g, dtype=np.float64)
