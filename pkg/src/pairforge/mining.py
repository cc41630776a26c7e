"""Training batch construction.

The batched strategy draws queries from distinct scenes and takes each
query's negatives to be the other queries' positives, so no descriptor
ever needs to be extracted during mining. The two descriptor-driven
baselines (nearest-positive selection and global hard-negative mining)
are provided for comparison, with extraction counting to make their cost
measurable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .annotate import PositiveEntry
from .recon import ParseError


class MiningError(ValueError):
    pass


@dataclass(frozen=True)
class MiningConfig:
    b: int = 5   # queries per batch, each from a distinct scene
    m: int = 3   # positives per query
    t: int = 1   # batches to generate
    epsilon: int = 32
    rng_seed: int = 0

    def __post_init__(self):
        if self.b < 2:
            raise ValueError(f"b must be >= 2 (negatives come from other queries), got {self.b}")
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if self.t < 1:
            raise ValueError(f"t must be >= 1, got {self.t}")


@dataclass(frozen=True)
class BatchQuery:
    query: int
    positives: tuple[PositiveEntry, ...]  # sorted by similarity desc, id asc


@dataclass(frozen=True)
class TrainingBatch:
    queries: tuple[BatchQuery, ...]

    def negatives_of(self, i):
        """Image ids serving as negatives for query i: every other
        query's positives, in batch order."""
        out = []
        for j, entry in enumerate(self.queries):
            if j == i:
                continue
            out.extend(e.image_id for e in entry.positives)
        return out

    def image_ids(self):
        ids = []
        for entry in self.queries:
            ids.append(entry.query)
            ids.extend(e.image_id for e in entry.positives)
        return ids


def _rng(seed):
    # counter-based generator: identical draws on every platform
    return np.random.Generator(np.random.Philox(key=seed))


def mine_batched(poslists, scene_of, config):
    """Generate ``config.t`` batches of ``b`` queries x ``m`` positives.

    Eligible queries are images whose positive list holds at least ``m``
    entries; a scene is eligible if it has one. Raises MiningError when
    fewer than ``b`` scenes qualify.
    """
    eligible_by_scene = {}
    for image_id, entries in poslists.items():
        if len(entries) >= config.m:
            eligible_by_scene.setdefault(scene_of[image_id], []).append(image_id)
    scenes = sorted(eligible_by_scene)
    if len(scenes) < config.b:
        raise MiningError(
            f"batched mining needs {config.b} scenes with a query holding >= "
            f"{config.m} positives, found {len(scenes)}")
    for scene in scenes:
        eligible_by_scene[scene].sort()

    rng = _rng(config.rng_seed)
    batches = []
    for _ in range(config.t):
        chosen_scenes = rng.choice(len(scenes), size=config.b, replace=False)
        entries = []
        for scene_idx in chosen_scenes:
            pool = eligible_by_scene[scenes[scene_idx]]
            query = pool[rng.integers(len(pool))]
            candidates = poslists[query]
            picked = rng.choice(len(candidates), size=config.m, replace=False)
            positives = sorted((candidates[i] for i in picked),
                               key=lambda e: (-e.similarity, e.image_id))
            entries.append(BatchQuery(query=query, positives=tuple(positives)))
        batches.append(TrainingBatch(queries=tuple(entries)))
    return batches


def select_descriptor_nearest_positive(query, candidates, descriptors):
    """The candidate with minimum descriptor distance to the query, ties
    broken by ascending image id. ``descriptors`` maps image id -> vector."""
    if not candidates:
        raise ValueError("candidate set is empty")
    q = _descriptor(descriptors, query)
    best = None
    for c in sorted(candidates):
        d = float(np.linalg.norm(_descriptor(descriptors, c) - q))
        if best is None or d < best[0]:
            best = (d, c)
    return best[1]


def mine_global_hard_negatives(query, descriptors, scene_of, k):
    """The k nearest cross-scene images by descriptor distance, ties by
    ascending image id."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    q = _descriptor(descriptors, query)
    scene_q = scene_of[query]
    ranked = []
    for image_id in sorted(descriptors):
        if image_id == query or scene_of[image_id] == scene_q:
            continue
        ranked.append((float(np.linalg.norm(descriptors[image_id] - q)), image_id))
    if not ranked:
        raise MiningError(f"no image outside scene {scene_q} to mine negatives from")
    ranked.sort()
    return [image_id for _, image_id in ranked[:k]]


def _descriptor(descriptors, image_id):
    try:
        return np.asarray(descriptors[image_id], dtype=np.float64)
    except KeyError:
        raise KeyError(f"image {image_id} has no descriptor") from None


# ---------------------------------------------------------------------------
# mining cost accounting


def count_descriptor_extractions(strategy, dataset_size, epochs):
    """Descriptor extractions a strategy performs across a run. The
    batched strategy consults geometric similarity only, so it never
    extracts; global hard mining re-extracts the whole dataset every
    epoch."""
    if strategy == "batched":
        return 0
    if strategy == "global-hard":
        return dataset_size * epochs
    raise ValueError(f"unknown strategy {strategy!r}")


@dataclass
class ExtractionCounter:
    """Counts descriptor extractions performed through it."""

    count: int = 0

    def extract(self, compute, image_id):
        self.count += 1
        return compute(image_id)

    def extract_all(self, compute, image_ids):
        return {i: self.extract(compute, i) for i in image_ids}


@dataclass
class GlobalHardMiningRun:
    """Epoch driver for the descriptor-driven baseline: re-extracts every
    descriptor at the start of each epoch, then mines per-query."""

    scene_of: dict
    counter: ExtractionCounter = field(default_factory=ExtractionCounter)

    def run_epoch(self, compute, queries, k):
        image_ids = sorted(self.scene_of)
        descriptors = self.counter.extract_all(compute, image_ids)
        return {q: mine_global_hard_negatives(q, descriptors, self.scene_of, k)
                for q in queries}


@dataclass
class BatchedMiningRun:
    """Epoch driver for the geometric strategy; descriptor-free, so the
    counter stays at zero."""

    scene_of: dict
    counter: ExtractionCounter = field(default_factory=ExtractionCounter)

    def run_epoch(self, poslists, config):
        return mine_batched(poslists, self.scene_of, config)


# ---------------------------------------------------------------------------
# batch file format


def write_batches(batches):
    lines = []
    for batch in batches:
        lines.append("BATCH")
        for entry in batch.queries:
            lines.append(f"QUERY {entry.query}")
            for e in entry.positives:
                lines.append(f"POS {e.image_id} {e.similarity}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_batches(text):
    batches = []
    queries = None
    positives = None

    def flush_query():
        nonlocal positives
        if positives is not None:
            queries.append(BatchQuery(query=positives[0], positives=tuple(positives[1])))
            positives = None

    def flush_batch():
        nonlocal queries
        flush_query()
        if queries is not None:
            batches.append(TrainingBatch(queries=tuple(queries)))
            queries = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if fields[0] == "BATCH":
            flush_batch()
            queries = []
        elif fields[0] == "QUERY":
            if queries is None:
                raise ParseError("QUERY before any BATCH", lineno)
            if len(fields) != 2:
                raise ParseError("QUERY expects one image id", lineno)
            flush_query()
            positives = (int(fields[1]), [])
        elif fields[0] == "POS":
            if positives is None:
                raise ParseError("POS before any QUERY", lineno)
            if len(fields) != 3:
                raise ParseError("POS expects `<image_id> <gs>`", lineno)
            positives[1].append(PositiveEntry(int(fields[1]), int(fields[2])))
        else:
            raise ParseError(f"unknown record {fields[0]!r}", lineno)
    flush_batch()
    return batches
