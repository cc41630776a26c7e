"""Geometric similarity between image pairs, counted as common 3D points,
and per-image positive candidate lists derived from it."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

from .recon import canonical_pair

DEFAULT_EPSILON = 32


class CovisibilityTable(dict):
    """Mapping canonical (id_a, id_b) -> number of co-observed 3D points.

    Pairs with zero common points are absent. Symmetric by construction.
    """

    def similarity(self, a, b):
        if a == b:
            raise ValueError("similarity of an image with itself is its point count; "
                             "the table stores pairs only")
        return self.get(canonical_pair(a, b), 0)


@dataclass(frozen=True)
class PositiveEntry:
    image_id: int
    similarity: int


def build_covisibility(recon):
    """Count common 3D points for every covisible image pair.

    Inverts tracks: each point of track length L contributes one count to
    each of its C(L, 2) pairs, which is linear in total track mass instead
    of quadratic in images.
    """
    table = CovisibilityTable()
    for pt in recon.points.values():
        ids = sorted(i for i, _ in pt.track)
        for u in range(len(ids)):
            for v in range(u + 1, len(ids)):
                key = (ids[u], ids[v])
                table[key] = table.get(key, 0) + 1
    return table


def positive_lists(table, recon, epsilon=DEFAULT_EPSILON):
    """Per-image positives: same-scene images with similarity > epsilon,
    sorted by similarity descending, ties by ascending image id."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    lists = defaultdict(list)
    for (a, b), gs in table.items():
        if gs <= epsilon:
            continue
        if recon.images[a].scene != recon.images[b].scene:
            continue
        lists[a].append(PositiveEntry(b, gs))
        lists[b].append(PositiveEntry(a, gs))
    out = {image_id: [] for image_id in recon.images}
    for image_id, entries in lists.items():
        out[image_id] = sorted(entries, key=lambda e: (-e.similarity, e.image_id))
    return out


def reconstruction_summary(recon):
    """(registered image count, 3D point count)."""
    return len(recon.images), len(recon.points)


def write_positive_lists(lists):
    lines = []
    for query_id in sorted(lists):
        lines.append(f"POSLIST {query_id}")
        for entry in lists[query_id]:
            lines.append(f"{entry.image_id} {entry.similarity}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_positive_lists(text):
    from .recon import ParseError

    lists = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if fields[0] == "POSLIST":
            if len(fields) != 2:
                raise ParseError("POSLIST expects one query id", lineno)
            query_id = int(fields[1])
            if query_id in lists:
                raise ParseError(f"duplicate POSLIST for query {query_id}", lineno)
            current = lists.setdefault(query_id, [])
        else:
            if current is None:
                raise ParseError("entry before any POSLIST header", lineno)
            if len(fields) != 2:
                raise ParseError("positive entry expects `<image_id> <gs>`", lineno)
            current.append(PositiveEntry(int(fields[0]), int(fields[1])))
    return lists
