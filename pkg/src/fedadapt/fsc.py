"""Similarity between client representations and grouping of clients.

Two routes are offered.  The matrix route computes every pairwise Euclidean
distance and clusters with single linkage.  The anchor route measures
distances from one randomly drawn client only (n - 1 evaluations) and splits
the sorted distances at their largest gaps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ComparisonError, ConfigurationError

FLAT_TOLERANCE = 1e-9


class DistanceCounter:
    """Counts distance evaluations; pass one in to audit computation cost."""

    def __init__(self):
        self.count = 0


@dataclass(frozen=True)
class SimilarityMatrix:
    client_ids: tuple
    entries: np.ndarray

    @property
    def n(self):
        return len(self.client_ids)

    def to_json(self):
        return {"client_ids": list(self.client_ids), "entries": [[float(v) for v in row] for row in self.entries]}

    def pair_rows(self):
        rows = []
        for a in range(self.n):
            for b in range(a + 1, self.n):
                rows.append((self.client_ids[a], self.client_ids[b], float(self.entries[a, b])))
        return rows


@dataclass(frozen=True)
class AnchorSimilarityVector:
    anchor_id: int
    client_ids: tuple
    distances: np.ndarray

    def to_json(self):
        return {
            "anchor_id": self.anchor_id,
            "client_ids": list(self.client_ids),
            "distances": [float(v) for v in self.distances],
        }


@dataclass(frozen=True)
class GroupAssignment:
    groups: dict  # client_id -> group id (0-based)
    group_count: int = field(init=False)

    def __post_init__(self):
        ids = sorted(set(self.groups.values()))
        if ids != list(range(len(ids))):
            raise ConfigurationError(f"group ids must be contiguous from 0, got {ids}")
        object.__setattr__(self, "group_count", len(ids))

    def members(self, group_id):
        return sorted(c for c, g in self.groups.items() if g == group_id)

    def partition(self):
        return [self.members(g) for g in range(self.group_count)]

    def to_json(self):
        return {
            "group_count": self.group_count,
            "groups": {str(c): g for c, g in sorted(self.groups.items())},
            "members": self.partition(),
        }

    @classmethod
    def from_partition(cls, parts):
        """Build from client-id lists; ids renumbered by smallest member."""
        parts = sorted((sorted(int(c) for c in p) for p in parts if len(p)), key=lambda p: p[0])
        return cls({c: g for g, p in enumerate(parts) for c in p})


def _check_comparable(r_i, r_j):
    a, b = r_i.selector, r_j.selector
    if a.relu_index != b.relu_index or a.channel_ids != b.channel_ids:
        raise ComparisonError(
            f"clients {r_i.client_id} and {r_j.client_id} used different channel selectors; not comparable"
        )


def similarity(r_i, r_j, counter=None):
    """Euclidean distance between two representations (smaller = more alike)."""
    _check_comparable(r_i, r_j)
    if counter is not None:
        counter.count += 1
    d = r_i.values.astype(np.float64) - r_j.values.astype(np.float64)
    return float(np.sqrt(np.dot(d, d)))


def full_matrix(reps, counter=None):
    """All n(n-1)/2 pairwise distances, mirrored into a symmetric matrix."""
    if len(reps) < 2:
        raise ConfigurationError("need at least two representations")
    reps = sorted(reps, key=lambda r: r.client_id)
    n = len(reps)
    s = np.zeros((n, n))
    for a in range(n):
        for b in range(a + 1, n):
            s[a, b] = s[b, a] = similarity(reps[a], reps[b], counter)
    return SimilarityMatrix(tuple(r.client_id for r in reps), s)


def anchor_vector(reps, anchor_seed, counter=None):
    """Distances from one seeded-random anchor client to every client."""
    if len(reps) < 2:
        raise ConfigurationError("need at least two representations")
    reps = sorted(reps, key=lambda r: r.client_id)
    z = int(np.random.default_rng(anchor_seed).integers(len(reps)))
    return anchor_vector_for(reps, reps[z].client_id, counter)


def anchor_vector_for(reps, anchor_id, counter=None):
    reps = sorted(reps, key=lambda r: r.client_id)
    ids = tuple(r.client_id for r in reps)
    if anchor_id not in ids:
        raise ConfigurationError(f"anchor client {anchor_id} has no representation")
    anchor = reps[ids.index(anchor_id)]
    dist = np.array([0.0 if r.client_id == anchor_id else similarity(anchor, r, counter) for r in reps])
    return AnchorSimilarityVector(anchor_id, ids, dist)


# ---------------------------------------------------------------------------
# grouping
# ---------------------------------------------------------------------------


def single_linkage_merges(matrix):
    """Kruskal merge sequence: list of (height, a, b) over matrix positions."""
    n = matrix.n
    edges = sorted((matrix.entries[a, b], a, b) for a in range(n) for b in range(a + 1, n))
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    merges = []
    for h, a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
            merges.append((float(h), a, b))
            if len(merges) == n - 1:
                break
    return merges


def _cut_linkage(matrix, n_merges):
    n = matrix.n
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            x = parent[x]
        return x

    for _, a, b in single_linkage_merges(matrix)[:n_merges]:
        ra, rb = find(a), find(b)
        parent[max(ra, rb)] = min(ra, rb)
    parts = {}
    for i in range(n):
        parts.setdefault(find(i), []).append(matrix.client_ids[i])
    return GroupAssignment.from_partition(parts.values())


def _largest_gaps(values, k):
    """Positions of the ``k`` largest consecutive gaps; ties keep the lower position."""
    gaps = np.diff(values)
    order = sorted(range(len(gaps)), key=lambda i: (-gaps[i], i))
    return sorted(order[:k])


def group_matrix(matrix, expected_groups=None):
    n = matrix.n
    if expected_groups is not None:
        if not 1 <= expected_groups <= n:
            raise ConfigurationError(f"expected_groups must lie in 1..{n}")
        return _cut_linkage(matrix, n - expected_groups)
    heights = [h for h, _, _ in single_linkage_merges(matrix)]
    if len(heights) < 2 or np.max(np.diff(heights)) <= FLAT_TOLERANCE:
        return _cut_linkage(matrix, n - 1)
    (pos,) = _largest_gaps(heights, 1)
    # keep merges up to and including the one below the gap
    return _cut_linkage(matrix, pos + 1)


def group_anchor(vector, expected_groups=None, epsilon=None):
    ids = np.asarray(vector.client_ids)
    order = sorted(range(len(ids)), key=lambda i: (vector.distances[i], ids[i]))
    sorted_d = vector.distances[order]
    gaps = np.diff(sorted_d)
    n = len(ids)
    if expected_groups is not None:
        if not 1 <= expected_groups <= n:
            raise ConfigurationError(f"expected_groups must lie in 1..{n}")
        cuts = _largest_gaps(sorted_d, expected_groups - 1)
    else:
        if len(gaps) == 0 or gaps.max() <= FLAT_TOLERANCE:
            cuts = []
        else:
            eps = gaps.max() / 2 if epsilon is None else epsilon
            cuts = [i for i, g in enumerate(gaps) if g > eps]
    parts, start = [], 0
    for c in cuts:
        parts.append([int(ids[i]) for i in order[start : c + 1]])
        start = c + 1
    parts.append([int(ids[i]) for i in order[start:]])
    return GroupAssignment.from_partition(parts)


def group_clients(similarities, expected_groups=None, epsilon=None):
    """Partition clients from a SimilarityMatrix or an AnchorSimilarityVector.

    Matrix input: single linkage cut at ``expected_groups`` clusters, or at
    the largest gap between successive merge heights.  Anchor input: sorted
    distances split at the ``expected_groups - 1`` largest gaps, or at every
    gap wider than ``epsilon`` (default: half the widest gap).  Inputs with
    no gap wider than 1e-9 form a single group.
    """
    if isinstance(similarities, SimilarityMatrix):
        return group_matrix(similarities, expected_groups)
    if isinstance(similarities, AnchorSimilarityVector):
        return group_anchor(similarities, expected_groups, epsilon)
    raise ConfigurationError(f"cannot group {type(similarities).__name__}")


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def separation(matrix, partition):
    """``(min inter-group distance, max intra-group diameter)`` of a partition."""
    pos = {c: i for i, c in enumerate(matrix.client_ids)}
    label = {c: g for g, members in enumerate(partition) for c in members}
    inter, intra = np.inf, 0.0
    for a in matrix.client_ids:
        for b in matrix.client_ids:
            if a >= b:
                continue
            d = matrix.entries[pos[a], pos[b]]
            if label[a] == label[b]:
                intra = max(intra, d)
            else:
                inter = min(inter, d)
    return float(inter), float(intra)


def is_well_separated(matrix, partition):
    inter, intra = separation(matrix, partition)
    return inter > 2 * intra


def cluster_purity(assignment, truth):
    """Fraction of clients whose group's majority ground-truth label is their own."""
    good = 0
    for members in assignment.partition():
        labels = [truth[c] for c in members]
        values, counts = np.unique(labels, return_counts=True)
        good += int(counts.max())
    return good / len(assignment.groups)


def write_json(obj, path, extra=None):
    payload = obj.to_json()
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
