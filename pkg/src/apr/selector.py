"""Per-channel knowledge selection over retrieved runs.

Each channel carries one of three actions, ordered include_all > unique
> not_include by how much they admit. `unique` is the interesting one:
runs are clustered by centroid similarity (single-link components above
a threshold) and each cluster is reduced to a consensus representative,
the member closest to all others. When every pairwise similarity inside
a cluster is at least theta, the representative is within 2*theta - 1 of
every member, so dropping the rest loses little.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence

import numpy as np

from .codebook import Channel
from .errors import InvalidParams
from .retrieval import RankedRun
from .segmenter import Run

__all__ = [
    "SelectorAction",
    "SelectorConfig",
    "RunCluster",
    "cluster_runs",
    "consensus_representative",
    "apply_selection",
]


class SelectorAction(enum.Enum):
    INCLUDE_ALL = "include_all"
    UNIQUE = "unique"
    NOT_INCLUDE = "not_include"

    @property
    def rank(self) -> int:
        """Lattice position: include_all admits most, not_include least."""
        return {"not_include": 0, "unique": 1, "include_all": 2}[self.value]

    @classmethod
    def parse(cls, text: str) -> "SelectorAction":
        key = text.strip().lower()
        for action in cls:
            if action.value == key:
                return action
        raise InvalidParams(f"unknown selector action: {text!r}")


@dataclass(frozen=True)
class SelectorConfig:
    actions: Mapping[Channel, SelectorAction] = field(
        default_factory=lambda: {ch: SelectorAction.UNIQUE for ch in Channel})
    cluster_threshold: float = 0.92

    def __post_init__(self):
        if not 0.0 < self.cluster_threshold < 1.0:
            raise InvalidParams("cluster_threshold must be in (0, 1)")
        for ch in Channel:
            if ch not in self.actions:
                raise InvalidParams(f"missing action for channel {ch.value}")

    @classmethod
    def parse(cls, spec: str, cluster_threshold: float = 0.92) -> "SelectorConfig":
        """Parse 'question=unique,answer=include_all,fact=unique'."""
        actions = {ch: SelectorAction.UNIQUE for ch in Channel}
        for part in spec.split(","):
            part = part.strip()
            if not part:
                continue
            if "=" not in part:
                raise InvalidParams(f"expected channel=action, got {part!r}")
            ch_name, action_name = part.split("=", 1)
            try:
                ch = Channel(ch_name.strip().lower())
            except ValueError as exc:
                raise InvalidParams(f"unknown channel: {ch_name!r}") from exc
            actions[ch] = SelectorAction.parse(action_name)
        return cls(actions=actions, cluster_threshold=cluster_threshold)


@dataclass
class RunCluster:
    members: List[int]
    representative: int


def cluster_runs(runs: Sequence[Run], threshold: float) -> List[RunCluster]:
    """Single-link components of the centroid-similarity graph.

    Two runs connect when their centroid cosine >= threshold; clusters
    are the connected components, ordered by first member appearance,
    each with its consensus representative already resolved.
    """
    if not runs:
        return []
    n = len(runs)
    centroids = np.stack([r.centroid for r in runs]).astype(np.float64)
    norms = np.linalg.norm(centroids, axis=1, keepdims=True)
    sims = (centroids / norms) @ (centroids / norms).T

    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if sims[i, j] >= threshold:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)

    groups: Dict[int, List[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)

    clusters = []
    vectors = {runs[i].run_id: centroids[i] for i in range(n)}
    for root in sorted(groups, key=lambda r: groups[r][0]):
        member_ids = [runs[i].run_id for i in groups[root]]
        rep = consensus_representative(member_ids, vectors)
        clusters.append(RunCluster(members=member_ids, representative=rep))
    return clusters


def consensus_representative(member_ids: Sequence[int],
                             vectors: Mapping[int, np.ndarray]) -> int:
    """The member with the largest summed cosine to all members; ties go low."""
    if not member_ids:
        raise InvalidParams("cluster has no members")
    mat = np.stack([np.asarray(vectors[m], dtype=np.float64) for m in member_ids])
    mat = mat / np.linalg.norm(mat, axis=1, keepdims=True)
    totals = (mat @ mat.T).sum(axis=1)
    best = None
    best_id = None
    for idx, rid in enumerate(member_ids):
        score = totals[idx]
        if best is None or score > best + 1e-12 or \
                (abs(score - best) <= 1e-12 and rid < best_id):
            best, best_id = score, rid
    return int(best_id)


def apply_selection(ranked_per_channel: Mapping[Channel, Sequence[RankedRun]],
                    runs_by_id: Mapping[int, Run],
                    config: SelectorConfig) -> Dict[Channel, List[RankedRun]]:
    """Apply each channel's action; `unique` keeps cluster representatives.

    Representatives inherit the rank of their cluster's best-ranked
    member so the output order still reflects retrieval order.
    """
    out: Dict[Channel, List[RankedRun]] = {}
    for ch in Channel:
        ranked = list(ranked_per_channel.get(ch, []))
        action = config.actions[ch]
        if action is SelectorAction.NOT_INCLUDE:
            out[ch] = []
        elif action is SelectorAction.INCLUDE_ALL:
            out[ch] = ranked
        else:
            runs = [runs_by_id[r.run_id] for r in ranked]
            rank_of = {r.run_id: pos for pos, r in enumerate(ranked)}
            by_id = {r.run_id: r for r in ranked}
            clusters = cluster_runs(runs, config.cluster_threshold)
            reps = sorted(clusters, key=lambda c: min(rank_of[m] for m in c.members))
            out[ch] = [by_id[c.representative] for c in reps]
    return out
