"""Entity-only consolidation: alias detection, refinement, quotient remap.

Layer 1 scans entity vectors with a k-NN backend (exact by default,
pluggable for approximate indexes) and links pairs whose cosine clears a
conservative threshold; connected components become provisional alias
groups. Layer 2 runs inside each group: k-means under cosine
dissimilarity splits the group, and each cluster elects its medoid as
the surviving representative. The resulting alias map is applied as a
quotient: edges are rewritten through the map and deduplicated, stored
sequences are remapped and deduplicated keeping first occurrences, and
the entity table shrinks to the representatives. Relations are never
merged. The whole pass reuses existing vectors; it makes no embedding
calls.
"""

from __future__ import annotations

import datetime
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .codebook import Channel, Codebook, CodebookStats, Edge, EdgeSequence
from .errors import InvalidAliasMap, InvalidParams

__all__ = [
    "ConsolidationBudget",
    "AliasGroup",
    "AliasMap",
    "ConsolidationReport",
    "KnnBackend",
    "ExactKnnBackend",
    "build_alias_groups",
    "refine_groups",
    "apply_quotient",
    "should_consolidate",
    "consolidate",
]


@dataclass(frozen=True)
class ConsolidationBudget:
    max_entities: int = 50_000
    max_workspace_bytes: int = 256 * 1024 * 1024
    knn_k: int = 8
    tau_e: float = 0.93
    kmeans_k_fraction: float = 0.25
    kmeans_max_iters: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.max_entities < 1 or self.max_workspace_bytes < 1:
            raise InvalidParams("budgets must be positive")
        if self.knn_k < 1 or self.kmeans_max_iters < 1:
            raise InvalidParams("knn_k and kmeans_max_iters must be positive")
        if not 0.0 < self.tau_e < 1.0:
            raise InvalidParams("tau_e must be in (0, 1)")
        if not 0.0 < self.kmeans_k_fraction <= 1.0:
            raise InvalidParams("kmeans_k_fraction must be in (0, 1]")


@dataclass
class AliasGroup:
    members: List[int]
    provisional: bool = True


class AliasMap:
    """Total idempotent entity map; stores only the non-identity entries."""

    def __init__(self, mapping: Optional[Dict[int, int]] = None):
        self.mapping: Dict[int, int] = dict(mapping or {})

    def __call__(self, entity_id: int) -> int:
        return self.mapping.get(entity_id, entity_id)

    def __len__(self) -> int:
        return len(self.mapping)

    def validate(self, n_entities: int):
        for src, dst in self.mapping.items():
            if not (0 <= src < n_entities and 0 <= dst < n_entities):
                raise InvalidAliasMap(f"alias {src} -> {dst} out of range [0, {n_entities})")
            if self.mapping.get(dst, dst) != dst:
                raise InvalidAliasMap(
                    f"not idempotent: {src} -> {dst} -> {self.mapping[dst]}")

    def to_dict(self) -> Dict[str, int]:
        return {str(k): v for k, v in sorted(self.mapping.items())}


@dataclass
class ConsolidationReport:
    before_entities: int
    after_entities: int
    before_edges: int
    after_edges: int
    store_lengths_before: Dict[str, int]
    store_lengths_after: Dict[str, int]
    n_groups: int
    alias_pairs: int
    timestamp: str
    alias_map: Dict[str, int] = field(default_factory=dict)
    edge_id_map: Dict[int, int] = field(default_factory=dict)
    entity_id_map: Dict[int, int] = field(default_factory=dict)

    def as_json(self) -> Dict[str, object]:
        return {
            "v": 1,
            "before_entities": self.before_entities,
            "after_entities": self.after_entities,
            "before_edges": self.before_edges,
            "after_edges": self.after_edges,
            "store_lengths_before": self.store_lengths_before,
            "store_lengths_after": self.store_lengths_after,
            "n_groups": self.n_groups,
            "alias_pairs": self.alias_pairs,
            "timestamp": self.timestamp,
            "alias_map": self.alias_map,
        }


class KnnBackend(Protocol):
    def neighbors(self, vectors: np.ndarray, k: int) -> List[List[Tuple[int, float]]]:
        """Per row: up to k (index, cosine) neighbors, self excluded."""


class ExactKnnBackend:
    """Brute-force pairwise scan; fine at desk scale, trivially exact."""

    def neighbors(self, vectors: np.ndarray, k: int) -> List[List[Tuple[int, float]]]:
        n = vectors.shape[0]
        if n == 0:
            return []
        unit = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
        sims = unit @ unit.T
        out = []
        for i in range(n):
            # stable order: cosine descending, index ascending
            order = sorted((j for j in range(n) if j != i),
                           key=lambda j: (-sims[i, j], j))
            out.append([(j, float(sims[i, j])) for j in order[:k]])
        return out


def build_alias_groups(codebook: Codebook, knn_k: int = 8, tau_e: float = 0.93,
                       backend: Optional[KnnBackend] = None) -> List[AliasGroup]:
    """Connected components of the thresholded entity k-NN graph."""
    n = len(codebook.entities)
    if n < 2:
        return []
    backend = backend or ExactKnnBackend()
    vectors = np.stack([codebook.entity_vec(i) for i in range(n)])
    neighbor_lists = backend.neighbors(vectors, knn_k)

    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, neighbors in enumerate(neighbor_lists):
        for j, sim in neighbors:
            if sim >= tau_e:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)

    components: Dict[int, List[int]] = {}
    for i in range(n):
        components.setdefault(find(i), []).append(i)
    return [AliasGroup(members=sorted(members))
            for root, members in sorted(components.items()) if len(members) > 1]


def _farthest_point_init(unit: np.ndarray, k: int, seed: int) -> List[int]:
    n = unit.shape[0]
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    dissim = 1.0 - unit @ unit[chosen[0]]
    while len(chosen) < k:
        masked = dissim.copy()
        masked[chosen] = -np.inf
        nxt = int(np.argmax(masked))
        chosen.append(nxt)
        dissim = np.minimum(dissim, 1.0 - unit @ unit[nxt])
    return chosen


def _kmeans_cosine(unit: np.ndarray, k: int, max_iters: int, seed: int) -> List[List[int]]:
    """k-means with cosine dissimilarity and normalized-mean centroids."""
    n = unit.shape[0]
    if k >= n:
        return [[i] for i in range(n)]
    centroids = unit[_farthest_point_init(unit, k, seed)].copy()
    assign = np.full(n, -1)
    for _ in range(max_iters):
        sims = unit @ centroids.T
        # argmax breaks ties toward the lowest centroid index
        new_assign = np.argmax(sims, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            members = unit[assign == c]
            if len(members):
                mean = members.mean(axis=0)
                norm = np.linalg.norm(mean)
                if norm > 0:
                    centroids[c] = mean / norm
    clusters = [[] for _ in range(k)]
    for i, c in enumerate(assign):
        clusters[int(c)].append(i)
    return [c for c in clusters if c]


def _medoid(member_ids: Sequence[int], unit_by_id: Dict[int, np.ndarray]) -> int:
    """Member minimizing total cosine dissimilarity; ties go to the lowest id."""
    mat = np.stack([unit_by_id[m] for m in member_ids])
    totals = (1.0 - mat @ mat.T).sum(axis=1)
    best, best_id = None, None
    for idx, mid in enumerate(member_ids):
        cost = totals[idx]
        if best is None or cost < best - 1e-12 or \
                (abs(cost - best) <= 1e-12 and mid < best_id):
            best, best_id = cost, mid
    return int(best_id)


def refine_groups(codebook: Codebook, groups: Sequence[AliasGroup],
                  budget: ConsolidationBudget) -> AliasMap:
    """k-means inside each provisional group, then medoid representatives."""
    mapping: Dict[int, int] = {}
    for group in groups:
        members = sorted(group.members)
        if len(members) < 2:
            continue
        unit_by_id = {}
        for m in members:
            v = codebook.entity_vec(m).astype(np.float64)
            unit_by_id[m] = v / np.linalg.norm(v)
        k = max(1, math.ceil(budget.kmeans_k_fraction * len(members)))
        unit = np.stack([unit_by_id[m] for m in members])
        clusters = _kmeans_cosine(unit, k, budget.kmeans_max_iters, budget.seed)
        for local_cluster in clusters:
            ids = [members[i] for i in local_cluster]
            rep = _medoid(ids, unit_by_id)
            for mid in ids:
                if mid != rep:
                    mapping[mid] = rep
    alias_map = AliasMap(mapping)
    alias_map.validate(len(codebook.entities))
    return alias_map


def _uniq(ids: Sequence[int]) -> List[int]:
    seen = set()
    out = []
    for i in ids:
        if i not in seen:
            seen.add(i)
            out.append(i)
    return out


def apply_quotient(codebook: Codebook,
                   alias_map: AliasMap) -> Tuple[Codebook, ConsolidationReport]:
    """Rebuild the codebook through the alias map; copy-on-write, no embeds.

    The input codebook is untouched; in-flight readers keep their
    snapshot. Vectors for surviving entities are reused as-is.
    """
    alias_map.validate(len(codebook.entities))
    before = codebook.stats()

    survivors = sorted({alias_map(i) for i in range(len(codebook.entities))})
    entity_id_map = {}
    for new_id, old_rep in enumerate(survivors):
        entity_id_map[old_rep] = new_id
    full_entity_map = {old: entity_id_map[alias_map(old)]
                       for old in range(len(codebook.entities))}

    new = Codebook(codebook.provider)
    new.entities = [codebook.entities[old] for old in survivors]
    new._entity_ids = {s: i for i, s in enumerate(new.entities)}
    new._entity_vecs = [codebook.entity_vec(old) for old in survivors]
    new.relations = list(codebook.relations)
    new._relation_ids = {s: i for i, s in enumerate(new.relations)}
    new._relation_vecs = [codebook.relation_vec(i) for i in range(len(codebook.relations))]

    edge_id_map: Dict[int, int] = {}
    for old_id, edge in enumerate(codebook.edges):
        key = (full_entity_map[edge.head], edge.relation, full_entity_map[edge.tail])
        new_id = new._edge_ids.get(key)
        if new_id is None:
            new_id = len(new.edges)
            new._edge_ids[key] = new_id
            new.edges.append(Edge(*key))
        edge_id_map[old_id] = new_id

    for ch in Channel:
        for seq in codebook.stores[ch]:
            remapped = _uniq([edge_id_map[e] for e in seq.edges])
            new.stores[ch].append(EdgeSequence(ch, remapped, seq.source_span_id))

    after = new.stats()
    report = ConsolidationReport(
        before_entities=before.n_entities,
        after_entities=after.n_entities,
        before_edges=before.n_edges,
        after_edges=after.n_edges,
        store_lengths_before=before.occurrences,
        store_lengths_after=after.occurrences,
        n_groups=len({alias_map(s) for s in alias_map.mapping}),
        alias_pairs=len(alias_map),
        timestamp=datetime.datetime.now(datetime.timezone.utc).isoformat(),
        alias_map=alias_map.to_dict(),
        edge_id_map=edge_id_map,
        entity_id_map=full_entity_map,
    )
    return new, report


def should_consolidate(stats: CodebookStats, workspace_bytes: int,
                       budget: ConsolidationBudget) -> bool:
    return stats.n_entities > budget.max_entities or \
        workspace_bytes > budget.max_workspace_bytes


def consolidate(codebook: Codebook, budget: ConsolidationBudget,
                backend: Optional[KnnBackend] = None
                ) -> Tuple[Codebook, ConsolidationReport]:
    """Layer 1 + Layer 2 + quotient in one call."""
    groups = build_alias_groups(codebook, budget.knn_k, budget.tau_e, backend)
    alias_map = refine_groups(codebook, groups, budget)
    return apply_quotient(codebook, alias_map)
