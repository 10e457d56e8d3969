"""Edge codebook: interned entities, relations, and unique edges.

Text becomes triples, triples become ids. Entities and relations are
interned into append-only tables (surface -> dense id, first appearance
wins), each unique (head, relation, tail) id-triple becomes one edge id,
and per-channel stores hold sequences of edge ids instead of text. The
codebook also owns one unit vector per entity and relation, fetched from
the embedding provider exactly once when the symbol is first interned.

The payoff is measured by `stats()`: total edge occurrences across the
stores divided by the number of unique edges. On redundant corpora the
ratio grows with corpus size while the tables plateau.
"""

from __future__ import annotations

import enum
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .embedding import EmbeddingProvider
from .errors import (
    DanglingId,
    DimensionMismatch,
    EmptySurface,
    IoError,
    SnapshotReadOnly,
)

__all__ = [
    "Channel",
    "Edge",
    "EdgeSequence",
    "CodebookStats",
    "Codebook",
    "normalize_surface",
    "VECTORS_MAGIC",
]

VECTORS_MAGIC = b"APRV"


class Channel(enum.Enum):
    QUESTION = "question"
    ANSWER = "answer"
    FACT = "fact"


@dataclass(frozen=True)
class Edge:
    head: int
    relation: int
    tail: int

    def as_tuple(self) -> Tuple[int, int, int]:
        return (self.head, self.relation, self.tail)


@dataclass
class EdgeSequence:
    """An ordered run of edge ids tied to the span of text it came from."""

    channel: Channel
    edges: List[int]
    source_span_id: Optional[str] = None


@dataclass(frozen=True)
class CodebookStats:
    n_entities: int
    n_relations: int
    n_edges: int
    sequences: Dict[str, int]
    occurrences: Dict[str, int]
    total_occurrences: int
    compression_ratio: float


def normalize_surface(surface: str) -> str:
    """Trim and collapse internal whitespace; case is preserved."""
    norm = " ".join(surface.split())
    if not norm:
        raise EmptySurface(f"surface form is empty after normalization: {surface!r}")
    return norm


class Codebook:
    """Append-only symbol tables plus per-channel edge-sequence stores."""

    def __init__(self, provider: EmbeddingProvider):
        self.provider = provider
        self.entities: List[str] = []
        self.relations: List[str] = []
        self.edges: List[Edge] = []
        self._entity_ids: Dict[str, int] = {}
        self._relation_ids: Dict[str, int] = {}
        self._edge_ids: Dict[Tuple[int, int, int], int] = {}
        self._entity_vecs: List[np.ndarray] = []
        self._relation_vecs: List[np.ndarray] = []
        self.stores: Dict[Channel, List[EdgeSequence]] = {ch: [] for ch in Channel}
        self._frozen = False

    # --- interning -------------------------------------------------------

    @property
    def dimension(self) -> int:
        return self.provider.dimension

    def _guard_frozen(self):
        if self._frozen:
            raise SnapshotReadOnly("cannot intern into a frozen snapshot")

    def intern_entity(self, surface: str) -> int:
        norm = normalize_surface(surface)
        eid = self._entity_ids.get(norm)
        if eid is not None:
            return eid
        self._guard_frozen()
        eid = len(self.entities)
        self.entities.append(norm)
        self._entity_ids[norm] = eid
        self._entity_vecs.append(self.provider.embed_one(norm))
        return eid

    def intern_relation(self, surface: str) -> int:
        norm = normalize_surface(surface)
        rid = self._relation_ids.get(norm)
        if rid is not None:
            return rid
        self._guard_frozen()
        rid = len(self.relations)
        self.relations.append(norm)
        self._relation_ids[norm] = rid
        self._relation_vecs.append(self.provider.embed_one(norm))
        return rid

    def intern_edge(self, head: int, relation: int, tail: int) -> int:
        self._check_entity(head)
        self._check_entity(tail)
        self._check_relation(relation)
        key = (head, relation, tail)
        eid = self._edge_ids.get(key)
        if eid is not None:
            return eid
        self._guard_frozen()
        eid = len(self.edges)
        self.edges.append(Edge(head, relation, tail))
        self._edge_ids[key] = eid
        return eid

    def indexify(self, triples: Iterable[Tuple[str, str, str]], channel: Channel,
                 source_span_id: Optional[str] = None) -> EdgeSequence:
        """Intern surface triples in order and append one sequence to the store."""
        ids = []
        for head, relation, tail in triples:
            h = self.intern_entity(head)
            r = self.intern_relation(relation)
            t = self.intern_entity(tail)
            ids.append(self.intern_edge(h, r, t))
        seq = EdgeSequence(channel=channel, edges=ids, source_span_id=source_span_id)
        self._guard_frozen()
        self.stores[channel].append(seq)
        return seq

    # --- lookup ------------------------------------------------------------

    def _check_entity(self, eid: int):
        if not 0 <= eid < len(self.entities):
            raise DanglingId(f"entity id {eid} out of range [0, {len(self.entities)})")

    def _check_relation(self, rid: int):
        if not 0 <= rid < len(self.relations):
            raise DanglingId(f"relation id {rid} out of range [0, {len(self.relations)})")

    def _check_edge(self, eid: int):
        if not 0 <= eid < len(self.edges):
            raise DanglingId(f"edge id {eid} out of range [0, {len(self.edges)})")

    def edge(self, edge_id: int) -> Edge:
        self._check_edge(edge_id)
        return self.edges[edge_id]

    def entity_vec(self, eid: int) -> np.ndarray:
        self._check_entity(eid)
        return self._entity_vecs[eid]

    def relation_vec(self, rid: int) -> np.ndarray:
        self._check_relation(rid)
        return self._relation_vecs[rid]

    def entity_matrix(self, ids: Sequence[int]) -> np.ndarray:
        return np.stack([self.entity_vec(i) for i in ids]) if ids else \
            np.zeros((0, self.dimension), dtype=np.float32)

    def relation_matrix(self, ids: Sequence[int]) -> np.ndarray:
        return np.stack([self.relation_vec(i) for i in ids]) if ids else \
            np.zeros((0, self.dimension), dtype=np.float32)

    def decode(self, edges: Union[EdgeSequence, Sequence[int]]) -> List[Tuple[str, str, str]]:
        """Map edge ids back to surface triples."""
        ids = edges.edges if isinstance(edges, EdgeSequence) else list(edges)
        out = []
        for eid in ids:
            e = self.edge(eid)
            out.append((self.entities[e.head], self.relations[e.relation],
                        self.entities[e.tail]))
        return out

    def triple_line(self, edge_id: int) -> str:
        """One edge rendered as 'head relation tail'."""
        e = self.edge(edge_id)
        return f"{self.entities[e.head]} {self.relations[e.relation]} {self.entities[e.tail]}"

    # --- measurement -------------------------------------------------------

    def stats(self) -> CodebookStats:
        sequences = {ch.value: len(self.stores[ch]) for ch in Channel}
        occurrences = {ch.value: sum(len(s.edges) for s in self.stores[ch]) for ch in Channel}
        total = sum(occurrences.values())
        ratio = total / len(self.edges) if self.edges else 0.0
        return CodebookStats(
            n_entities=len(self.entities),
            n_relations=len(self.relations),
            n_edges=len(self.edges),
            sequences=sequences,
            occurrences=occurrences,
            total_occurrences=total,
            compression_ratio=ratio,
        )

    def approx_bytes(self) -> int:
        """Rough in-memory footprint used by consolidation budget checks."""
        sym = sum(len(s.encode("utf-8")) + 40 for s in self.entities)
        sym += sum(len(s.encode("utf-8")) + 40 for s in self.relations)
        edges = len(self.edges) * 3 * 8
        seqs = sum(len(s.edges) * 8 + 64 for ch in Channel for s in self.stores[ch])
        vecs = (len(self._entity_vecs) + len(self._relation_vecs)) * self.dimension * 4
        return sym + edges + seqs + vecs

    # --- snapshots -----------------------------------------------------------

    def snapshot(self) -> "Codebook":
        """Frozen copy for concurrent readers; vectors are shared, tables copied."""
        snap = Codebook(self.provider)
        snap.entities = list(self.entities)
        snap.relations = list(self.relations)
        snap.edges = list(self.edges)
        snap._entity_ids = dict(self._entity_ids)
        snap._relation_ids = dict(self._relation_ids)
        snap._edge_ids = dict(self._edge_ids)
        snap._entity_vecs = list(self._entity_vecs)
        snap._relation_vecs = list(self._relation_vecs)
        snap.stores = {ch: [EdgeSequence(s.channel, list(s.edges), s.source_span_id)
                            for s in self.stores[ch]] for ch in Channel}
        snap._frozen = True
        return snap

    # --- persistence -----------------------------------------------------------

    def save(self, directory: str):
        """Write codebook.json, stores/<channel>.jsonl, and vectors.bin."""
        try:
            os.makedirs(os.path.join(directory, "stores"), exist_ok=True)
            doc = {
                "v": 1,
                "e": self.entities,
                "r": self.relations,
                "edge_matrix": [[e.head, e.relation, e.tail] for e in self.edges],
            }
            with open(os.path.join(directory, "codebook.json"), "w", encoding="utf-8") as fh:
                json.dump(doc, fh, ensure_ascii=False)
            for ch in Channel:
                path = os.path.join(directory, "stores", f"{ch.value}.jsonl")
                with open(path, "w", encoding="utf-8") as fh:
                    for seq in self.stores[ch]:
                        fh.write(json.dumps({"edges": seq.edges, "span": seq.source_span_id},
                                            ensure_ascii=False) + "\n")
            self._save_vectors(os.path.join(directory, "vectors.bin"))
        except OSError as exc:
            raise IoError(f"cannot save codebook to {directory}: {exc}") from exc

    def _save_vectors(self, path: str):
        rows = self._entity_vecs + self._relation_vecs
        count = len(rows)
        with open(path, "wb") as fh:
            fh.write(VECTORS_MAGIC)
            fh.write(struct.pack("<III", count, self.dimension, 0))
            if count:
                fh.write(np.stack(rows).astype("<f4").tobytes(order="C"))

    @classmethod
    def load(cls, directory: str, provider: EmbeddingProvider) -> "Codebook":
        cb = cls(provider)
        try:
            with open(os.path.join(directory, "codebook.json"), "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise IoError(f"cannot load codebook from {directory}: {exc}") from exc
        if doc.get("v") != 1:
            raise IoError(f"unsupported codebook version in {directory}: {doc.get('v')!r}")
        cb.entities = [normalize_surface(s) for s in doc["e"]]
        cb.relations = [normalize_surface(s) for s in doc["r"]]
        cb._entity_ids = {s: i for i, s in enumerate(cb.entities)}
        cb._relation_ids = {s: i for i, s in enumerate(cb.relations)}
        if len(cb._entity_ids) != len(cb.entities) or len(cb._relation_ids) != len(cb.relations):
            raise IoError(f"duplicate surfaces in {directory}/codebook.json")
        for row in doc["edge_matrix"]:
            h, r, t = (int(x) for x in row)
            cb._check_entity(h)
            cb._check_entity(t)
            cb._check_relation(r)
            cb._edge_ids[(h, r, t)] = len(cb.edges)
            cb.edges.append(Edge(h, r, t))
        if len(cb._edge_ids) != len(cb.edges):
            raise IoError(f"duplicate edges in {directory}/codebook.json")
        for ch in Channel:
            path = os.path.join(directory, "stores", f"{ch.value}.jsonl")
            if not os.path.exists(path):
                continue
            try:
                with open(path, "r", encoding="utf-8") as fh:
                    for line_no, line in enumerate(fh, 1):
                        if not line.strip():
                            continue
                        try:
                            rec = json.loads(line)
                        except json.JSONDecodeError as exc:
                            raise IoError(f"{path}:{line_no}: bad JSON: {exc}") from exc
                        ids = [int(x) for x in rec["edges"]]
                        for eid in ids:
                            cb._check_edge(eid)
                        cb.stores[ch].append(EdgeSequence(ch, ids, str(rec.get("span", ""))))
            except OSError as exc:
                raise IoError(f"cannot read {path}: {exc}") from exc
        cb._load_vectors(os.path.join(directory, "vectors.bin"))
        return cb

    def _load_vectors(self, path: str):
        try:
            with open(path, "rb") as fh:
                blob = fh.read()
        except OSError as exc:
            raise IoError(f"cannot read {path}: {exc}") from exc
        if len(blob) < 16 or blob[:4] != VECTORS_MAGIC:
            raise IoError(f"{path}: bad magic or truncated header")
        count, dim, _reserved = struct.unpack("<III", blob[4:16])
        expected = len(self.entities) + len(self.relations)
        if count != expected:
            raise IoError(f"{path}: {count} vectors on disk, tables need {expected}")
        if dim != self.dimension:
            raise DimensionMismatch(
                f"{path}: stored dimension {dim} != provider dimension {self.dimension}")
        body = np.frombuffer(blob[16:], dtype="<f4")
        if body.size != count * dim:
            raise IoError(f"{path}: payload holds {body.size} floats, expected {count * dim}")
        mat = body.reshape(count, dim).astype(np.float32)
        self._entity_vecs = [mat[i].copy() for i in range(len(self.entities))]
        self._relation_vecs = [mat[len(self.entities) + i].copy()
                               for i in range(len(self.relations))]
