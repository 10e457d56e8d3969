"""Streaming segmentation of edge sequences into locally coherent runs.

Edges arrive in text order. Each open run keeps a running-mean centroid
of its members' triple vectors and the set of entity ids seen so far; an
incoming edge joins the run when its fit score clears a threshold tau,
otherwise the run closes and a new one opens. The fit score is cosine
similarity to the centroid plus a small graph bonus when the edge chains
off the run (its head is the previous tail, or either endpoint was
already mentioned).

A second pass re-segments a window around each run boundary and merges
neighbors the windowed view doesn't separate. Cuts only ever merge in
this pass, so the run count is non-increasing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .codebook import Channel, Codebook
from .embedding import cosine, normalize
from .errors import EmptyRun, InvalidParams

__all__ = [
    "SegmenterParams",
    "Run",
    "triple_vector",
    "fit_score",
    "segment",
    "refine_boundaries",
    "mean_pairwise_cosine",
]


@dataclass(frozen=True)
class SegmenterParams:
    tau: float = 0.55
    bonus_b: float = 0.15
    window_w: int = 4

    def __post_init__(self):
        if not 0.0 <= self.tau < 1.0:
            raise InvalidParams(f"tau must be in [0, 1), got {self.tau}")
        if self.bonus_b < 0.0:
            raise InvalidParams(f"bonus_b must be >= 0, got {self.bonus_b}")
        if self.window_w < 1:
            raise InvalidParams(f"window_w must be >= 1, got {self.window_w}")

    @property
    def cohesion_floor(self) -> float:
        return self.tau - self.bonus_b


@dataclass
class Run:
    run_id: int
    channel: Channel
    edges: List[int]
    centroid: np.ndarray
    cohesion: float


class _OpenRun:
    """Mutable accumulator for the run currently being built."""

    def __init__(self, codebook: Codebook, edge_id: int, vec: np.ndarray):
        edge = codebook.edge(edge_id)
        self.edges = [edge_id]
        self.vecs = [vec]
        self.vec_sum = vec.astype(np.float64).copy()
        self.entities = {edge.head, edge.tail}
        self.last_tail = edge.tail

    @property
    def centroid(self) -> np.ndarray:
        return normalize(self.vec_sum / len(self.edges))

    def add(self, codebook: Codebook, edge_id: int, vec: np.ndarray):
        edge = codebook.edge(edge_id)
        self.edges.append(edge_id)
        self.vecs.append(vec)
        self.vec_sum += vec.astype(np.float64)
        self.entities.update((edge.head, edge.tail))
        self.last_tail = edge.tail


def triple_vector(codebook: Codebook, edge_id: int) -> np.ndarray:
    """Unit mean of the head, relation, and tail vectors of one edge."""
    e = codebook.edge(edge_id)
    mean = (codebook.entity_vec(e.head).astype(np.float64)
            + codebook.relation_vec(e.relation).astype(np.float64)
            + codebook.entity_vec(e.tail).astype(np.float64)) / 3.0
    return normalize(mean)


def mean_pairwise_cosine(vectors: Sequence[np.ndarray]) -> float:
    """Mean cosine over unordered pairs; a singleton scores 1.0."""
    n = len(vectors)
    if n == 0:
        raise EmptyRun("cohesion of an empty run is undefined")
    if n == 1:
        return 1.0
    mat = np.stack([normalize(v) for v in vectors])
    sims = mat @ mat.T
    upper = sims[np.triu_indices(n, k=1)]
    return float(np.clip(upper.mean(), -1.0, 1.0))


def fit_score(codebook: Codebook, state: _OpenRun, edge_id: int,
              vec: np.ndarray, params: SegmenterParams) -> float:
    """Cosine to the run centroid plus the graph-adjacency bonus."""
    edge = codebook.edge(edge_id)
    score = cosine(state.centroid, vec)
    if edge.head == state.last_tail or edge.head in state.entities \
            or edge.tail in state.entities:
        score += params.bonus_b
    return score


def _close(state: _OpenRun, run_id: int, channel: Channel) -> Run:
    return Run(
        run_id=run_id,
        channel=channel,
        edges=list(state.edges),
        centroid=state.centroid.astype(np.float32),
        cohesion=mean_pairwise_cosine(state.vecs),
    )


def segment(codebook: Codebook, edge_ids: Sequence[int], channel: Channel,
            params: SegmenterParams, start_id: int = 0) -> List[Run]:
    """One left-to-right pass: greedy accept while fit >= tau."""
    runs: List[Run] = []
    state: Optional[_OpenRun] = None
    next_id = start_id
    for eid in edge_ids:
        vec = triple_vector(codebook, eid)
        if state is None:
            state = _OpenRun(codebook, eid, vec)
            continue
        if fit_score(codebook, state, eid, vec, params) >= params.tau:
            state.add(codebook, eid, vec)
        else:
            runs.append(_close(state, next_id, channel))
            next_id += 1
            state = _OpenRun(codebook, eid, vec)
    if state is not None:
        runs.append(_close(state, next_id, channel))
    return runs


def _merge(codebook: Codebook, left: Run, right: Run, channel: Channel) -> Run:
    edges = left.edges + right.edges
    vecs = [triple_vector(codebook, eid) for eid in edges]
    centroid = normalize(np.mean(np.stack(vecs).astype(np.float64), axis=0))
    return Run(
        run_id=left.run_id,
        channel=channel,
        edges=edges,
        centroid=centroid.astype(np.float32),
        cohesion=mean_pairwise_cosine(vecs),
    )


def refine_boundaries(codebook: Codebook, runs: Sequence[Run],
                      params: SegmenterParams) -> List[Run]:
    """Re-segment a +/- w edge window at each boundary; merge unsupported cuts.

    Iterates left to right once. A boundary survives only when the
    windowed re-segmentation also cuts exactly at the original split
    point; otherwise the two runs merge and scanning continues with the
    merged run on the left.
    """
    if not runs:
        return []
    channel = runs[0].channel
    out = [runs[0]]
    w = params.window_w
    for nxt in runs[1:]:
        cur = out[-1]
        left_window = cur.edges[-w:]
        right_window = nxt.edges[:w]
        replay = segment(codebook, left_window + right_window, channel, params)
        cut_positions = set()
        consumed = 0
        for r in replay[:-1]:
            consumed += len(r.edges)
            cut_positions.add(consumed)
        if len(left_window) in cut_positions:
            out.append(nxt)
        else:
            out[-1] = _merge(codebook, cur, nxt, channel)
    return out
