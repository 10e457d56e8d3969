"""Coarse-to-fine retrieval over runs.

Stage one never looks at text: a candidate run is scored by the best
entity-pair cosine and best relation-pair cosine between its symbols and
the query's, so shortlisting only touches the codebook's vector tables.
Stage two re-ranks the per-channel shortlists by linearizing triples to
"head relation tail" lines, embedding them, and combining five terms
computed on the query-by-candidate cosine matrix: top-t mean, coverage,
a soft many-to-many mass, a greedy one-to-one matching, and a gated
whole-text similarity. The working set of the fine stage is bounded by
channels * k shortlisted runs, which is asserted on every call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .codebook import Channel, Codebook
from .embedding import EmbeddingProvider, cosine
from .errors import EmptyLines, EmptyRun, InvalidParams
from .segmenter import Run

__all__ = [
    "CoarseWeights",
    "FineParams",
    "FineBreakdown",
    "RankedRun",
    "RetrievalResult",
    "coarse_score",
    "shortlist",
    "run_lines",
    "fine_score",
    "fine_score_matrix",
    "RetrievalEngine",
]


@dataclass(frozen=True)
class CoarseWeights:
    w_ent: float = 0.6
    w_rel: float = 0.4

    def __post_init__(self):
        if self.w_ent < 0 or self.w_rel < 0:
            raise InvalidParams("coarse weights must be non-negative")
        if abs(self.w_ent + self.w_rel - 1.0) > 1e-9:
            raise InvalidParams("coarse weights must sum to 1")


@dataclass(frozen=True)
class FineParams:
    t: int = 3
    tau_cov: float = 0.6
    tau_pair: float = 0.55
    T_pair: float = 0.08
    tau_dist: float = 0.6
    lambda_cov: float = 0.5
    lambda_mp: float = 0.3
    lambda_1to1: float = 0.4
    lambda_whole: float = 0.2
    mp_norm: str = "sqrt"

    def __post_init__(self):
        if self.t < 1:
            raise InvalidParams("t must be >= 1")
        for name in ("tau_cov", "tau_pair", "tau_dist"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidParams(f"{name} must be in [0, 1], got {v}")
        if self.T_pair <= 0:
            raise InvalidParams("T_pair must be > 0")
        for name in ("lambda_cov", "lambda_mp", "lambda_1to1", "lambda_whole"):
            if getattr(self, name) < 0:
                raise InvalidParams(f"{name} must be >= 0")
        if self.mp_norm not in ("sqrt", "log"):
            raise InvalidParams(f"mp_norm must be 'sqrt' or 'log', got {self.mp_norm!r}")


@dataclass(frozen=True)
class FineBreakdown:
    rel_top_t: float
    coverage_raw: float
    coverage: float
    mp: float
    distinct: float
    whole_gate: float

    def as_dict(self) -> Dict[str, float]:
        return {
            "rel_top_t": self.rel_top_t,
            "coverage_raw": self.coverage_raw,
            "coverage": self.coverage,
            "mp": self.mp,
            "distinct": self.distinct,
            "whole_gate": self.whole_gate,
        }


@dataclass
class RankedRun:
    run_id: int
    channel: Channel
    coarse: float
    fine: float
    breakdown: Optional[FineBreakdown] = None


@dataclass
class RetrievalResult:
    ranked: List[RankedRun]
    runs_scanned_coarse: int
    edges_touched_fine: int
    fallback: bool
    query_edges: List[int] = field(default_factory=list)


RunLike = Union[Run, Sequence[int]]


def _edges_of(run: RunLike) -> List[int]:
    return list(run.edges) if isinstance(run, Run) else list(run)


def _symbol_ids(codebook: Codebook, edge_ids: Sequence[int]) -> Tuple[List[int], List[int]]:
    """Unique entity and relation ids over the edges, first appearance first."""
    ents: List[int] = []
    rels: List[int] = []
    seen_e, seen_r = set(), set()
    for eid in edge_ids:
        e = codebook.edge(eid)
        for ent in (e.head, e.tail):
            if ent not in seen_e:
                seen_e.add(ent)
                ents.append(ent)
        if e.relation not in seen_r:
            seen_r.add(e.relation)
            rels.append(e.relation)
    return ents, rels


def coarse_score(codebook: Codebook, query_run: RunLike, candidate_run: RunLike,
                 weights: CoarseWeights = CoarseWeights()) -> float:
    """Best entity-pair cosine and best relation-pair cosine, weighted."""
    q_edges, c_edges = _edges_of(query_run), _edges_of(candidate_run)
    if not q_edges or not c_edges:
        raise EmptyRun("coarse score needs at least one edge on each side")
    q_ents, q_rels = _symbol_ids(codebook, q_edges)
    c_ents, c_rels = _symbol_ids(codebook, c_edges)
    ent_sims = codebook.entity_matrix(q_ents) @ codebook.entity_matrix(c_ents).T
    rel_sims = codebook.relation_matrix(q_rels) @ codebook.relation_matrix(c_rels).T
    best_ent = float(np.clip(ent_sims.max(), -1.0, 1.0))
    best_rel = float(np.clip(rel_sims.max(), -1.0, 1.0))
    return weights.w_ent * best_ent + weights.w_rel * best_rel


def shortlist(codebook: Codebook, query_run: RunLike, candidates: Sequence[Run],
              k: int, weights: CoarseWeights = CoarseWeights()) -> List[Tuple[float, Run]]:
    """Top-k candidates by coarse score, run_id breaking ties."""
    if k < 1:
        raise InvalidParams("k must be >= 1")
    scored = [(coarse_score(codebook, query_run, run, weights), run)
              for run in candidates]
    scored.sort(key=lambda sr: (-sr[0], sr[1].run_id))
    return scored[:k]


def run_lines(codebook: Codebook, run: RunLike) -> List[str]:
    """Triple lines 'h r t' for the run's unique edges, in first appearance order."""
    seen = set()
    lines = []
    for eid in _edges_of(run):
        if eid in seen:
            continue
        seen.add(eid)
        lines.append(codebook.triple_line(eid))
    return lines


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def fine_score_matrix(S: np.ndarray, fulltext_sim: float,
                      params: FineParams = FineParams()) -> Tuple[float, FineBreakdown]:
    """All five fine terms computed on a query-by-candidate cosine matrix."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] < 1 or S.shape[1] < 1:
        raise EmptyLines(f"similarity matrix must be non-empty 2-D, got shape {S.shape}")
    n_q, n_c = S.shape

    flat = np.sort(S.reshape(-1))[::-1]
    rel_top_t = float(flat[:min(params.t, flat.size)].mean())

    coverage_raw = float(np.sum(S.max(axis=1) >= params.tau_cov))
    coverage = coverage_raw / n_q

    soft = _sigmoid((S - params.tau_pair) / params.T_pair)
    denom = math.sqrt(n_q * n_c) if params.mp_norm == "sqrt" else math.log(1 + n_q * n_c)
    mp = float(soft.sum() / denom)

    distinct = _distinct_one_to_one(S, params.tau_dist)

    gate = 1.0 / (1.0 + math.exp(-(fulltext_sim - 0.5) / 0.1))
    whole_gate = gate * fulltext_sim / (1.0 + math.log(1.0 + n_c))

    score = (rel_top_t
             + params.lambda_cov * coverage
             + params.lambda_mp * mp
             + params.lambda_1to1 * distinct
             + params.lambda_whole * whole_gate)
    return score, FineBreakdown(rel_top_t, coverage_raw, coverage, mp, distinct, whole_gate)


def _distinct_one_to_one(S: np.ndarray, tau_dist: float) -> float:
    """Greedy 1:1 matching over entries >= tau_dist, scored as sum / sqrt(m)."""
    n_q, n_c = S.shape
    order = np.argsort(S, axis=None, kind="stable")[::-1]
    used_q, used_c = set(), set()
    picked = []
    for idx in order:
        i, j = divmod(int(idx), n_c)
        val = float(S[i, j])
        if val < tau_dist:
            break
        if i in used_q or j in used_c:
            continue
        used_q.add(i)
        used_c.add(j)
        picked.append(val)
    if not picked:
        return 0.0
    return float(sum(picked) / math.sqrt(len(picked)))


def fine_score(provider: EmbeddingProvider, query_lines: Sequence[str],
               candidate_lines: Sequence[str], candidate_fulltext_sim: float,
               params: FineParams = FineParams()) -> Tuple[float, FineBreakdown]:
    """Embed both line sets and score their cosine matrix."""
    if not query_lines or not candidate_lines:
        raise EmptyLines("fine score needs at least one line on each side")
    Q = provider.embed(list(query_lines))
    C = provider.embed(list(candidate_lines))
    return fine_score_matrix(Q @ C.T, candidate_fulltext_sim, params)


class RetrievalEngine:
    """Shortlist per channel, fine re-rank, merge to a global top-M."""

    def __init__(self, codebook: Codebook, runs: Sequence[Run],
                 provider: Optional[EmbeddingProvider] = None,
                 weights: CoarseWeights = CoarseWeights(),
                 fine_params: FineParams = FineParams()):
        self.codebook = codebook
        self.provider = provider if provider is not None else codebook.provider
        self.weights = weights
        self.fine_params = fine_params
        self.runs: List[Run] = list(runs)
        self.by_channel: Dict[Channel, List[Run]] = {ch: [] for ch in Channel}
        for run in self.runs:
            self.by_channel[run.channel].append(run)
        self._fulltext_cache: Dict[int, np.ndarray] = {}

    def _candidate_text_vec(self, run: Run) -> np.ndarray:
        vec = self._fulltext_cache.get(run.run_id)
        if vec is None:
            vec = self.provider.embed_one(" ".join(run_lines(self.codebook, run)))
            self._fulltext_cache[run.run_id] = vec
        return vec

    def retrieve_edges(self, query_edges: Sequence[int], query_text: str,
                       top_m: int = 8, top_k: int = 16,
                       explain: bool = False) -> RetrievalResult:
        """Rank runs for an already-indexified query."""
        query_edges = list(query_edges)
        if not query_edges:
            return self._fallback(query_text, top_m)
        query_lines = run_lines(self.codebook, query_edges)
        Q = self.provider.embed(query_lines)
        query_text_vec = self.provider.embed_one(query_text)

        runs_scanned = 0
        shortlisted: List[Tuple[float, Run]] = []
        for ch in Channel:
            candidates = self.by_channel[ch]
            runs_scanned += len(candidates)
            if candidates:
                shortlisted.extend(
                    shortlist(self.codebook, query_edges, candidates, top_k, self.weights))

        edges_touched = 0
        ranked: List[RankedRun] = []
        for coarse, run in shortlisted:
            edges_touched += len(run.edges)
            lines = run_lines(self.codebook, run)
            C = self.provider.embed(lines)
            ft_sim = cosine(query_text_vec, self._candidate_text_vec(run))
            fine, breakdown = fine_score_matrix(Q @ C.T, ft_sim, self.fine_params)
            ranked.append(RankedRun(run.run_id, run.channel, coarse, fine,
                                    breakdown if explain else None))

        longest = max((len(run.edges) for _, run in shortlisted), default=0)
        bound = len(Channel) * top_k * longest
        assert edges_touched <= bound, \
            f"fine working set {edges_touched} exceeds bound {bound}"

        ranked.sort(key=lambda r: (-r.fine, r.run_id))
        return RetrievalResult(
            ranked=ranked[:max(top_m, 0)],
            runs_scanned_coarse=runs_scanned,
            edges_touched_fine=edges_touched,
            fallback=False,
            query_edges=query_edges,
        )

    def _fallback(self, query_text: str, top_m: int) -> RetrievalResult:
        """Triple-less query: whole-text cosine against run centroids."""
        qvec = self.provider.embed_one(query_text)
        ranked = [RankedRun(run.run_id, run.channel,
                            cosine(qvec, run.centroid), cosine(qvec, run.centroid))
                  for run in self.runs]
        ranked.sort(key=lambda r: (-r.fine, r.run_id))
        return RetrievalResult(
            ranked=ranked[:max(top_m, 0)],
            runs_scanned_coarse=len(self.runs),
            edges_touched_fine=0,
            fallback=True,
            query_edges=[],
        )

    def retrieve(self, query_text: str, extractor, top_m: int = 8, top_k: int = 16,
                 explain: bool = False, span_id: str = "query") -> RetrievalResult:
        """Extract the query's triples, index them, and rank runs."""
        triples = extractor.extract(query_text)
        if not triples:
            return self._fallback(query_text, top_m)
        seq = self.codebook.indexify((t.as_tuple() for t in triples),
                                     Channel.QUESTION, span_id)
        return self.retrieve_edges(seq.edges, query_text, top_m, top_k, explain)
