"""Workspace lifecycle and the end-to-end query pipeline.

A workspace is a directory: apr.toml (config), the persisted codebook
and channel stores, segmented runs with their centroids, an append-only
trace log, a codebook growth log, and consolidation reports. Commands
that mutate state take a lock file; queries, stats, and reports work on
in-memory snapshots and never rewrite persisted state.

The pipeline glues the modules together: ingest extracts and interns
triples, segments them into runs, and triggers consolidation when the
budget says so; answer_query retrieves, selects, packs, and appends a
trace with per-stage timings and counters.
"""

from __future__ import annotations

import json
import math
import os
import statistics
import struct
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import tomli

from .codebook import VECTORS_MAGIC, Channel, Codebook
from .consolidate import (
    ConsolidationBudget,
    ConsolidationReport,
    consolidate,
    should_consolidate,
)
from .embedding import EmbeddingProvider, ProviderConfig, make_provider
from .errors import AprError, InvalidParams, IoError, WorkspaceError
from .extract import DEFAULT_VERBS, PatternExtractor, RemoteExtractor
from .packer import PackResult, build_payload, count_tokens, pack
from .policy import PolicyParams, QueryFeatures, select_action
from .retrieval import CoarseWeights, FineParams, RetrievalEngine
from .segmenter import Run, SegmenterParams, refine_boundaries, segment
from .selector import SelectorAction, SelectorConfig, apply_selection

__all__ = [
    "WorkspaceConfig",
    "Workspace",
    "IngestReport",
    "QueryTrace",
    "CONFIG_NAME",
]

CONFIG_NAME = "apr.toml"
LOCK_NAME = ".lock"


@dataclass
class WorkspaceConfig:
    seed: int = 0
    tokenizer: str = "ws_punct"
    token_budget: int = 4096
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    extractor_kind: str = "pattern"
    extractor_endpoint: Optional[str] = None
    verbs: Tuple[str, ...] = DEFAULT_VERBS
    segmenter: SegmenterParams = field(default_factory=SegmenterParams)
    coarse: CoarseWeights = field(default_factory=CoarseWeights)
    fine: FineParams = field(default_factory=FineParams)
    top_k: int = 16
    top_m: int = 8
    selector: Dict[str, str] = field(default_factory=lambda: {
        ch.value: SelectorAction.UNIQUE.value for ch in Channel})
    cluster_threshold: float = 0.92
    policy_path: Optional[str] = None
    budget: ConsolidationBudget = field(default_factory=ConsolidationBudget)

    def __post_init__(self):
        if self.extractor_kind not in ("pattern", "remote"):
            raise InvalidParams(f"unknown extractor kind: {self.extractor_kind!r}")
        if self.top_k < 1 or self.top_m < 0:
            raise InvalidParams("top_k must be >= 1 and top_m >= 0")
        for ch in Channel:
            SelectorAction.parse(self.selector.get(ch.value, "unique"))

    def selector_config(self) -> SelectorConfig:
        return SelectorConfig(
            actions={ch: SelectorAction.parse(self.selector.get(ch.value, "unique"))
                     for ch in Channel},
            cluster_threshold=self.cluster_threshold,
        )

    def to_toml(self) -> str:
        lines = ["v = 1", f"seed = {self.seed}", f"tokenizer = {_toml_str(self.tokenizer)}",
                 f"token_budget = {self.token_budget}", ""]
        lines.append("[provider]")
        lines.append(f"kind = {_toml_str(self.provider.kind)}")
        lines.append(f"dimension = {self.provider.dimension}")
        lines.append(f"seed = {self.provider.seed}")
        if self.provider.fixture_path:
            lines.append(f"fixture_path = {_toml_str(self.provider.fixture_path)}")
        if self.provider.endpoint:
            lines.append(f"endpoint = {_toml_str(self.provider.endpoint)}")
        if self.provider.auth_env:
            lines.append(f"auth_env = {_toml_str(self.provider.auth_env)}")
        lines.append("")
        lines.append("[extractor]")
        lines.append(f"kind = {_toml_str(self.extractor_kind)}")
        if self.extractor_endpoint:
            lines.append(f"endpoint = {_toml_str(self.extractor_endpoint)}")
        if tuple(self.verbs) != DEFAULT_VERBS:
            verbs = ", ".join(_toml_str(v) for v in self.verbs)
            lines.append(f"verbs = [{verbs}]")
        lines.append("")
        lines.append("[segmenter]")
        lines.append(f"tau = {self.segmenter.tau}")
        lines.append(f"bonus_b = {self.segmenter.bonus_b}")
        lines.append(f"window_w = {self.segmenter.window_w}")
        lines.append("")
        lines.append("[retrieval]")
        lines.append(f"w_ent = {self.coarse.w_ent}")
        lines.append(f"w_rel = {self.coarse.w_rel}")
        lines.append(f"top_k = {self.top_k}")
        lines.append(f"top_m = {self.top_m}")
        lines.append(f"t = {self.fine.t}")
        lines.append(f"tau_cov = {self.fine.tau_cov}")
        lines.append(f"tau_pair = {self.fine.tau_pair}")
        lines.append(f"t_pair = {self.fine.T_pair}")
        lines.append(f"tau_dist = {self.fine.tau_dist}")
        lines.append(f"lambda_cov = {self.fine.lambda_cov}")
        lines.append(f"lambda_mp = {self.fine.lambda_mp}")
        lines.append(f"lambda_1to1 = {self.fine.lambda_1to1}")
        lines.append(f"lambda_whole = {self.fine.lambda_whole}")
        lines.append(f"mp_norm = {_toml_str(self.fine.mp_norm)}")
        lines.append("")
        lines.append("[selector]")
        for ch in Channel:
            lines.append(f"{ch.value} = {_toml_str(self.selector[ch.value])}")
        lines.append(f"cluster_threshold = {self.cluster_threshold}")
        if self.policy_path:
            lines.append(f"policy_path = {_toml_str(self.policy_path)}")
        lines.append("")
        lines.append("[budget]")
        lines.append(f"max_entities = {self.budget.max_entities}")
        lines.append(f"max_workspace_bytes = {self.budget.max_workspace_bytes}")
        lines.append(f"knn_k = {self.budget.knn_k}")
        lines.append(f"tau_e = {self.budget.tau_e}")
        lines.append(f"kmeans_k_fraction = {self.budget.kmeans_k_fraction}")
        lines.append(f"kmeans_max_iters = {self.budget.kmeans_max_iters}")
        lines.append(f"seed = {self.budget.seed}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_toml(cls, text: str) -> "WorkspaceConfig":
        try:
            doc = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise WorkspaceError(f"bad {CONFIG_NAME}: {exc}") from exc
        prov = doc.get("provider", {})
        seg = doc.get("segmenter", {})
        ret = doc.get("retrieval", {})
        sel = doc.get("selector", {})
        bud = doc.get("budget", {})
        ext = doc.get("extractor", {})
        try:
            return cls(
                seed=int(doc.get("seed", 0)),
                tokenizer=str(doc.get("tokenizer", "ws_punct")),
                token_budget=int(doc.get("token_budget", 4096)),
                provider=ProviderConfig(
                    kind=str(prov.get("kind", "hashing")),
                    dimension=int(prov.get("dimension", 64)),
                    seed=int(prov.get("seed", 0)),
                    fixture_path=prov.get("fixture_path"),
                    endpoint=prov.get("endpoint"),
                    auth_env=prov.get("auth_env"),
                ),
                extractor_kind=str(ext.get("kind", "pattern")),
                extractor_endpoint=ext.get("endpoint"),
                verbs=tuple(ext.get("verbs", DEFAULT_VERBS)),
                segmenter=SegmenterParams(
                    tau=float(seg.get("tau", 0.55)),
                    bonus_b=float(seg.get("bonus_b", 0.15)),
                    window_w=int(seg.get("window_w", 4)),
                ),
                coarse=CoarseWeights(
                    w_ent=float(ret.get("w_ent", 0.6)),
                    w_rel=float(ret.get("w_rel", 0.4)),
                ),
                fine=FineParams(
                    t=int(ret.get("t", 3)),
                    tau_cov=float(ret.get("tau_cov", 0.6)),
                    tau_pair=float(ret.get("tau_pair", 0.55)),
                    T_pair=float(ret.get("t_pair", 0.08)),
                    tau_dist=float(ret.get("tau_dist", 0.6)),
                    lambda_cov=float(ret.get("lambda_cov", 0.5)),
                    lambda_mp=float(ret.get("lambda_mp", 0.3)),
                    lambda_1to1=float(ret.get("lambda_1to1", 0.4)),
                    lambda_whole=float(ret.get("lambda_whole", 0.2)),
                    mp_norm=str(ret.get("mp_norm", "sqrt")),
                ),
                top_k=int(ret.get("top_k", 16)),
                top_m=int(ret.get("top_m", 8)),
                selector={ch.value: str(sel.get(ch.value, "unique")) for ch in Channel},
                cluster_threshold=float(sel.get("cluster_threshold", 0.92)),
                policy_path=sel.get("policy_path"),
                budget=ConsolidationBudget(
                    max_entities=int(bud.get("max_entities", 50_000)),
                    max_workspace_bytes=int(bud.get("max_workspace_bytes",
                                                    256 * 1024 * 1024)),
                    knn_k=int(bud.get("knn_k", 8)),
                    tau_e=float(bud.get("tau_e", 0.93)),
                    kmeans_k_fraction=float(bud.get("kmeans_k_fraction", 0.25)),
                    kmeans_max_iters=int(bud.get("kmeans_max_iters", 25)),
                    seed=int(bud.get("seed", 0)),
                ),
            )
        except (TypeError, ValueError) as exc:
            raise WorkspaceError(f"bad value in {CONFIG_NAME}: {exc}") from exc


def _toml_str(s: str) -> str:
    return json.dumps(s, ensure_ascii=False)


@dataclass
class IngestReport:
    files: int = 0
    spans: int = 0
    triples: int = 0
    new_entities: int = 0
    new_relations: int = 0
    new_edges: int = 0
    runs_created: int = 0
    consolidations: int = 0

    def as_json(self) -> Dict[str, object]:
        return {"v": 1, "files": self.files, "spans": self.spans,
                "triples": self.triples, "new_entities": self.new_entities,
                "new_relations": self.new_relations, "new_edges": self.new_edges,
                "runs_created": self.runs_created,
                "consolidations": self.consolidations}


@dataclass
class QueryTrace:
    query_id: str
    timings: Dict[str, float]
    runs_scanned_coarse: int
    edges_touched_fine: int
    token_counts: Dict[str, int]
    chosen_encoding: str
    actions: Dict[str, str]
    fallback: bool

    def as_json(self) -> Dict[str, object]:
        return {"v": 1, "query_id": self.query_id, "timings": self.timings,
                "runs_scanned_coarse": self.runs_scanned_coarse,
                "edges_touched_fine": self.edges_touched_fine,
                "token_counts": self.token_counts,
                "chosen_encoding": self.chosen_encoding,
                "actions": self.actions, "fallback": self.fallback}


class Workspace:
    def __init__(self, directory: str, config: WorkspaceConfig,
                 codebook: Codebook, runs: List[Run], next_run_id: int = 0,
                 query_counter: int = 0):
        self.directory = directory
        self.config = config
        self.codebook = codebook
        self.runs = runs
        self.next_run_id = next_run_id
        self.query_counter = query_counter
        self.policy: Optional[PolicyParams] = None
        if config.policy_path:
            self.policy = PolicyParams.load(self._resolve(config.policy_path))

    # --- lifecycle -----------------------------------------------------

    @classmethod
    def create(cls, directory: str, config: WorkspaceConfig) -> "Workspace":
        cfg_path = os.path.join(directory, CONFIG_NAME)
        if os.path.exists(cfg_path):
            raise WorkspaceError(f"workspace already initialized: {cfg_path}")
        try:
            os.makedirs(directory, exist_ok=True)
            with open(cfg_path, "w", encoding="utf-8") as fh:
                fh.write(config.to_toml())
        except OSError as exc:
            raise IoError(f"cannot create workspace at {directory}: {exc}") from exc
        provider = make_provider(config.provider)
        ws = cls(directory, config, Codebook(provider), [], 0, 0)
        ws.save()
        return ws

    @classmethod
    def load(cls, directory: str) -> "Workspace":
        cfg_path = os.path.join(directory, CONFIG_NAME)
        if not os.path.exists(cfg_path):
            raise WorkspaceError(f"not a workspace (no {CONFIG_NAME}): {directory}")
        try:
            with open(cfg_path, "r", encoding="utf-8") as fh:
                config = WorkspaceConfig.from_toml(fh.read())
        except OSError as exc:
            raise IoError(f"cannot read {cfg_path}: {exc}") from exc
        if config.provider.kind == "fixture" and config.provider.fixture_path and \
                not os.path.exists(os.path.join(directory, config.provider.fixture_path)) and \
                not os.path.exists(config.provider.fixture_path):
            raise WorkspaceError(f"fixture file missing: {config.provider.fixture_path}")
        provider = make_provider(_resolve_provider(config.provider, directory))
        codebook = Codebook.load(directory, provider) if \
            os.path.exists(os.path.join(directory, "codebook.json")) else Codebook(provider)
        runs = _load_runs(directory, codebook)
        next_run_id = max((r.run_id for r in runs), default=-1) + 1
        query_counter = _count_lines(os.path.join(directory, "traces.jsonl"))
        return cls(directory, config, codebook, runs, next_run_id, query_counter)

    def save(self):
        self.codebook.save(self.directory)
        _save_runs(self.directory, self.runs, self.codebook.dimension)

    def _resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.directory, path)

    @contextmanager
    def lock(self):
        path = os.path.join(self.directory, LOCK_NAME)
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise WorkspaceError(
                f"workspace is locked by another writer: {path}") from None
        except OSError as exc:
            raise IoError(f"cannot acquire lock {path}: {exc}") from exc
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield
        finally:
            try:
                os.remove(path)
            except OSError:
                pass

    # --- helpers -----------------------------------------------------

    def _extractor(self):
        if self.config.extractor_kind == "remote":
            return RemoteExtractor(self.config.extractor_endpoint or "")
        return PatternExtractor(self.config.verbs)

    def _engine(self) -> RetrievalEngine:
        return RetrievalEngine(self.codebook, self.runs,
                               weights=self.config.coarse,
                               fine_params=self.config.fine)

    def runs_by_id(self) -> Dict[int, Run]:
        return {r.run_id: r for r in self.runs}

    def workspace_bytes(self) -> int:
        return self.codebook.approx_bytes() + \
            sum(len(r.edges) * 8 + r.centroid.nbytes for r in self.runs)

    def _append_jsonl(self, name: str, doc: Dict[str, object]):
        path = os.path.join(self.directory, name)
        try:
            with open(path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(doc, ensure_ascii=False) + "\n")
        except OSError as exc:
            raise IoError(f"cannot append to {path}: {exc}") from exc

    def _log_growth(self, event: str):
        stats = self.codebook.stats()
        self._append_jsonl("growth.jsonl", {
            "v": 1, "event": event, "entities": stats.n_entities,
            "relations": stats.n_relations, "edges": stats.n_edges,
            "ts": time.time()})

    # --- pipeline -----------------------------------------------------

    def ingest(self, paths: Sequence[str], channel: Channel) -> IngestReport:
        extractor = self._extractor()
        report = IngestReport()
        with self.lock():
            before = self.codebook.stats()
            for path in paths:
                try:
                    with open(path, "r", encoding="utf-8") as fh:
                        text = fh.read()
                except OSError as exc:
                    raise IoError(f"cannot read {path}: {exc}") from exc
                report.files += 1
                if not text.strip():
                    continue
                try:
                    triples = extractor.extract(text)
                except AprError as exc:
                    raise type(exc)(f"{path}: {exc}") from exc
                if not triples:
                    continue
                span_id = f"{os.path.basename(path)}#{report.spans}"
                seq = self.codebook.indexify((t.as_tuple() for t in triples),
                                             channel, span_id)
                report.spans += 1
                report.triples += len(triples)
                runs = segment(self.codebook, seq.edges, channel,
                               self.config.segmenter, start_id=self.next_run_id)
                runs = refine_boundaries(self.codebook, runs, self.config.segmenter)
                self.next_run_id = max((r.run_id for r in runs),
                                       default=self.next_run_id - 1) + 1
                self.runs.extend(runs)
                report.runs_created += len(runs)
            after = self.codebook.stats()
            report.new_entities = after.n_entities - before.n_entities
            report.new_relations = after.n_relations - before.n_relations
            report.new_edges = after.n_edges - before.n_edges
            self._log_growth("ingest")
            if should_consolidate(after, self.workspace_bytes(), self.config.budget):
                self._consolidate_locked()
                report.consolidations += 1
            self.save()
        return report

    def _consolidate_locked(self) -> ConsolidationReport:
        new_cb, report = consolidate(self.codebook, self.config.budget)
        self.runs = _remap_runs(self.runs, report.edge_id_map, new_cb)
        self.codebook = new_cb
        self._log_growth("consolidate")
        cons_dir = os.path.join(self.directory, "consolidations")
        os.makedirs(cons_dir, exist_ok=True)
        stamp = report.timestamp.replace(":", "-").replace("+", "Z")
        path = os.path.join(cons_dir, f"{stamp}.json")
        try:
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(report.as_json(), fh, ensure_ascii=False)
        except OSError as exc:
            raise IoError(f"cannot write consolidation report {path}: {exc}") from exc
        return report

    def run_consolidation(self, force: bool = False) -> Optional[ConsolidationReport]:
        with self.lock():
            stats = self.codebook.stats()
            if not force and not should_consolidate(stats, self.workspace_bytes(),
                                                    self.config.budget):
                return None
            report = self._consolidate_locked()
            self.save()
        return report

    def _policy_features(self, text: str, triples, ranked_by_channel) -> QueryFeatures:
        redundancy = {}
        for ch, ranked in ranked_by_channel.items():
            centroids = [self.runs_by_id()[r.run_id].centroid for r in ranked]
            if len(centroids) >= 2:
                mat = np.stack(centroids).astype(np.float64)
                mat = mat / np.linalg.norm(mat, axis=1, keepdims=True)
                sims = mat @ mat.T
                redundancy[ch.value] = float(
                    sims[np.triu_indices(len(centroids), k=1)].mean())
            else:
                redundancy[ch.value] = 0.0
        ambiguity = 1.0
        if len(triples) >= 2:
            lines = [f"{t.head} {t.relation} {t.tail}" for t in triples]
            mat = self.codebook.provider.embed(lines).astype(np.float64)
            sims = mat @ mat.T
            ambiguity = float(sims[np.triu_indices(len(lines), k=1)].mean())
        return QueryFeatures(
            query_tokens=count_tokens(text, self.config.tokenizer).count,
            triple_count=len(triples),
            ambiguity=ambiguity,
            token_budget=self.config.token_budget,
            redundancy=redundancy,
            model_id="default",
        )

    def answer_query(self, text: str, select: Optional[SelectorConfig] = None,
                     top_m: Optional[int] = None, top_k: Optional[int] = None
                     ) -> Tuple[PackResult, QueryTrace]:
        """Retrieve, select, and pack; appends a trace, persists nothing else."""
        top_m = self.config.top_m if top_m is None else top_m
        top_k = self.config.top_k if top_k is None else top_k
        query_id = f"q{self.query_counter:06d}"
        self.query_counter += 1
        timings: Dict[str, float] = {}

        t0 = time.perf_counter()
        triples = self._extractor().extract(text)
        timings["extract"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        engine = self._engine()
        if triples:
            seq = self.codebook.indexify((t.as_tuple() for t in triples),
                                         Channel.QUESTION, f"query:{query_id}")
            result = engine.retrieve_edges(seq.edges, text, top_m, top_k, explain=True)
        else:
            result = engine.retrieve_edges([], text, top_m, top_k)
        timings["retrieve"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        ranked_by_channel = {ch: [r for r in result.ranked if r.channel is ch]
                             for ch in Channel}
        if select is not None:
            config = select
        elif self.policy is not None:
            features = self._policy_features(text, triples, ranked_by_channel)
            action = select_action(features, self.policy)
            config = SelectorConfig(
                actions={Channel.QUESTION: action[0], Channel.ANSWER: action[1],
                         Channel.FACT: action[2]},
                cluster_threshold=self.config.cluster_threshold)
        else:
            config = self.config.selector_config()
        selected_ranked = apply_selection(ranked_by_channel, self.runs_by_id(), config)
        timings["select"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        by_id = self.runs_by_id()
        selected_runs = {ch: [by_id[r.run_id] for r in selected_ranked[ch]]
                         for ch in Channel}
        payload = build_payload(self.codebook, result.query_edges, selected_runs)
        packed = pack(payload, self.config.tokenizer)
        timings["pack"] = time.perf_counter() - t0

        trace = QueryTrace(
            query_id=query_id,
            timings=timings,
            runs_scanned_coarse=result.runs_scanned_coarse,
            edges_touched_fine=result.edges_touched_fine,
            token_counts={enc.value: tc.count for enc, tc in packed.counts.items()},
            chosen_encoding=packed.encoding.value,
            actions={ch.value: config.actions[ch].value for ch in Channel},
            fallback=result.fallback,
        )
        self._append_jsonl("traces.jsonl", trace.as_json())
        return packed, trace

    # --- reporting -----------------------------------------------------

    def stats(self) -> Dict[str, object]:
        s = self.codebook.stats()
        return {
            "v": 1,
            "entities": s.n_entities,
            "relations": s.n_relations,
            "edges": s.n_edges,
            "sequences": s.sequences,
            "occurrences": s.occurrences,
            "total_occurrences": s.total_occurrences,
            "compression_ratio": s.compression_ratio,
            "runs": len(self.runs),
            "workspace_bytes": self.workspace_bytes(),
        }

    def efficiency_report(self) -> Dict[str, object]:
        traces = _read_jsonl(os.path.join(self.directory, "traces.jsonl"))
        if not traces:
            raise WorkspaceError("no traces recorded yet")
        chosen = [t["token_counts"][t["chosen_encoding"]] for t in traces]
        latencies = [sum(t["timings"].values()) for t in traces]
        histogram: Dict[str, int] = {}
        for t in traces:
            histogram[t["chosen_encoding"]] = histogram.get(t["chosen_encoding"], 0) + 1
        growth = _read_jsonl(os.path.join(self.directory, "growth.jsonl"))
        series = [{"event": g["event"], "entities": g["entities"], "edges": g["edges"]}
                  for g in growth]
        plateaus = []
        for i in range(1, len(series)):
            if series[i]["event"] == "consolidate":
                plateaus.append({
                    "index": i,
                    "entities_before": series[i - 1]["entities"],
                    "entities_after": series[i]["entities"],
                    "non_increasing": series[i]["entities"] <= series[i - 1]["entities"],
                })
        return {
            "v": 1,
            "queries": len(traces),
            "mean_input_tokens": statistics.fmean(chosen),
            "median_input_tokens": statistics.median(chosen),
            "mean_latency_seconds": statistics.fmean(latencies),
            "encoding_histogram": histogram,
            "growth": series,
            "consolidation_steps": plateaus,
        }


def _resolve_provider(config: ProviderConfig, directory: str) -> ProviderConfig:
    if config.kind == "fixture" and config.fixture_path and \
            not os.path.isabs(config.fixture_path):
        local = os.path.join(directory, config.fixture_path)
        if os.path.exists(local):
            return ProviderConfig(
                kind=config.kind, dimension=config.dimension, seed=config.seed,
                fixture_path=local, endpoint=config.endpoint,
                auth_env=config.auth_env, batch_size=config.batch_size,
                timeout=config.timeout, max_retries=config.max_retries)
    return config


def _remap_runs(runs: Sequence[Run], edge_id_map: Dict[int, int],
                codebook: Codebook) -> List[Run]:
    """Rewrite run edges through the quotient and refresh their geometry."""
    from .segmenter import mean_pairwise_cosine, triple_vector

    out = []
    for run in runs:
        seen = set()
        edges = []
        for eid in run.edges:
            new_id = edge_id_map[eid]
            if new_id not in seen:
                seen.add(new_id)
                edges.append(new_id)
        vecs = [triple_vector(codebook, eid) for eid in edges]
        centroid = np.mean(np.stack(vecs).astype(np.float64), axis=0)
        norm = np.linalg.norm(centroid)
        centroid = (centroid / norm if norm > 0 else vecs[0]).astype(np.float32)
        out.append(Run(run_id=run.run_id, channel=run.channel, edges=edges,
                       centroid=centroid, cohesion=mean_pairwise_cosine(vecs)))
    return out


def _save_runs(directory: str, runs: Sequence[Run], dimension: int):
    runs_dir = os.path.join(directory, "runs")
    try:
        os.makedirs(runs_dir, exist_ok=True)
        by_channel: Dict[Channel, List[Run]] = {ch: [] for ch in Channel}
        for run in runs:
            by_channel[run.channel].append(run)
        for ch in Channel:
            path = os.path.join(runs_dir, f"{ch.value}.jsonl")
            with open(path, "w", encoding="utf-8") as fh:
                for run in by_channel[ch]:
                    fh.write(json.dumps({"id": run.run_id, "edges": run.edges,
                                         "cohesion": run.cohesion}) + "\n")
        ordered = sorted(runs, key=lambda r: r.run_id)
        with open(os.path.join(runs_dir, "vectors.bin"), "wb") as fh:
            fh.write(VECTORS_MAGIC)
            fh.write(struct.pack("<III", len(ordered), dimension, 0))
            if ordered:
                fh.write(np.stack([r.centroid for r in ordered])
                         .astype("<f4").tobytes(order="C"))
    except OSError as exc:
        raise IoError(f"cannot save runs to {runs_dir}: {exc}") from exc


def _load_runs(directory: str, codebook: Codebook) -> List[Run]:
    runs_dir = os.path.join(directory, "runs")
    if not os.path.isdir(runs_dir):
        return []
    records: List[Tuple[int, Channel, List[int], float]] = []
    for ch in Channel:
        path = os.path.join(runs_dir, f"{ch.value}.jsonl")
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
                    records.append((int(rec["id"]), ch,
                                    [int(e) for e in rec["edges"]],
                                    float(rec["cohesion"])))
        except OSError as exc:
            raise IoError(f"cannot read {path}: {exc}") from exc
    vec_path = os.path.join(runs_dir, "vectors.bin")
    try:
        with open(vec_path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {vec_path}: {exc}") from exc
    if len(blob) < 16 or blob[:4] != VECTORS_MAGIC:
        raise IoError(f"{vec_path}: bad magic or truncated header")
    count, dim, _ = struct.unpack("<III", blob[4:16])
    if count != len(records):
        raise IoError(f"{vec_path}: {count} centroids for {len(records)} runs")
    if dim != codebook.dimension:
        raise IoError(f"{vec_path}: dimension {dim} != codebook {codebook.dimension}")
    body = np.frombuffer(blob[16:], dtype="<f4")
    if body.size != count * dim:
        raise IoError(f"{vec_path}: truncated payload")
    mat = body.reshape(count, dim).astype(np.float32) if count else \
        np.zeros((0, dim), dtype=np.float32)
    records.sort(key=lambda r: r[0])
    runs = []
    for row, (run_id, ch, edges, cohesion) in enumerate(records):
        for eid in edges:
            codebook.edge(eid)
        runs.append(Run(run_id=run_id, channel=ch, edges=edges,
                        centroid=mat[row].copy(), cohesion=cohesion))
    return runs


def _count_lines(path: str) -> int:
    if not os.path.exists(path):
        return 0
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return sum(1 for line in fh if line.strip())
    except OSError:
        return 0


def _read_jsonl(path: str) -> List[Dict[str, object]]:
    if not os.path.exists(path):
        return []
    out = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise IoError(f"{path}:{line_no}: bad JSON: {exc}") from exc
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return out
