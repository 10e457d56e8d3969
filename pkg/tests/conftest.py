"""Shared fixtures: deterministic providers and the worked micro-corpus.

The micro-corpus is the four-triple scenario whose packed form is pinned
in the format tests: interning order is chosen so that the entity table
comes out [AlphaCorp, BetaLtd, EUReg2024_12, 2021+] and the relation
table [acquired_in, exposed_to, subject_to].
"""

from __future__ import annotations

import numpy as np
import pytest

from apr.codebook import Channel, Codebook
from apr.embedding import FixtureProvider, HashingProvider

T1 = ("AlphaCorp", "acquired_in", "BetaLtd")
T2 = ("BetaLtd", "exposed_to", "EUReg2024_12")
T3 = ("AlphaCorp", "subject_to", "EUReg2024_12")
T4 = ("AlphaCorp", "acquired_in", "2021+")

MICRO_FACTS = (T1, T2, T3, T4)
Q1_TRIPLES = (T4, T2)
Q1_FACT_SELECTION = (T4, T3)

EXPECTED_E = ["AlphaCorp", "BetaLtd", "EUReg2024_12", "2021+"]
EXPECTED_R = ["acquired_in", "exposed_to", "subject_to"]
EXPECTED_EDGE_MATRIX = [[0, 0, 3], [1, 1, 2], [0, 2, 2]]
EXPECTED_Q_WORDS = [["AlphaCorp", "acquired_in", "2021+"],
                    ["BetaLtd", "exposed_to", "EUReg2024_12"]]
EXPECTED_F_WORDS = [["AlphaCorp", "acquired_in", "2021+"],
                    ["AlphaCorp", "subject_to", "EUReg2024_12"]]


@pytest.fixture
def hashing_provider():
    return HashingProvider(dimension=64, seed=0)


def one_hot_provider(names, dimension=None):
    """Fixture provider assigning orthogonal unit vectors in name order."""
    dimension = dimension or max(len(names), 2)
    table = {}
    for i, name in enumerate(names):
        vec = np.zeros(dimension)
        vec[i] = 1.0
        table[name] = vec.tolist()
    return FixtureProvider(vectors=table)


def make_micro_codebook(provider=None):
    """Codebook holding the worked example; returns (codebook, q1_edges)."""
    cb = Codebook(provider or HashingProvider(dimension=64, seed=0))
    cb.indexify(MICRO_FACTS, Channel.FACT, "facts#0")
    q1 = cb.indexify(Q1_TRIPLES, Channel.QUESTION, "q1")
    return cb, q1.edges


@pytest.fixture
def micro_codebook():
    return make_micro_codebook()


def angles_provider(names, degrees, dimension=8):
    """Planar unit vectors at the given angles, padded to `dimension`."""
    table = {}
    for name, deg in zip(names, degrees):
        rad = np.deg2rad(deg)
        vec = np.zeros(dimension)
        vec[0], vec[1] = np.cos(rad), np.sin(rad)
        table[name] = vec.tolist()
    return FixtureProvider(vectors=table)


def blob_stream(seed, n_topics=4, runs_per_topic=None, edges_per_run=(3, 8),
                noise=0.12, dimension=32):
    """Topic-structured edge stream for segmentation tests.

    Entities and relations of one topic sit in a tight cone around the
    topic direction, topics are mutually near-orthogonal (random
    high-dimensional directions), and the stream visits topics in
    blocks. Returns (codebook, edge_ids, block_lengths).
    """
    rng = np.random.default_rng(seed)
    topics = rng.normal(size=(n_topics, dimension))
    topics /= np.linalg.norm(topics, axis=1, keepdims=True)

    table = {}

    def near(topic_idx, name):
        vec = topics[topic_idx] + noise * rng.normal(size=dimension)
        table[name] = (vec / np.linalg.norm(vec)).tolist()
        return name

    blocks = []
    triples = []
    for t in range(n_topics):
        n_edges = int(rng.integers(edges_per_run[0], edges_per_run[1] + 1))
        rel = near(t, f"rel_{t}")
        prev = near(t, f"ent_{t}_0")
        block = 0
        for i in range(n_edges):
            nxt = near(t, f"ent_{t}_{i + 1}")
            triples.append((prev, rel, nxt))
            prev = nxt
            block += 1
        blocks.append(block)

    provider = FixtureProvider(vectors=table)
    cb = Codebook(provider)
    seq = cb.indexify(triples, Channel.FACT, f"stream:{seed}")
    return cb, seq.edges, blocks


def random_codebook(seed, n_entities=20, n_relations=6, n_edges=30,
                    n_sequences=6, dimension=16):
    """Random codebook with hashing vectors for quotient/retrieval tests."""
    rng = np.random.default_rng(seed)
    provider = HashingProvider(dimension=dimension, seed=seed)
    cb = Codebook(provider)
    entities = [f"entity_{seed}_{i}" for i in range(n_entities)]
    relations = [f"rel_{seed}_{j}" for j in range(n_relations)]
    for e in entities:
        cb.intern_entity(e)
    for r in relations:
        cb.intern_relation(r)
    edge_ids = []
    for _ in range(n_edges):
        h, t = rng.integers(0, n_entities, size=2)
        r = int(rng.integers(0, n_relations))
        edge_ids.append(cb.intern_edge(int(h), r, int(t)))
    for s in range(n_sequences):
        length = int(rng.integers(1, 9))
        chosen = [edge_ids[int(i)] for i in rng.integers(0, len(edge_ids), size=length)]
        ch = list(Channel)[s % 3]
        seq = cb.stores[ch]
        from apr.codebook import EdgeSequence
        seq.append(EdgeSequence(ch, chosen, f"seq:{seed}:{s}"))
    return cb
