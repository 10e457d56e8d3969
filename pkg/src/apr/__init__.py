"""Symbolic graph retrieval: interned triples, coherent runs, compact prompts.

Text is extracted into entity-relation triples, interned into a shared
codebook of dense ids, segmented into locally coherent runs, retrieved
coarse-to-fine, deduplicated by a per-channel selector, and packed into
the cheapest of three equivalent wire encodings. Entity aliases are
consolidated under a budget, and the selector's per-channel actions can
be chosen by a preference-trained policy.
"""

from .codebook import Channel, Codebook, Edge, EdgeSequence
from .embedding import (
    FixtureProvider,
    HashingProvider,
    ProviderConfig,
    RemoteProvider,
    cosine,
    make_provider,
)
from .errors import AprError
from .extract import PatternExtractor, RawTriple, RemoteExtractor
from .packer import Encoding, PromptPayload, build_payload, pack, parse_prompt, render
from .retrieval import CoarseWeights, FineParams, RetrievalEngine
from .segmenter import Run, SegmenterParams, refine_boundaries, segment
from .selector import SelectorAction, SelectorConfig, apply_selection
from .workspace import Workspace, WorkspaceConfig

__version__ = "0.1.0"

__all__ = [
    "AprError",
    "Channel",
    "Codebook",
    "CoarseWeights",
    "Edge",
    "EdgeSequence",
    "Encoding",
    "FineParams",
    "FixtureProvider",
    "HashingProvider",
    "PatternExtractor",
    "PromptPayload",
    "ProviderConfig",
    "RawTriple",
    "RemoteExtractor",
    "RemoteProvider",
    "RetrievalEngine",
    "Run",
    "SegmenterParams",
    "SelectorAction",
    "SelectorConfig",
    "Workspace",
    "WorkspaceConfig",
    "apply_selection",
    "build_payload",
    "cosine",
    "make_provider",
    "pack",
    "parse_prompt",
    "refine_boundaries",
    "render",
    "segment",
    "__version__",
]
