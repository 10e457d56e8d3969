"""Prompt payload assembly and wire encodings.

A payload is the minimal symbolic state a model needs: the entity and
relation vocabularies actually used (E', R'), the question / knowledge /
fact triples as local indices into those vocabularies, and a rules
header describing the schema. Three encodings render the same payload:

- edge_matrix: vocabularies plus a unique-triple matrix, channels
  reference matrix rows by index. Cheapest when triples repeat across
  channels.
- id_triples: vocabularies plus explicit [h, r, t] index triples per
  channel.
- word_triples: surface-form triples, no vocabularies. Cheapest for
  one-off payloads with little symbol reuse.

`pack` renders all three, counts tokens, and returns the cheapest.
Channel keys follow the knowledge-base wire format exactly, including
the parenthesized key names; the published format shows bare unquoted
words inside arrays, so the parser accepts both bare and quoted forms
while the renderer always emits strict JSON.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .codebook import Channel, Codebook
from .errors import DanglingId, MalformedPrompt
from .segmenter import Run

__all__ = [
    "Encoding",
    "PromptPayload",
    "TokenCount",
    "PackResult",
    "build_payload",
    "render",
    "parse_prompt",
    "count_tokens",
    "register_tokenizer",
    "pack",
    "RULES_EDGE_MATRIX",
    "RULES_ID_TRIPLES",
    "RULES_WORD_TRIPLES",
]

RULES_EDGE_MATRIX = """---Knowledge Base---
[JSON format]
- e: list of entities (e[i] = entity string)
- r: list of relations (r[j] = relation string)
- edge_matrix: [[head_e_idx, r_idx, tail_e_idx]]
    * NOTE: edges[i] is just shorthand for edge_matrix[i]
- questions(edges[i]): questions linked by edge i
- given knowledge(edges[i]): prior answers linked by edge i
- facts(edges[i]): facts linked by edge i"""

RULES_ID_TRIPLES = """---Knowledge Base---
[JSON format]
- e: list of entities (e[i] = entity string)
- r: list of relations (r[j] = relation string)
- [e,r,e]: triple [head_e_idx, r_idx, tail_e_idx]
- questions([[e,r,e], ...]): question triples
- given knowledge([[e,r,e], ...]): prior answer triples
- facts([[e,r,e], ...]): fact triples"""

RULES_WORD_TRIPLES = """---Knowledge Base---
[JSON format]
- questions(words): question triples
- given knowledge(words): prior answer triples
- facts(words): fact triples"""


class Encoding(enum.Enum):
    EDGE_MATRIX = "edge_matrix"
    ID_TRIPLES = "id_triples"
    WORD_TRIPLES = "word_triples"


_RULES = {
    Encoding.EDGE_MATRIX: RULES_EDGE_MATRIX,
    Encoding.ID_TRIPLES: RULES_ID_TRIPLES,
    Encoding.WORD_TRIPLES: RULES_WORD_TRIPLES,
}

# channel order is fixed: questions, then prior knowledge, then facts
_CHANNEL_KEYS = (
    ("questions", "questions"),
    ("knowledge", "given knowledge"),
    ("facts", "facts"),
)


@dataclass
class PromptPayload:
    entities: List[str] = field(default_factory=list)
    relations: List[str] = field(default_factory=list)
    questions: List[Tuple[int, int, int]] = field(default_factory=list)
    knowledge: List[Tuple[int, int, int]] = field(default_factory=list)
    facts: List[Tuple[int, int, int]] = field(default_factory=list)
    rules: str = ""

    def channel_triples(self) -> Dict[str, List[Tuple[int, int, int]]]:
        return {"questions": self.questions, "knowledge": self.knowledge,
                "facts": self.facts}

    def validate(self):
        n_e, n_r = len(self.entities), len(self.relations)
        for name, triples in self.channel_triples().items():
            for pos, (h, r, t) in enumerate(triples):
                if not (0 <= h < n_e and 0 <= t < n_e):
                    raise DanglingId(f"{name}[{pos}]: entity index out of range")
                if not 0 <= r < n_r:
                    raise DanglingId(f"{name}[{pos}]: relation index out of range")

    def triple_words(self) -> Dict[str, List[Tuple[str, str, str]]]:
        """Channel triples as surface forms; the encoding-independent view."""
        out = {}
        for name, triples in self.channel_triples().items():
            out[name] = [(self.entities[h], self.relations[r], self.entities[t])
                         for h, r, t in triples]
        return out


@dataclass(frozen=True)
class TokenCount:
    count: int
    tokenizer_id: str


@dataclass
class PackResult:
    text: str
    encoding: Encoding
    counts: Dict[Encoding, TokenCount]


_WS_PUNCT = re.compile(r"\w+|[^\w\s]")


def _ws_punct_tokenize(text: str) -> int:
    return len(_WS_PUNCT.findall(text))


_TOKENIZERS: Dict[str, Callable[[str], int]] = {"ws_punct": _ws_punct_tokenize}


def register_tokenizer(tokenizer_id: str, fn: Callable[[str], int]):
    """Install an external tokenizer (e.g. a model-specific one) by id."""
    _TOKENIZERS[tokenizer_id] = fn


def count_tokens(text: str, tokenizer_id: str = "ws_punct") -> TokenCount:
    if tokenizer_id not in _TOKENIZERS:
        raise MalformedPrompt(f"unknown tokenizer: {tokenizer_id!r}")
    return TokenCount(count=_TOKENIZERS[tokenizer_id](text), tokenizer_id=tokenizer_id)


def _dedup(ids: Sequence[int]) -> List[int]:
    seen = set()
    out = []
    for i in ids:
        if i not in seen:
            seen.add(i)
            out.append(i)
    return out


def build_payload(codebook: Codebook, query_edges: Sequence[int],
                  selected: Optional[Dict[Channel, Sequence[Run]]] = None) -> PromptPayload:
    """Assemble the payload from global edge ids.

    The question channel holds the query's own edges followed by any
    selected question-channel runs; knowledge and facts come from their
    selected runs in rank order. Each channel is deduplicated keeping
    first occurrence. E' and R' contain exactly the symbols the payload
    uses, ordered by their global interning order.
    """
    selected = selected or {}

    def channel_edge_ids(ch: Channel, prefix: Sequence[int] = ()) -> List[int]:
        ids = list(prefix)
        for run in selected.get(ch, []):
            ids.extend(run.edges)
        return _dedup(ids)

    q_ids = channel_edge_ids(Channel.QUESTION, query_edges)
    k_ids = channel_edge_ids(Channel.ANSWER)
    f_ids = channel_edge_ids(Channel.FACT)

    used_entities = set()
    used_relations = set()
    for eid in q_ids + k_ids + f_ids:
        e = codebook.edge(eid)
        used_entities.update((e.head, e.tail))
        used_relations.add(e.relation)

    ent_order = sorted(used_entities)
    rel_order = sorted(used_relations)
    ent_local = {g: i for i, g in enumerate(ent_order)}
    rel_local = {g: i for i, g in enumerate(rel_order)}

    def localize(ids: Sequence[int]) -> List[Tuple[int, int, int]]:
        out = []
        for eid in ids:
            e = codebook.edge(eid)
            out.append((ent_local[e.head], rel_local[e.relation], ent_local[e.tail]))
        return out

    payload = PromptPayload(
        entities=[codebook.entities[g] for g in ent_order],
        relations=[codebook.relations[g] for g in rel_order],
        questions=localize(q_ids),
        knowledge=localize(k_ids),
        facts=localize(f_ids),
    )
    payload.validate()
    return payload


def _edge_rows(payload: PromptPayload) -> Tuple[List[List[int]], Dict[str, List[int]]]:
    """Unique triples across channels in first-appearance order, plus refs."""
    rows: List[List[int]] = []
    index: Dict[Tuple[int, int, int], int] = {}
    refs: Dict[str, List[int]] = {}
    for name, triples in payload.channel_triples().items():
        ch_refs = []
        for t in triples:
            key = tuple(t)
            if key not in index:
                index[key] = len(rows)
                rows.append(list(key))
            ch_refs.append(index[key])
        refs[name] = ch_refs
    return rows, refs


def render(payload: PromptPayload, encoding: Encoding) -> str:
    """Strict-JSON rendering; empty channels omit their key entirely."""
    payload.validate()
    rules = payload.rules or _RULES[encoding]
    doc: Dict[str, object] = {}
    if encoding is Encoding.EDGE_MATRIX:
        rows, refs = _edge_rows(payload)
        doc["e"] = payload.entities
        doc["r"] = payload.relations
        doc["edge_matrix"] = rows
        for name, key in _CHANNEL_KEYS:
            if refs[name]:
                doc[f"{key}(edges[i])"] = refs[name]
    elif encoding is Encoding.ID_TRIPLES:
        doc["e"] = payload.entities
        doc["r"] = payload.relations
        for name, key in _CHANNEL_KEYS:
            triples = payload.channel_triples()[name]
            if triples:
                doc[f"{key}([[e,r,e], ...])"] = [list(t) for t in triples]
    else:
        words = payload.triple_words()
        for name, key in _CHANNEL_KEYS:
            if words[name]:
                doc[f"{key}(words)"] = [list(t) for t in words[name]]
    doc["rules"] = rules
    return json.dumps(doc, separators=(",", ":"), ensure_ascii=False)


# bare words inside arrays: quote anything that is not already a quoted
# string, a number, or a JSON literal so the published loose form parses
_BARE_WORD = re.compile(r'(?<=[\[,])\s*([^"\[\],{}\s][^"\[\],{}]*?)\s*(?=[,\]])')
_STRING_LIT = re.compile(r'"(?:[^"\\]|\\.)*"')


def _bare_repl(m: re.Match) -> str:
    tok = m.group(1)
    if tok in ("true", "false", "null"):
        return m.group(0)
    try:
        float(tok)
        return m.group(0)
    except ValueError:
        return json.dumps(tok, ensure_ascii=False)


def _quote_bare_words(text: str) -> str:
    # existing string literals (keys included) must pass through untouched
    out = []
    last = 0
    for lit in _STRING_LIT.finditer(text):
        out.append(_BARE_WORD.sub(_bare_repl, text[last:lit.start()]))
        out.append(lit.group(0))
        last = lit.end()
    out.append(_BARE_WORD.sub(_bare_repl, text[last:]))
    return "".join(out)


def _norm_key(key: str) -> str:
    return key.rstrip(":").strip()


def _int_triple(row: object, where: str) -> Tuple[int, int, int]:
    if not isinstance(row, list) or len(row) != 3:
        raise MalformedPrompt(f"expected a 3-item triple at {where}", location=where)
    try:
        h, r, t = (int(x) for x in row)
    except (TypeError, ValueError) as exc:
        raise MalformedPrompt(f"non-integer index at {where}: {row!r}",
                              location=where) from exc
    return (h, r, t)


def _word_triple(row: object, where: str) -> Tuple[str, str, str]:
    if not isinstance(row, list) or len(row) != 3:
        raise MalformedPrompt(f"expected a 3-item triple at {where}", location=where)
    return (str(row[0]), str(row[1]), str(row[2]))


def parse_prompt(text: str) -> Tuple[PromptPayload, Encoding]:
    """Inverse of render; accepts bare-word arrays from the loose format."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        try:
            doc = json.loads(_quote_bare_words(text))
        except json.JSONDecodeError as exc:
            raise MalformedPrompt(
                f"not valid JSON: {exc.msg}",
                location=f"line {exc.lineno} column {exc.colno}",
            ) from exc
    if not isinstance(doc, dict):
        raise MalformedPrompt("top level must be a JSON object", location="document")

    keys = {_norm_key(k): k for k in doc}

    def get(key: str, default=None):
        raw = keys.get(key)
        return doc[raw] if raw is not None else default

    if "edge_matrix" in keys:
        encoding = Encoding.EDGE_MATRIX
    elif "e" in keys or "r" in keys:
        encoding = Encoding.ID_TRIPLES
    else:
        encoding = Encoding.WORD_TRIPLES

    payload = PromptPayload(rules=str(get("rules", "")))

    if encoding is Encoding.WORD_TRIPLES:
        ent_local: Dict[str, int] = {}
        rel_local: Dict[str, int] = {}

        def intern_words(rows: object, name: str) -> List[Tuple[int, int, int]]:
            if not isinstance(rows, list):
                raise MalformedPrompt(f"{name} must be a list", location=name)
            out = []
            for pos, row in enumerate(rows):
                h, r, t = _word_triple(row, f"{name}[{pos}]")
                for surface in (h, t):
                    if surface not in ent_local:
                        ent_local[surface] = len(ent_local)
                        payload.entities.append(surface)
                if r not in rel_local:
                    rel_local[r] = len(rel_local)
                    payload.relations.append(r)
                out.append((ent_local[h], rel_local[r], ent_local[t]))
            return out

        for name, key in _CHANNEL_KEYS:
            rows = get(f"{key}(words)", [])
            setattr(payload, name, intern_words(rows, f"{key}(words)"))
        payload.validate()
        return payload, encoding

    e = get("e", [])
    r = get("r", [])
    if not isinstance(e, list) or not isinstance(r, list):
        raise MalformedPrompt("'e' and 'r' must be lists", location="e/r")
    payload.entities = [str(s) for s in e]
    payload.relations = [str(s) for s in r]

    if encoding is Encoding.EDGE_MATRIX:
        matrix = get("edge_matrix", [])
        if not isinstance(matrix, list):
            raise MalformedPrompt("edge_matrix must be a list", location="edge_matrix")
        rows = [_int_triple(row, f"edge_matrix[{pos}]") for pos, row in enumerate(matrix)]
        for name, key in _CHANNEL_KEYS:
            refs = get(f"{key}(edges[i])", [])
            if not isinstance(refs, list):
                raise MalformedPrompt(f"{key}(edges[i]) must be a list",
                                      location=f"{key}(edges[i])")
            triples = []
            for pos, ref in enumerate(refs):
                try:
                    idx = int(ref)
                except (TypeError, ValueError) as exc:
                    raise MalformedPrompt(f"non-integer edge ref at {key}[{pos}]",
                                          location=f"{key}(edges[i])[{pos}]") from exc
                if not 0 <= idx < len(rows):
                    raise MalformedPrompt(f"edge ref {idx} out of range at {key}[{pos}]",
                                          location=f"{key}(edges[i])[{pos}]")
                triples.append(rows[idx])
            setattr(payload, name, triples)
    else:
        for name, key in _CHANNEL_KEYS:
            rows = get(f"{key}([[e,r,e], ...])", [])
            if not isinstance(rows, list):
                raise MalformedPrompt(f"{key} triples must be a list",
                                      location=f"{key}([[e,r,e], ...])")
            setattr(payload, name,
                    [_int_triple(row, f"{key}[{pos}]") for pos, row in enumerate(rows)])

    try:
        payload.validate()
    except DanglingId as exc:
        raise MalformedPrompt(str(exc), location="payload indices") from exc
    return payload, encoding


_PREFERENCE = (Encoding.EDGE_MATRIX, Encoding.ID_TRIPLES, Encoding.WORD_TRIPLES)


def pack(payload: PromptPayload, tokenizer_id: str = "ws_punct") -> PackResult:
    """Render all encodings and keep the cheapest; ties keep preference order."""
    texts = {enc: render(payload, enc) for enc in _PREFERENCE}
    counts = {enc: count_tokens(texts[enc], tokenizer_id) for enc in _PREFERENCE}
    best = _PREFERENCE[0]
    for enc in _PREFERENCE[1:]:
        if counts[enc].count < counts[best].count:
            best = enc
    return PackResult(text=texts[best], encoding=best, counts=counts)
