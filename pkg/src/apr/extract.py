"""Triple extraction from raw text.

Two extractors behind one `extract(text) -> list[RawTriple]` interface.
The pattern extractor is deliberately simple and fully offline: a line
of the form `head | relation | tail` is taken verbatim, anything else is
split into clauses and matched against a verb lexicon. The remote
extractor posts text to an HTTP service for real extraction quality.
Both report character spans back into the source text so provenance
survives interning.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

from .errors import EmptyText, InvalidParams, NoTriplesFound, RemoteUnavailable

__all__ = [
    "RawTriple",
    "PatternExtractor",
    "RemoteExtractor",
    "DEFAULT_VERBS",
]

DEFAULT_VERBS: Tuple[str, ...] = (
    "located in",
    "part of",
    "subject to",
    "exposed to",
    "acquired in",
    "acquired",
    "owns",
    "founded",
    "employs",
    "regulates",
    "launched",
    "reported",
    "supplies",
    "operates",
    "is",
    "was",
    "has",
)

_SENTENCE_SPLIT = re.compile(r"[.!?;]")


@dataclass(frozen=True)
class RawTriple:
    head: str
    relation: str
    tail: str
    char_span: Tuple[int, int]

    def as_tuple(self) -> Tuple[str, str, str]:
        return (self.head, self.relation, self.tail)


class PatternExtractor:
    """Offline extraction: delimited lines first, then verb-lexicon clauses."""

    def __init__(self, verbs: Sequence[str] = DEFAULT_VERBS):
        verbs = [v.strip() for v in verbs if v.strip()]
        if not verbs:
            raise InvalidParams("verb lexicon is empty")
        # longest verbs first so "acquired in" beats "acquired"
        ordered = sorted(set(verbs), key=lambda v: (-len(v), v))
        self.verbs = tuple(ordered)
        pattern = "|".join(re.escape(v) for v in ordered)
        self._verb_re = re.compile(rf"\b({pattern})\b", re.IGNORECASE)

    def extract(self, text: str) -> List[RawTriple]:
        if not text or not text.strip():
            raise EmptyText("cannot extract from empty text")
        out: List[RawTriple] = []
        offset = 0
        for line in text.splitlines(keepends=True):
            stripped = line.strip()
            content_len = len(line.rstrip("\r\n"))
            if stripped and not stripped.startswith("#"):
                start = offset + (len(line) - len(line.lstrip()))
                end = offset + content_len
                if "|" in stripped:
                    out.extend(self._from_delimited(stripped, (start, end)))
                else:
                    out.extend(self._from_clauses(line[:content_len], offset))
            offset += len(line)
        return out

    def extract_batch(self, texts: Sequence[str]) -> List[List[RawTriple]]:
        return [self.extract(t) for t in texts]

    def _from_delimited(self, line: str, span: Tuple[int, int]) -> List[RawTriple]:
        parts = [p.strip() for p in line.split("|")]
        if len(parts) != 3 or not all(parts):
            return []
        return [RawTriple(parts[0], parts[1], parts[2], span)]

    def _from_clauses(self, line: str, line_offset: int) -> List[RawTriple]:
        out = []
        pos = 0
        for chunk in _SENTENCE_SPLIT.split(line):
            start = pos
            pos += len(chunk) + 1
            sent = chunk.strip()
            if not sent:
                continue
            m = self._verb_re.search(chunk)
            if not m:
                continue
            head = chunk[:m.start()].strip(" \t,:-")
            tail = chunk[m.end():].strip(" \t,:-")
            if not head or not tail:
                continue
            lead = len(chunk) - len(chunk.lstrip())
            sent_start = line_offset + start + lead
            out.append(RawTriple(head, m.group(1).lower(), tail,
                                 (sent_start, sent_start + len(chunk.strip()))))
        return out


class RemoteExtractor:
    """HTTP extraction: POST {"text": ...} -> {"triples": [{"h","r","t"}, ...]}."""

    def __init__(self, endpoint: str, auth_token: Optional[str] = None,
                 timeout: float = 10.0, max_retries: int = 2, backoff: float = 0.1):
        if not endpoint:
            raise InvalidParams("remote extractor needs an endpoint")
        self.endpoint = endpoint
        self.auth_token = auth_token
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff

    def extract(self, text: str) -> List[RawTriple]:
        if not text or not text.strip():
            raise EmptyText("cannot extract from empty text")
        import requests

        headers = {"Content-Type": "application/json"}
        if self.auth_token:
            headers["Authorization"] = f"Bearer {self.auth_token}"
        last_status, last_err = None, "no attempt made"
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff * (2 ** (attempt - 1)))
            try:
                resp = requests.post(self.endpoint, json={"text": text},
                                     headers=headers, timeout=self.timeout)
            except requests.RequestException as exc:
                last_status, last_err = None, str(exc)
                continue
            if resp.status_code >= 500:
                last_status, last_err = resp.status_code, f"server error {resp.status_code}"
                continue
            if resp.status_code != 200:
                raise RemoteUnavailable(
                    f"extraction service rejected request: {resp.status_code}",
                    status=resp.status_code,
                )
            return self._parse(resp, text)
        raise RemoteUnavailable(f"extraction service unavailable: {last_err}",
                                status=last_status)

    def extract_batch(self, texts: Sequence[str]) -> List[List[RawTriple]]:
        return [self.extract(t) for t in texts]

    def _parse(self, resp, text: str) -> List[RawTriple]:
        try:
            triples = resp.json()["triples"]
        except (ValueError, KeyError) as exc:
            raise NoTriplesFound(f"malformed extraction response: {exc}") from exc
        if not isinstance(triples, list):
            raise NoTriplesFound("extraction response 'triples' is not a list")
        out = []
        for item in triples:
            try:
                head, rel, tail = str(item["h"]), str(item["r"]), str(item["t"])
            except (TypeError, KeyError) as exc:
                raise NoTriplesFound(f"bad triple record: {item!r}") from exc
            if not (head.strip() and rel.strip() and tail.strip()):
                raise NoTriplesFound(f"bad triple record: {item!r}")
            idx = text.find(head)
            span = (idx, idx + len(head)) if idx >= 0 else (0, 0)
            out.append(RawTriple(head, rel, tail, span))
        return out
