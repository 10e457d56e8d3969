"""End-to-end walkthrough: init a workspace, ingest facts, answer queries.

Builds a throwaway workspace under /tmp, ingests a small delimited corpus,
answers two queries (the second reuses the first's vocabulary), and prints
the efficiency report. Mirrors the README walkthrough without needing the
CLI.

Usage: python3 scripts/example_session.py
"""

import json
import shutil
import tempfile
from pathlib import Path

from apr.codebook import Channel
from apr.embedding import ProviderConfig
from apr.workspace import Workspace, WorkspaceConfig

CORPUS = """\
AlphaCorp | acquired_in | BetaLtd
BetaLtd | exposed_to | EUReg2024_12
AlphaCorp | subject_to | EUReg2024_12
AlphaCorp | acquired_in | 2021+
"""

QUERIES = [
    "AlphaCorp | acquired_in | 2021+\nBetaLtd | exposed_to | EUReg2024_12",
    "AlphaCorp | subject_to | GDPR_2025",
]


def main() -> None:
    root = Path(tempfile.mkdtemp(prefix="apr_demo_"))
    try:
        ws = Workspace.create(str(root / "ws"), WorkspaceConfig(
            provider=ProviderConfig(kind="hashing", dimension=64, seed=0)))
        corpus = root / "facts.txt"
        corpus.write_text(CORPUS)

        report = ws.ingest([str(corpus)], Channel.FACT)
        print(f"ingested: {report.triples} triples -> "
              f"{report.new_edges} edges, {report.new_entities} entities\n")

        for text in QUERIES:
            packed, trace = ws.answer_query(text)
            print(f"query {trace.query_id}: {text.splitlines()[0]!r}...")
            print(f"  encoding: {trace.chosen_encoding}  "
                  f"tokens: {trace.token_counts[trace.chosen_encoding]}")
            print(f"  all encodings: {trace.token_counts}")
            doc = json.loads(packed.text)
            print(f"  prompt keys: {sorted(doc)}\n")

        eff = ws.efficiency_report()
        print("efficiency report:")
        print(json.dumps(eff, indent=2))
    finally:
        shutil.rmtree(root, ignore_errors=True)


if __name__ == "__main__":
    main()
