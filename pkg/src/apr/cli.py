"""Command-line interface.

Exit codes: 0 success, 2 usage error, 3 workspace or data error,
4 remote-service error.
"""

from __future__ import annotations

import json
import os
import sys

import click

from .codebook import Channel
from .embedding import ProviderConfig
from .errors import AprError, RemoteUnavailable
from .packer import Encoding
from .policy import (
    PolicyParams,
    build_preference_pairs,
    calibrate_token_costs,
    read_eval_log,
    select_action,
    train,
    utility,
)
from .selector import SelectorConfig
from .workspace import Workspace, WorkspaceConfig

_dir_option = click.option(
    "--dir", "directory", default=lambda: os.environ.get("APR_WORKSPACE", "."),
    show_default=".", help="Workspace directory.")


def _echo_json(doc):
    click.echo(json.dumps(doc, ensure_ascii=False, indent=2))


@click.group()
def cli():
    """Symbolic graph retrieval workspace."""


@cli.command()
@_dir_option
@click.option("--provider", type=click.Choice(["hashing", "fixture", "remote"]),
              default="hashing", show_default=True)
@click.option("--dimension", type=int, default=64, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--fixture", default=None, help="JSON vector map for the fixture provider.")
@click.option("--endpoint", default=None, help="Embedding endpoint for the remote provider.")
def init(directory, provider, dimension, seed, fixture, endpoint):
    """Initialize a new workspace."""
    config = WorkspaceConfig(
        seed=seed,
        provider=ProviderConfig(kind=provider, dimension=dimension, seed=seed,
                                fixture_path=fixture, endpoint=endpoint),
    )
    ws = Workspace.create(directory, config)
    _echo_json({"v": 1, "workspace": ws.directory, "provider": provider,
                "dimension": dimension, "seed": seed})


@cli.command()
@_dir_option
@click.option("--channel", type=click.Choice([ch.value for ch in Channel]),
              default=Channel.FACT.value, show_default=True)
@click.argument("paths", nargs=-1, required=True,
                type=click.Path(exists=True, dir_okay=False))
def ingest(directory, channel, paths):
    """Extract, intern, and segment text files into a channel."""
    ws = Workspace.load(directory)
    report = ws.ingest(list(paths), Channel(channel))
    _echo_json(report.as_json())


@cli.command()
@_dir_option
@click.option("--text", required=True, help="Query text.")
@click.option("--top-m", type=int, default=None, help="Final ranked runs to keep.")
@click.option("--top-k", type=int, default=None, help="Coarse shortlist size per channel.")
@click.option("--explain", is_flag=True, help="Include fine-score term breakdowns.")
def query(directory, text, top_m, top_k, explain):
    """Rank runs for a query and print scores and counters."""
    ws = Workspace.load(directory)
    engine = ws._engine()
    triples = ws._extractor().extract(text)
    if triples:
        seq = ws.codebook.indexify((t.as_tuple() for t in triples),
                                   Channel.QUESTION, "query:cli")
        result = engine.retrieve_edges(seq.edges, text,
                                       ws.config.top_m if top_m is None else top_m,
                                       ws.config.top_k if top_k is None else top_k,
                                       explain=explain)
    else:
        result = engine.retrieve_edges([], text,
                                       ws.config.top_m if top_m is None else top_m)
    _echo_json({
        "v": 1,
        "ranked": [{
            "run_id": r.run_id,
            "channel": r.channel.value,
            "coarse": r.coarse,
            "fine": r.fine,
            **({"breakdown": r.breakdown.as_dict()} if r.breakdown else {}),
        } for r in result.ranked],
        "runs_scanned_coarse": result.runs_scanned_coarse,
        "edges_touched_fine": result.edges_touched_fine,
        "fallback": result.fallback,
    })


@cli.command("pack")
@_dir_option
@click.option("--query", "query_text", required=True, help="Query text.")
@click.option("--select", "select_spec", default=None,
              help="Override actions, e.g. question=unique,answer=include_all,fact=unique.")
@click.option("--report", "show_report", is_flag=True,
              help="Print a JSON report instead of the raw prompt.")
def pack_cmd(directory, query_text, select_spec, show_report):
    """Answer a query end to end and print the packed prompt."""
    ws = Workspace.load(directory)
    select = None
    if select_spec:
        select = SelectorConfig.parse(select_spec, ws.config.cluster_threshold)
    packed, trace = ws.answer_query(query_text, select=select)
    if show_report:
        _echo_json({
            "v": 1,
            "encoding": packed.encoding.value,
            "token_counts": {enc.value: tc.count for enc, tc in packed.counts.items()},
            "actions": trace.actions,
            "fallback": trace.fallback,
            "prompt": packed.text,
        })
    else:
        click.echo(packed.text)


@cli.command()
@_dir_option
@click.option("--force", is_flag=True, help="Consolidate even under budget.")
def consolidate(directory, force):
    """Merge alias entities and remap the codebook."""
    ws = Workspace.load(directory)
    report = ws.run_consolidation(force=force)
    if report is None:
        _echo_json({"v": 1, "skipped": True, "reason": "under budget"})
    else:
        _echo_json(report.as_json())


@cli.command()
@_dir_option
def stats(directory):
    """Codebook and store statistics."""
    ws = Workspace.load(directory)
    _echo_json(ws.stats())


@cli.command()
@_dir_option
def report(directory):
    """Summarize traces: tokens, latency, encodings, codebook growth."""
    ws = Workspace.load(directory)
    _echo_json(ws.efficiency_report())


@cli.group()
def policy():
    """Train and evaluate the selector policy."""


@policy.command("train")
@click.option("--evals", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Eval log CSV.")
@click.option("--out", required=True, help="Output policy JSON path.")
@click.option("--beta-dpo", type=float, default=1.0, show_default=True)
@click.option("--eta", type=float, default=0.0, show_default=True)
@click.option("--epochs", type=int, default=300, show_default=True)
@click.option("--lr", type=float, default=1.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def policy_train(evals, out, beta_dpo, eta, epochs, lr, seed):
    """Fit the policy on an eval log with DPO."""
    groups = read_eval_log(evals)
    pairs = build_preference_pairs(groups)
    model_ids = sorted({rec.features.model_id for recs in groups.values()
                        for rec in recs})
    params = PolicyParams(model_ids=model_ids, beta_dpo=beta_dpo, eta=eta)
    params.token_cost = calibrate_token_costs(
        rec for recs in groups.values() for rec in recs)
    trained = train(pairs, params, epochs=epochs, lr=lr, seed=seed)
    trained.save(out)
    _echo_json({"v": 1, "pairs": len(pairs), "queries": len(groups),
                "epochs": len(trained.loss_history) - 1,
                "final_loss": trained.loss_history[-1] if trained.loss_history else None,
                "policy": out})


@policy.command("eval")
@click.option("--evals", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--policy", "policy_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
def policy_eval(evals, policy_path):
    """Agreement between the policy and the utility-optimal action."""
    groups = read_eval_log(evals)
    params = PolicyParams.load(policy_path)
    agree = 0
    total = 0
    chosen_utils = []
    for _, records in groups.items():
        if not records:
            continue
        best = max(records, key=utility)
        choice = select_action(records[0].features, params)
        total += 1
        if choice == best.action:
            agree += 1
        for rec in records:
            if rec.action == choice:
                chosen_utils.append(utility(rec))
                break
    _echo_json({
        "v": 1,
        "queries": total,
        "argmax_agreement": agree / total if total else 0.0,
        "mean_chosen_utility": (sum(chosen_utils) / len(chosen_utils)
                                if chosen_utils else None),
    })


@cli.command()
@_dir_option
@click.option("--query", "query_text", required=True)
@click.option("--endpoint", required=True, help="Completion endpoint to POST the prompt to.")
@click.option("--timeout", type=float, default=30.0, show_default=True)
def ask(directory, query_text, endpoint, timeout):
    """Pack a prompt and POST it to a completion endpoint (thin glue)."""
    import requests

    ws = Workspace.load(directory)
    packed, _ = ws.answer_query(query_text)
    try:
        resp = requests.post(endpoint, json={"prompt": packed.text}, timeout=timeout)
    except requests.RequestException as exc:
        raise RemoteUnavailable(f"completion service unreachable: {exc}") from exc
    if resp.status_code != 200:
        raise RemoteUnavailable(f"completion service returned {resp.status_code}",
                                status=resp.status_code)
    try:
        click.echo(resp.json().get("text", resp.text))
    except ValueError:
        click.echo(resp.text)


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.UsageError as exc:
        exc.show()
        return 2
    except click.ClickException as exc:
        exc.show()
        return 2
    except RemoteUnavailable as exc:
        click.echo(f"error: {exc}", err=True)
        return 4
    except AprError as exc:
        click.echo(f"error: {exc}", err=True)
        return 3


if __name__ == "__main__":
    sys.exit(main())
