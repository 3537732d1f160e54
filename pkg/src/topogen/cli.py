"""Command-line surface: train, distill, run, eval, inspect.

Exit codes: 0 success, 2 config/input error, 3 backend failure, 4 numeric
failure. Every command is deterministic under a fixed seed with mock
backends.
"""

from __future__ import annotations

import json
import os
import sys

import click
import numpy as np

from . import decoder, distill as distill_mod, trainer as trainer_mod
from .backends import BackendError, ProtocolError
from .config import ConfigError, RunConfig, load_config
from .distill import DistillConfig, LocalPolicy, create_students
from .executor import run_topology
from .features import QueryRecord, embed_query, load_queries
from .graph import RELATIONS, topology_to_dict, validate
from .numerics import NumericError, ParamStore
from .policy import CentralizedPolicy, PolicyConfig
from .scheduler import build_plan, plan_to_json
from .trainer import TrainConfig, RewardConfig

EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_NUMERIC = 4


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_config_or_exit(path: str) -> RunConfig:
    try:
        return load_config(path)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))


def _load_queries_or_exit(path: str) -> list[QueryRecord]:
    try:
        return load_queries(path)
    except (OSError, ValueError, KeyError) as exc:
        _fail(EXIT_CONFIG, f"queries: {exc}")


def _policy_config(cfg: RunConfig) -> PolicyConfig:
    return PolicyConfig(
        num_roles=cfg.num_roles,
        d=cfg.hyper.d,
        num_layers=cfg.hyper.num_layers,
        init_scale=cfg.hyper.init_scale,
        decoder_init_scale=cfg.hyper.decoder_init_scale,
    )


def _train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        query_budget=cfg.hyper.query_budget,
        alpha=cfg.hyper.alpha,
        lr=cfg.hyper.lr,
        reward=RewardConfig(
            lambda_=cfg.hyper.lambda_,
            gamma=cfg.hyper.gamma,
            baseline_decay=cfg.hyper.baseline_decay,
        ),
        tau_start=cfg.hyper.tau_start,
        tau_end=cfg.hyper.tau_end,
        debate_rounds=cfg.hyper.debate_rounds,
        executor=cfg.build_executor_config(),
    )


@click.group()
def main() -> None:
    """Generate, train, distill, and execute multi-agent communication topologies."""


@main.command()
@click.argument("config_path", type=click.Path())
@click.argument("queries_path", type=click.Path())
@click.argument("out_path", type=click.Path())
@click.option("--report", "report_path", type=click.Path(), default=None, help="Training report JSONL.")
def train(config_path: str, queries_path: str, out_path: str, report_path: str | None) -> None:
    """Train the centralized policy and write a checkpoint."""
    cfg = _load_config_or_exit(config_path)
    queries = _load_queries_or_exit(queries_path)
    rng = np.random.default_rng(cfg.seed)
    policy = CentralizedPolicy.create(_policy_config(cfg), rng)
    roster, _ = cfg.build_roster()
    try:
        g_pri = cfg.load_prior_graph()
        report = trainer_mod.train(
            queries, roster, cfg.roles, g_pri, policy, cfg.build_embedder(), _train_config(cfg), rng
        )
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except (BackendError, ProtocolError) as exc:
        # Halt with a resumable checkpoint rather than losing the run.
        policy.store.save(out_path + ".partial")
        _fail(EXIT_BACKEND, f"backend outage mid-training (partial checkpoint saved): {exc}")
    except NumericError as exc:
        _fail(EXIT_NUMERIC, str(exc))
    policy.store.save(out_path)
    if report_path:
        with open(report_path, "w", encoding="utf-8") as fh:
            for row in report:
                fh.write(json.dumps(row) + "\n")
    click.echo(f"trained {len(report)} steps -> {out_path}")


@main.command()
@click.argument("config_path", type=click.Path())
@click.argument("queries_path", type=click.Path())
@click.argument("teacher_path", type=click.Path())
@click.argument("out_dir", type=click.Path())
@click.option("--report", "report_path", type=click.Path(), default=None, help="Distillation report JSONL.")
def distill(config_path: str, queries_path: str, teacher_path: str, out_dir: str, report_path: str | None) -> None:
    """Distill the trained policy into per-agent local policies."""
    cfg = _load_config_or_exit(config_path)
    queries = _load_queries_or_exit(queries_path)
    if not os.path.exists(teacher_path):
        _fail(EXIT_CONFIG, f"teacher checkpoint not found: {teacher_path}")
    rng = np.random.default_rng(cfg.seed)
    policy = CentralizedPolicy(_policy_config(cfg), ParamStore.load(teacher_path))
    _, mocks = cfg.build_roster()
    students = create_students([a.id for a in cfg.agents], cfg.hyper.d, rng, cfg.hyper.hidden)
    dcfg = DistillConfig(
        query_budget=cfg.hyper.distill_budget,
        lr=cfg.hyper.lr,
        teacher_samples=cfg.hyper.teacher_samples,
        tau=cfg.hyper.tau_end,
        inner_steps=cfg.hyper.distill_inner_steps,
        hidden=cfg.hyper.hidden,
    )
    try:
        g_pri = cfg.load_prior_graph()
        report = distill_mod.distill_train(
            queries, policy, cfg.roles, g_pri, cfg.build_embedder(), students, dcfg, rng
        )
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except NumericError as exc:
        _fail(EXIT_NUMERIC, str(exc))
    backend_calls = sum(m.call_count for m in mocks)
    assert backend_calls == 0, "distillation must not invoke agent backends"
    os.makedirs(out_dir, exist_ok=True)
    for node, student in students.items():
        student.save(os.path.join(out_dir, f"local_policy_{node}.json"))
    if report_path:
        with open(report_path, "w", encoding="utf-8") as fh:
            for row in report:
                fh.write(json.dumps(row) + "\n")
    click.echo(f"distilled {len(students)} local policies -> {out_dir} (backend calls: {backend_calls})")


def _load_students(cfg: RunConfig, students_dir: str) -> dict[int, LocalPolicy]:
    students = {}
    for agent in cfg.agents:
        path = os.path.join(students_dir, f"local_policy_{agent.id}.json")
        if not os.path.exists(path):
            raise ConfigError(f"missing student checkpoint: {path}")
        students[agent.id] = LocalPolicy.load(agent.id, path)
    return students


def _generate_topology(cfg: RunConfig, policy, students, query, rng, decentralized: bool):
    embedder = cfg.build_embedder()
    g_pri = cfg.load_prior_graph()
    q_emb = embed_query(embedder, query.text)
    if decentralized:
        h0 = policy.initial_features(cfg.roles, q_emb)
        trace = distill_mod.decentralized_decode(students, h0, rng)
    else:
        trace = policy.decode(cfg.roles, q_emb, g_pri, cfg.hyper.tau_end, rng)
    spars = decoder.sparsify(trace, cfg.hyper.alpha)
    return trace, spars, decoder.final_graph(spars)


@main.command()
@click.argument("config_path", type=click.Path())
@click.argument("query_text")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(), default=None)
@click.option("--students", "students_dir", type=click.Path(), default=None)
@click.option("--decentralized", is_flag=True, help="Decode with per-agent local policies.")
@click.option("--export-topology", "topology_path", type=click.Path(), default=None)
@click.option("--export-transcript", "transcript_path", type=click.Path(), default=None)
def run(config_path, query_text, checkpoint_path, students_dir, decentralized, topology_path, transcript_path):
    """One-shot generate -> schedule -> execute for a single query."""
    cfg = _load_config_or_exit(config_path)
    rng = np.random.default_rng(cfg.seed)
    try:
        if decentralized:
            if not students_dir:
                raise ConfigError("--decentralized requires --students DIR")
            students = _load_students(cfg, students_dir)
        else:
            students = None
        if checkpoint_path:
            policy = CentralizedPolicy(_policy_config(cfg), ParamStore.load(checkpoint_path))
        else:
            policy = CentralizedPolicy.create(_policy_config(cfg), np.random.default_rng(cfg.seed))
        query = QueryRecord("cli", query_text)
        trace, spars, g_final = _generate_topology(cfg, policy, students, query, rng, decentralized)
        roster, _ = cfg.build_roster()
        plan = build_plan(g_final, cfg.decision_maker, cfg.hyper.debate_rounds)
        answer, transcript, stats = run_topology(plan, roster, query, cfg.build_executor_config())
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except (BackendError, ProtocolError) as exc:
        _fail(EXIT_BACKEND, str(exc))
    except NumericError as exc:
        _fail(EXIT_NUMERIC, str(exc))
    errors = [e for e in transcript.entries if e.error]
    for entry in errors:
        click.echo(f"warning: degraded step {entry.step_index} (agent {entry.speaker}): {entry.error}", err=True)
    if len(errors) == len(transcript.entries) and transcript.entries:
        _fail(EXIT_BACKEND, "every backend call failed")
    if topology_path:
        roles = {a.id: a.role for a in cfg.agents}
        with open(topology_path, "w", encoding="utf-8") as fh:
            json.dump(topology_to_dict(g_final, query.id, roles), fh)
    if transcript_path:
        with open(transcript_path, "w", encoding="utf-8") as fh:
            for row in transcript.to_jsonl_rows():
                fh.write(json.dumps(row) + "\n")
    click.echo(answer)


@main.command()
@click.argument("config_path", type=click.Path())
@click.argument("queries_path", type=click.Path())
@click.option("--checkpoint", "checkpoint_path", type=click.Path(), default=None)
@click.option("--students", "students_dir", type=click.Path(), default=None)
@click.option("--decentralized", is_flag=True)
@click.option("--out", "out_path", type=click.Path(), default=None, help="Metrics report JSON.")
def eval(config_path, queries_path, checkpoint_path, students_dir, decentralized, out_path):
    """Run a query set and report accuracy, tokens, calls, and edge mix."""
    cfg = _load_config_or_exit(config_path)
    queries = _load_queries_or_exit(queries_path)
    rng = np.random.default_rng(cfg.seed)
    try:
        if decentralized and not students_dir:
            raise ConfigError("--decentralized requires --students DIR")
        students = _load_students(cfg, students_dir) if decentralized else None
        if checkpoint_path:
            policy = CentralizedPolicy(_policy_config(cfg), ParamStore.load(checkpoint_path))
        else:
            policy = CentralizedPolicy.create(_policy_config(cfg), np.random.default_rng(cfg.seed))
        roster, _ = cfg.build_roster()
        ex_cfg = cfg.build_executor_config()
        correct = 0
        total_tokens = 0
        total_calls = 0
        edge_counts = np.zeros(len(RELATIONS))
        rows = []
        for query in sorted(queries, key=lambda q: q.id):
            trace, spars, g_final = _generate_topology(cfg, policy, students, query, rng, decentralized)
            plan = build_plan(g_final, cfg.decision_maker, cfg.hyper.debate_rounds)
            answer, transcript, stats = run_topology(plan, roster, query, ex_cfg)
            hit = query.gold is not None and trainer_mod.gold_match_evaluator(query, answer, g_final) == 1.0
            correct += hit
            total_tokens += stats.total_tokens
            total_calls += stats.call_count
            for e in g_final.edges:
                edge_counts[RELATIONS.index(e.relation)] += 1
            rows.append(
                {
                    "query_id": query.id,
                    "answer": answer,
                    "correct": bool(hit),
                    "calls": stats.call_count,
                    "tokens": stats.total_tokens,
                    "edges": len(g_final.edges),
                }
            )
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except (BackendError, ProtocolError) as exc:
        _fail(EXIT_BACKEND, str(exc))
    except NumericError as exc:
        _fail(EXIT_NUMERIC, str(exc))
    n_queries = len(queries)
    edge_total = edge_counts.sum()
    mix = (edge_counts / edge_total).tolist() if edge_total else [0.0] * len(RELATIONS)
    t_rounds = cfg.hyper.baseline_rounds
    baseline_calls_per_query = len(cfg.agents) * t_rounds
    report = {
        "queries": n_queries,
        "accuracy": correct / n_queries if n_queries else 0.0,
        "mean_tokens": total_tokens / n_queries if n_queries else 0.0,
        "mean_calls": total_calls / n_queries if n_queries else 0.0,
        "edge_type_mix": dict(zip((r.value for r in RELATIONS), mix)),
        "multi_round_baseline": {
            "rounds": t_rounds,
            "calls_per_query": baseline_calls_per_query,
            "one_shot_mean_calls": total_calls / n_queries if n_queries else 0.0,
            "one_shot_fewer": (total_calls / n_queries if n_queries else 0.0) < baseline_calls_per_query,
        },
        "per_query": rows,
    }
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2)
    click.echo(json.dumps({k: v for k, v in report.items() if k != "per_query"}, indent=2))


@main.command()
@click.argument("config_path", type=click.Path())
@click.argument("topology_path", type=click.Path())
def inspect(config_path: str, topology_path: str) -> None:
    """Pretty-print a topology artifact and its derived execution plan."""
    cfg = _load_config_or_exit(config_path)
    try:
        with open(topology_path, encoding="utf-8") as fh:
            payload = json.load(fh)
        from .graph import topology_from_dict

        g, query_id, roles = topology_from_dict(payload)
    except (OSError, ValueError, KeyError) as exc:
        _fail(EXIT_CONFIG, f"topology: {exc}")
    violations = validate(g)
    plan = build_plan(g, cfg.decision_maker, cfg.hyper.debate_rounds)
    click.echo(
        json.dumps(
            {
                "query_id": query_id,
                "nodes": [{"id": v, "role": roles.get(v, "")} for v in sorted(g.nodes)],
                "edges": len(g.edges),
                "violations": violations,
                "plan": plan_to_json(plan),
                "expected_calls": plan.expected_calls(),
            },
            indent=2,
        )
    )


if __name__ == "__main__":
    main()
