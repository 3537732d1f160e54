"""Run an execution plan over agent backends.

Realizes the three interaction modes: a conditioned consumer answers with its
upstream outputs in context, a feedback exchange has the critic review the
author's answer and the author re-handle the query, and a debate exchange
alternates challenger/proposer messages before the challenger answers with
the full debate transcript. Token usage is accounted per call, falling back
to the ceil(chars/4) rule when a backend reports none.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from .features import QueryRecord
from .scheduler import Activate, DebateExchange, ExecutionPlan, FeedbackExchange


class ConfigurationError(ValueError):
    """Roster/plan mismatch detected before any backend call."""


@dataclass(frozen=True)
class AgentProfile:
    id: int
    role: str
    backend: object  # exposes respond(agent, prompt) -> (text, usage | None)
    system_prompt: str = ""
    tools: tuple[str, ...] = ()  # declared only; never invoked
    decision_maker: bool = False


@dataclass(frozen=True)
class TranscriptEntry:
    step_index: int
    speaker: int
    prompt: str
    response: str
    prompt_tokens: int
    completion_tokens: int
    error: str | None = None


@dataclass
class Transcript:
    entries: list[TranscriptEntry] = field(default_factory=list)
    final_answer: str = ""

    def to_jsonl_rows(self) -> list[dict]:
        return [
            {
                "step_index": e.step_index,
                "speaker": e.speaker,
                "prompt": e.prompt,
                "response": e.response,
                "prompt_tokens": e.prompt_tokens,
                "completion_tokens": e.completion_tokens,
                "error": e.error,
            }
            for e in self.entries
        ]


@dataclass
class TokenStats:
    prompt_tokens: int = 0
    completion_tokens: int = 0
    call_count: int = 0

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def record(self, prompt_tokens: int, completion_tokens: int) -> None:
        self.prompt_tokens += prompt_tokens
        self.completion_tokens += completion_tokens
        self.call_count += 1

    def to_dict(self) -> dict:
        return {
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "total_tokens": self.total_tokens,
            "call_count": self.call_count,
        }


def count_tokens(text: str) -> int:
    """Deterministic offline tokenizer rule: ceil(characters / 4)."""
    return math.ceil(len(text) / 4)


@dataclass(frozen=True)
class PromptTemplates:
    activate: str = (
        "Solve the task.\nTask: {query}\n{upstream}{debate_transcript}Answer:"
    )
    upstream_block: str = "Answers from collaborators:\n{upstream}\n"
    upstream_item: str = "- [agent {agent}] {text}"
    debate_block: str = "Debate transcript:\n{debate_transcript}\n"
    critique: str = (
        "Review this answer to the task and point out flaws.\n"
        "Task: {query}\nAnswer under review: {upstream}\nCritique:"
    )
    rehandle: str = (
        "Redo the task taking the critique into account.\n"
        "Task: {query}\nCritique received: {critique}\nRevised answer:"
    )
    debate_challenge: str = (
        "Challenge the current proposition on this task.\n"
        "Task: {query}\nProposition: {upstream}\n{debate_transcript}Challenge:"
    )
    debate_rebuttal: str = (
        "Defend or refine your proposition against the challenge.\n"
        "Task: {query}\nYour proposition: {upstream}\n{debate_transcript}Rebuttal:"
    )


@dataclass
class ExecutorConfig:
    templates: PromptTemplates = field(default_factory=PromptTemplates)
    aggregation: str = "decision-maker"  # or "majority"


def agent_invoke(agent: AgentProfile, prompt: str) -> tuple[str, int, int, str | None]:
    """One backend call; degraded (empty response) on failure, never fatal."""
    if not prompt:
        raise ValueError("prompt must be nonempty")
    try:
        text, usage = agent.backend.respond(agent, prompt)
    except Exception as exc:  # degraded continuation: the episode survives
        return "", count_tokens(prompt), 0, f"{type(exc).__name__}: {exc}"
    if usage is None:
        usage = (count_tokens(prompt), count_tokens(text))
    return text, int(usage[0]), int(usage[1]), None


def normalize_answer(text: str) -> str:
    return text.strip().lower().rstrip(".!?,;:")


def answers_match(answer: str, gold: str, tol: float = 1e-6) -> bool:
    """Normalized string equality, with numeric comparison when gold parses."""
    a, g = normalize_answer(answer), normalize_answer(gold)
    try:
        return math.isclose(float(a), float(g), rel_tol=0.0, abs_tol=tol)
    except ValueError:
        return a == g


def aggregate(solutions: dict[int, str], strategy: str, decision_maker_output: str | None) -> str:
    """Combine per-agent solutions into the final answer."""
    if not solutions:
        raise ValueError("no solutions to aggregate")
    if strategy == "decision-maker":
        if decision_maker_output is None:
            raise ValueError("decision maker produced no output")
        return decision_maker_output
    if strategy == "majority":
        counts = Counter(normalize_answer(s) for s in solutions.values())
        best = max(counts.values())
        modal = {k for k, v in counts.items() if v == best}
        for node in sorted(solutions):
            if normalize_answer(solutions[node]) in modal:
                return solutions[node]
    raise ValueError(f"unknown aggregation strategy {strategy!r}")


class _Session:
    """State threaded through one plan execution."""

    def __init__(self, roster: dict[int, AgentProfile], query: QueryRecord, cfg: ExecutorConfig):
        self.roster = roster
        self.query = query
        self.cfg = cfg
        self.outputs: dict[int, str] = {}
        self.debates: dict[int, list[str]] = {}
        self.transcript = Transcript()
        self.stats = TokenStats()
        self.step_index = 0

    def call(self, node: int, prompt: str) -> str:
        text, ptok, ctok, error = agent_invoke(self.roster[node], prompt)
        self.stats.record(ptok, ctok)
        self.transcript.entries.append(
            TranscriptEntry(self.step_index, node, prompt, text, ptok, ctok, error)
        )
        return text

    def upstream_section(self, inputs: tuple[int, ...]) -> str:
        if not inputs:
            return ""
        t = self.cfg.templates
        items = "\n".join(
            t.upstream_item.format(agent=i, text=self.outputs.get(i, "")) for i in inputs
        )
        return t.upstream_block.format(upstream=items)

    def debate_section(self, node: int) -> str:
        lines = self.debates.get(node)
        if not lines:
            return ""
        return self.cfg.templates.debate_block.format(debate_transcript="\n".join(lines))


def run_topology(
    plan: ExecutionPlan,
    roster: list[AgentProfile],
    query: QueryRecord,
    cfg: ExecutorConfig | None = None,
) -> tuple[str, Transcript, TokenStats]:
    """Execute ``plan`` and return (final answer, transcript, token stats)."""
    cfg = cfg or ExecutorConfig()
    by_id = {a.id: a for a in roster}
    if sum(a.decision_maker for a in roster) != 1:
        raise ConfigurationError("roster must flag exactly one decision maker")
    missing = plan.participants - set(by_id)
    if missing:
        raise ConfigurationError(f"no agent configured for plan nodes {sorted(missing)}")

    session = _Session(by_id, query, cfg)
    t = cfg.templates
    for index, step in enumerate(plan.steps):
        session.step_index = index
        if isinstance(step, Activate):
            prompt = t.activate.format(
                query=query.text,
                upstream=session.upstream_section(step.conditioned_inputs),
                debate_transcript=session.debate_section(step.node),
            )
            session.outputs[step.node] = session.call(step.node, prompt)
        elif isinstance(step, FeedbackExchange):
            critique = session.call(
                step.critic,
                t.critique.format(query=query.text, upstream=session.outputs.get(step.author, "")),
            )
            session.outputs[step.author] = session.call(
                step.author,
                t.rehandle.format(query=query.text, critique=critique),
            )
        else:  # DebateExchange
            lines = session.debates.setdefault(step.challenger, [])
            for _ in range(step.rounds):
                challenge = session.call(
                    step.challenger,
                    t.debate_challenge.format(
                        query=query.text,
                        upstream=session.outputs.get(step.proposer, ""),
                        debate_transcript=session.debate_section(step.challenger),
                    ),
                )
                lines.append(f"[challenger {step.challenger}] {challenge}")
                rebuttal = session.call(
                    step.proposer,
                    t.debate_rebuttal.format(
                        query=query.text,
                        upstream=session.outputs.get(step.proposer, ""),
                        debate_transcript=session.debate_section(step.challenger),
                    ),
                )
                lines.append(f"[proposer {step.proposer}] {rebuttal}")

    dm_output = session.outputs.get(plan.decision_maker)
    answer = aggregate(session.outputs, cfg.aggregation, dm_output)
    session.transcript.final_answer = answer
    return answer, session.transcript, session.stats
