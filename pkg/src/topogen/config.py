"""Run configuration: roster, prior graph, hyperparameters, templates.

A single versioned JSON format; parsing errors raise :class:`ConfigError`
with a field-level message and the CLI maps them to exit code 2.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources

from .backends import ChatBackend, ChatEndpointConfig, EmbeddingEndpointConfig, HttpEmbedder, MockBackend, MockScript
from .executor import AgentProfile, ExecutorConfig, PromptTemplates
from .features import HashEmbedder
from .graph import PriorGraph, topology_from_dict


class ConfigError(ValueError):
    """Invalid or missing configuration input."""


@dataclass
class Hyperparameters:
    alpha: float = 0.7
    lambda_: float = 0.5
    gamma: float = 0.01
    lr: float = 0.01
    tau_start: float = 2.0
    tau_end: float = 0.5
    query_budget: int = 40  # M
    distill_budget: int = 40  # M'
    teacher_samples: int = 8  # S
    distill_inner_steps: int = 20
    debate_rounds: int = 2
    d: int = 64
    num_layers: int = 2
    hidden: int = 64
    init_scale: float = 0.1
    decoder_init_scale: float | None = None
    baseline_decay: float = 0.9
    baseline_rounds: int = 3  # T of the multi-round cost model

    def validate(self) -> None:
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError("hyperparameters.alpha must be in [0, 1]")
        if not (0.0 <= self.lambda_ <= 1.0):
            raise ConfigError("hyperparameters.lambda must be in [0, 1]")
        if self.gamma < 0:
            raise ConfigError("hyperparameters.gamma must be >= 0")
        if self.lr <= 0:
            raise ConfigError("hyperparameters.lr must be positive")
        if self.d <= 0 or self.num_layers < 0:
            raise ConfigError("hyperparameters.d must be positive and L >= 0")


_HYPER_KEYS = {
    "alpha": "alpha",
    "lambda": "lambda_",
    "gamma": "gamma",
    "lr": "lr",
    "tau_start": "tau_start",
    "tau_end": "tau_end",
    "M": "query_budget",
    "M_prime": "distill_budget",
    "S": "teacher_samples",
    "distill_inner_steps": "distill_inner_steps",
    "debate_rounds": "debate_rounds",
    "d": "d",
    "L": "num_layers",
    "hidden": "hidden",
    "init_scale": "init_scale",
    "decoder_init_scale": "decoder_init_scale",
    "baseline_decay": "baseline_decay",
    "T": "baseline_rounds",
}


@dataclass
class AgentSpec:
    id: int
    role: str
    system_prompt: str = ""
    decision_maker: bool = False
    tools: tuple[str, ...] = ()
    backend: dict = field(default_factory=lambda: {"type": "mock"})


@dataclass
class RunConfig:
    seed: int
    agents: list[AgentSpec]
    hyper: Hyperparameters
    prior_graph_path: str | None = None
    embedder_spec: dict = field(default_factory=lambda: {"type": "hash"})
    aggregation: str = "decision-maker"
    mock_spec: dict = field(default_factory=dict)
    template_overrides: dict = field(default_factory=dict)

    @property
    def roles(self) -> list[int]:
        """Role-embedding index per agent, assigned by first appearance."""
        index: dict[str, int] = {}
        out = []
        for agent in self.agents:
            out.append(index.setdefault(agent.role, len(index)))
        return out

    @property
    def num_roles(self) -> int:
        return len({a.role for a in self.agents})

    @property
    def decision_maker(self) -> int:
        return next(a.id for a in self.agents if a.decision_maker)

    def build_mock_script(self) -> MockScript:
        spec = self.mock_spec
        return MockScript(
            patterns=[tuple(p) for p in spec.get("patterns", [])],
            default_response=spec.get("default_response", "no answer"),
            adversarial=set(spec.get("adversarial", [])),
            failure_text=spec.get("failure_text", MockScript.failure_text),
        )

    def build_roster(self) -> tuple[list[AgentProfile], list[MockBackend]]:
        """Instantiate agents; mock backends are returned for call auditing."""
        script = self.build_mock_script()
        shared_mock = MockBackend(script)
        mocks = [shared_mock]
        roster = []
        for spec in self.agents:
            btype = spec.backend.get("type", "mock")
            if btype == "mock":
                backend = shared_mock
            elif btype == "openai_chat":
                try:
                    backend = ChatBackend(
                        ChatEndpointConfig(
                            base_url=spec.backend["base_url"],
                            model=spec.backend["model"],
                            api_key_env=spec.backend.get("api_key_env", "OPENAI_API_KEY"),
                            timeout=spec.backend.get("timeout", 60.0),
                            retries=spec.backend.get("retries", 2),
                            temperature=spec.backend.get("temperature", 0.2),
                            requests_per_second=spec.backend.get("requests_per_second", 0.0),
                        )
                    )
                except (KeyError, ValueError) as exc:
                    raise ConfigError(f"agents[{spec.id}].backend: {exc}") from exc
            else:
                raise ConfigError(f"agents[{spec.id}].backend.type: unknown type {btype!r}")
            roster.append(
                AgentProfile(
                    id=spec.id,
                    role=spec.role,
                    backend=backend,
                    system_prompt=spec.system_prompt,
                    tools=spec.tools,
                    decision_maker=spec.decision_maker,
                )
            )
        return roster, mocks

    def build_embedder(self):
        etype = self.embedder_spec.get("type", "hash")
        if etype == "hash":
            return HashEmbedder()
        if etype == "http":
            try:
                return HttpEmbedder(
                    EmbeddingEndpointConfig(
                        base_url=self.embedder_spec["base_url"],
                        api_key_env=self.embedder_spec.get("api_key_env", "OPENAI_API_KEY"),
                        timeout=self.embedder_spec.get("timeout", 30.0),
                        retries=self.embedder_spec.get("retries", 2),
                        model=self.embedder_spec.get("model"),
                    )
                )
            except KeyError as exc:
                raise ConfigError(f"embedder: missing {exc}") from exc
        raise ConfigError(f"embedder.type: unknown type {etype!r}")

    def build_executor_config(self) -> ExecutorConfig:
        templates = PromptTemplates(**self.template_overrides) if self.template_overrides else PromptTemplates()
        return ExecutorConfig(templates=templates, aggregation=self.aggregation)

    def load_prior_graph(self) -> PriorGraph:
        if self.prior_graph_path:
            with open(self.prior_graph_path, encoding="utf-8") as fh:
                payload = json.load(fh)
        else:
            payload = json.loads(
                resources.files("topogen.data").joinpath("prior_graph.json").read_text("utf-8")
            )
        g, _, _ = topology_from_dict(payload)
        expected = [a.id for a in sorted(self.agents, key=lambda a: a.id)]
        if sorted(g.nodes) != expected:
            raise ConfigError(
                f"prior_graph: node ids {sorted(g.nodes)} do not match agent ids {expected}"
            )
        return g

    def to_dict(self) -> dict:
        hyper = {key: getattr(self.hyper, attr) for key, attr in _HYPER_KEYS.items()}
        return {
            "version": 1,
            "seed": self.seed,
            "agents": [
                {
                    "id": a.id,
                    "role": a.role,
                    "system_prompt": a.system_prompt,
                    "decision_maker": a.decision_maker,
                    "tools": list(a.tools),
                    "backend": a.backend,
                }
                for a in self.agents
            ],
            "hyperparameters": hyper,
            "prior_graph": self.prior_graph_path,
            "embedder": self.embedder_spec,
            "aggregation": self.aggregation,
            "mock": self.mock_spec,
            "templates": self.template_overrides,
        }


def parse_config(payload: dict) -> RunConfig:
    if payload.get("version") != 1:
        raise ConfigError(f"version: expected 1, got {payload.get('version')!r}")
    if "seed" not in payload:
        raise ConfigError("seed: required for the determinism contract")
    agents_raw = payload.get("agents")
    if not agents_raw:
        raise ConfigError("agents: at least one agent required")
    agents = []
    for idx, raw in enumerate(agents_raw):
        try:
            agents.append(
                AgentSpec(
                    id=int(raw["id"]),
                    role=str(raw["role"]),
                    system_prompt=raw.get("system_prompt", ""),
                    decision_maker=bool(raw.get("decision_maker", False)),
                    tools=tuple(raw.get("tools", ())),
                    backend=raw.get("backend", {"type": "mock"}),
                )
            )
        except KeyError as exc:
            raise ConfigError(f"agents[{idx}]: missing field {exc}") from exc
    ids = [a.id for a in agents]
    if sorted(ids) != list(range(len(ids))):
        raise ConfigError("agents: ids must be exactly 0..N-1")
    if sum(a.decision_maker for a in agents) != 1:
        raise ConfigError("agents: exactly one agent must be the decision maker")

    hyper = Hyperparameters()
    for key, value in payload.get("hyperparameters", {}).items():
        if key not in _HYPER_KEYS:
            raise ConfigError(f"hyperparameters.{key}: unknown field")
        setattr(hyper, _HYPER_KEYS[key], value)
    hyper.validate()

    cfg = RunConfig(
        seed=int(payload["seed"]),
        agents=agents,
        hyper=hyper,
        prior_graph_path=payload.get("prior_graph"),
        embedder_spec=payload.get("embedder", {"type": "hash"}),
        aggregation=payload.get("aggregation", "decision-maker"),
        mock_spec=payload.get("mock", {}),
        template_overrides=payload.get("templates", {}),
    )
    if cfg.aggregation not in ("decision-maker", "majority"):
        raise ConfigError(f"aggregation: unknown strategy {cfg.aggregation!r}")
    known_template_fields = {f.name for f in dataclasses.fields(PromptTemplates)}
    unknown = set(cfg.template_overrides) - known_template_fields
    if unknown:
        raise ConfigError(f"templates: unknown fields {sorted(unknown)}")
    return cfg


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return parse_config(payload)
