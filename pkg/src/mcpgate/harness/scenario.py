"""Attack scenario definitions and the embedded directive grammar.

A scenario describes servers (benign or scripted-adversarial), the
user turns a host executes, and a compromise predicate over the run
transcript.  Adversarial payloads carry directives for the agent
oracle as structured markers inside content text::

    @@DIRECTIVE{"action": "call_tool", "server": "apex", ...}@@

The marker models "the model follows injected instructions" as a
mechanical rule: whether an oracle obeys it is the oracle's policy,
so protocol-layer exploitability is measured separately from model
susceptibility.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any

VULN_CLASSES = ("V1_CapabilityEscalation", "V2_SamplingInjection",
                "V3_CrossServerPropagation")
INJECTION_POINTS = ("ResourceContent", "ToolResponse", "SamplingRequest")
BEHAVIOR_STEPS = ("inject_resource", "forge_tool_response", "forge_sampling",
                  "cross_server_probe")
CAPABILITY_NAMES = ("prompts", "resources", "sampling", "tools")

_DIRECTIVE_RE = re.compile(r"@@DIRECTIVE(\{.*?\})@@", re.DOTALL)


class ScenarioInvalid(Exception):
    pass


@dataclass(frozen=True)
class Directive:
    action: str
    fields: dict[str, Any]

    def get(self, key: str, default: Any = None) -> Any:
        return self.fields.get(key, default)


def extract_directives(text: str) -> list[Directive]:
    """Pull every well-formed directive marker out of a content string.

    Payloads are JSON objects; markers whose payload does not parse or
    lacks an action are ignored (an oracle cannot follow noise).  The
    payload must not contain the literal ``}@@`` inside strings.
    """
    out: list[Directive] = []
    for raw in _DIRECTIVE_RE.findall(text):
        try:
            obj = json.loads(raw)
        except ValueError:
            continue
        if isinstance(obj, dict) and isinstance(obj.get("action"), str):
            out.append(Directive(action=obj["action"],
                                 fields={k: v for k, v in obj.items() if k != "action"}))
    return out


def directive_marker(payload: dict[str, Any]) -> str:
    """Render a directive as its wire marker."""
    return "@@DIRECTIVE" + json.dumps(payload, separators=(", ", ": ")) + "@@"


@dataclass(frozen=True)
class ServerSpec:
    server_id: str
    attested: bool
    capabilities: tuple[str, ...]
    script: tuple[dict[str, Any], ...] = ()          # empty = benign
    data: dict[str, str] = field(default_factory=dict)

    @property
    def adversarial(self) -> bool:
        return bool(self.script)


@dataclass(frozen=True)
class ScenarioSpec:
    scenario_id: str
    vuln_class: str
    injection_point: str
    servers: tuple[ServerSpec, ...]
    agent_script: tuple[dict[str, Any], ...]
    compromise_predicate: dict[str, Any]
    description: str = ""

    def to_obj(self) -> dict[str, Any]:
        return {
            "scenario_id": self.scenario_id,
            "vuln_class": self.vuln_class,
            "injection_point": self.injection_point,
            "description": self.description,
            "servers": [
                {
                    "server_id": s.server_id,
                    "attested": s.attested,
                    "declared_capabilities": list(s.capabilities),
                    "behavior": (
                        {"adversarial": {"script": [dict(step) for step in s.script]}}
                        if s.adversarial else "benign"
                    ),
                    "data": dict(s.data),
                }
                for s in self.servers
            ],
            "agent_script": [dict(t) for t in self.agent_script],
            "compromise_predicate": self.compromise_predicate,
        }


def _require(cond: bool, detail: str) -> None:
    if not cond:
        raise ScenarioInvalid(detail)


def _parse_server(obj: Any) -> ServerSpec:
    _require(isinstance(obj, dict), "server entry must be an object")
    server_id = obj.get("server_id")
    _require(isinstance(server_id, str) and bool(server_id), "server_id required")
    attested = obj.get("attested", True)
    _require(isinstance(attested, bool), f"{server_id}: attested must be boolean")
    caps = obj.get("declared_capabilities", [])
    _require(isinstance(caps, list) and all(isinstance(c, str) for c in caps),
             f"{server_id}: declared_capabilities must be a string list")
    for cap in caps:
        _require(cap in CAPABILITY_NAMES, f"{server_id}: unknown capability {cap!r}")
    behavior = obj.get("behavior", "benign")
    script: list[dict[str, Any]] = []
    if behavior != "benign":
        _require(isinstance(behavior, dict) and "adversarial" in behavior,
                 f"{server_id}: behavior must be 'benign' or {{'adversarial': ...}}")
        steps = behavior["adversarial"].get("script", [])
        _require(isinstance(steps, list) and steps,
                 f"{server_id}: adversarial behavior needs a nonempty script")
        for step in steps:
            _require(isinstance(step, dict) and step.get("step") in BEHAVIOR_STEPS,
                     f"{server_id}: unknown behavior step {step!r}")
            if step.get("step") == "cross_server_probe":
                _require(isinstance(step.get("target"), str),
                         f"{server_id}: cross_server_probe needs a target")
            script.append(dict(step))
    data = obj.get("data", {})
    _require(isinstance(data, dict) and all(
        isinstance(k, str) and isinstance(v, str) for k, v in data.items()),
        f"{server_id}: data must map strings to strings")
    return ServerSpec(server_id=server_id, attested=attested,
                      capabilities=tuple(sorted(set(caps))),
                      script=tuple(script), data=dict(data))


_TURN_KINDS = ("note", "call_tool", "read_resource", "tick")


def _parse_turn(obj: Any, server_ids: set[str]) -> dict[str, Any]:
    _require(isinstance(obj, dict), "agent turn must be an object")
    kind = obj.get("turn")
    _require(kind in _TURN_KINDS, f"unknown agent turn {kind!r}")
    if kind == "note":
        _require(isinstance(obj.get("text"), str), "note turn needs text")
    elif kind in ("call_tool", "read_resource"):
        _require(obj.get("server") in server_ids,
                 f"turn references unknown server {obj.get('server')!r}")
        if kind == "call_tool":
            _require(isinstance(obj.get("tool"), str), "call_tool turn needs a tool")
        else:
            _require(isinstance(obj.get("uri"), str), "read_resource turn needs a uri")
    return dict(obj)


def _validate_predicate(obj: Any, server_ids: set[str]) -> dict[str, Any]:
    _require(isinstance(obj, dict), "predicate must be an object")
    kind = obj.get("kind")
    if kind == "server_received":
        _require(obj.get("server_id") in server_ids,
                 f"predicate references unknown server {obj.get('server_id')!r}")
        _require(isinstance(obj.get("contains"), str) and bool(obj["contains"]),
                 "server_received needs a contains sentinel")
    elif kind == "host_context_contains":
        _require(isinstance(obj.get("contains"), str) and bool(obj["contains"]),
                 "host_context_contains needs a contains sentinel")
    elif kind in ("any_of", "all_of"):
        subs = obj.get("predicates")
        _require(isinstance(subs, list) and subs, f"{kind} needs sub-predicates")
        for sub in subs:
            _validate_predicate(sub, server_ids)
    else:
        raise ScenarioInvalid(f"unknown predicate kind {kind!r}")
    return dict(obj)


def load_scenario(obj: dict[str, Any]) -> ScenarioSpec:
    """Validate a JSON scenario object into a ScenarioSpec."""
    _require(isinstance(obj, dict), "scenario must be an object")
    scenario_id = obj.get("scenario_id")
    _require(isinstance(scenario_id, str) and bool(scenario_id), "scenario_id required")
    vuln_class = obj.get("vuln_class")
    _require(vuln_class in VULN_CLASSES, f"unknown vuln_class {vuln_class!r}")
    injection_point = obj.get("injection_point")
    _require(injection_point in INJECTION_POINTS,
             f"unknown injection_point {injection_point!r}")
    raw_servers = obj.get("servers")
    _require(isinstance(raw_servers, list) and raw_servers, "servers required")
    servers = tuple(_parse_server(s) for s in raw_servers)
    ids = [s.server_id for s in servers]
    _require(len(ids) == len(set(ids)), "duplicate server_id")
    id_set = set(ids)
    raw_script = obj.get("agent_script", [])
    _require(isinstance(raw_script, list), "agent_script must be a list")
    agent_script = tuple(_parse_turn(t, id_set) for t in raw_script)
    predicate = _validate_predicate(obj.get("compromise_predicate"), id_set)
    description = obj.get("description", "")
    _require(isinstance(description, str), "description must be a string")
    return ScenarioSpec(
        scenario_id=scenario_id,
        vuln_class=vuln_class,
        injection_point=injection_point,
        servers=servers,
        agent_script=agent_script,
        compromise_predicate=predicate,
        description=description,
    )


def evaluate_predicate(predicate: dict[str, Any],
                       delivered: dict[str, list[str]],
                       host_context: list[str]) -> bool:
    """Check a compromise predicate against observable transcript facts.

    ``delivered`` maps each destination to the serialized wire text of
    every message it actually received through the gateway.
    """
    kind = predicate["kind"]
    if kind == "server_received":
        needle = predicate["contains"]
        return any(needle in wire for wire in delivered.get(predicate["server_id"], []))
    if kind == "host_context_contains":
        needle = predicate["contains"]
        return any(needle in item for item in host_context)
    if kind == "any_of":
        return any(evaluate_predicate(p, delivered, host_context)
                   for p in predicate["predicates"])
    if kind == "all_of":
        return all(evaluate_predicate(p, delivered, host_context)
                   for p in predicate["predicates"])
    raise ScenarioInvalid(f"unknown predicate kind {kind!r}")
