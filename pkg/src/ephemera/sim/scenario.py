"""Scenario files: YAML documents describing setup, rollups and a timed workload.

Top-level keys::

    name, description, seed, duration_ms, base_block_time_ms,
    policy (force-settle | reject), verification (sync | async),
    schema_file (optional, relative to the scenario file),
    systems: [system names],
    worlds: [{id, entities: [{name, components: {Schema: {field: value}}}]}],
    rollups: [{name, at_ms, lifetime_ms, commit_frequency_ms, block_time_ms,
               gasless, refresh_clones_on_commit,
               delegate: ["entity.Schema", ...],
               tick: {interval_ms, system, entities, args}}],
    workload: [{at_ms, action, ...}]

Workload actions: ``system`` (system, entities, args), ``random_walk``
(system, entities or "all", every_ms, until_ms, step), ``settle`` (rollup),
``force_close`` (rollup), ``inject_fraud`` (rollup), ``undelegate`` (target,
caller: owner | anyone) and ``advance`` (a no-op time marker). Actions run
in (time, declaration) order, after every block due at that time.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from ..delegation import ERConfig
from ..ecs.schema import ComponentSchema, parse_schemas
from ..ecs.systems import BUILTIN_SCHEMAS, BUILTIN_SYSTEMS
from ..errors import InvalidConfig, ScenarioError, SchemaError, UnresolvedReference

ACTIONS = ("system", "random_walk", "settle", "force_close", "inject_fraud", "undelegate", "advance")


class _Map(dict):
    """Mapping that remembers the source line of each key."""

    lines: dict
    line: Optional[int] = None


class _LineLoader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node):
    loader.flatten_mapping(node)
    out = _Map()
    out.lines = {}
    out.line = node.start_mark.line + 1
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=True)
        if key in out:
            raise ScenarioError(f"duplicate key {key!r}", line=key_node.start_mark.line + 1, field=str(key))
        out[key] = loader.construct_object(value_node, deep=True)
        out.lines[key] = key_node.start_mark.line + 1
    return out


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def _line(node, key=None) -> Optional[int]:
    if isinstance(node, _Map):
        if key is not None and key in node.lines:
            return node.lines[key]
        return node.line
    return None


@dataclass
class EntitySpec:
    name: str
    components: dict = field(default_factory=dict)  # schema name -> values


@dataclass
class WorldSpec:
    id: int
    entities: list = field(default_factory=list)


@dataclass
class TickSpec:
    interval_ms: int
    system: str
    entities: list = field(default_factory=list)
    args: dict = field(default_factory=dict)


@dataclass
class RollupSpec:
    name: str
    lifetime_ms: int
    commit_frequency_ms: int
    block_time_ms: int = 50
    at_ms: int = 0
    gasless: bool = True
    refresh_clones_on_commit: bool = False
    delegate: list = field(default_factory=list)  # "entity.Schema"
    tick: Optional[TickSpec] = None


@dataclass
class ActionSpec:
    at_ms: int
    action: str
    params: dict = field(default_factory=dict)
    line: Optional[int] = field(default=None, compare=False)


@dataclass
class Scenario:
    name: str
    duration_ms: int
    description: str = ""
    seed: int = 0
    base_block_time_ms: int = 400
    policy: str = "force-settle"
    verification: str = "sync"
    schema_file: Optional[str] = None
    systems: list = field(default_factory=list)
    worlds: list = field(default_factory=list)
    rollups: list = field(default_factory=list)
    workload: list = field(default_factory=list)
    base_dir: Optional[str] = field(default=None, compare=False)
    extra_schemas: list = field(default_factory=list, compare=False, repr=False)

    # -- lookups used by the runner ---------------------------------------------------
    def schemas(self) -> dict[str, ComponentSchema]:
        out = {s.name: s for s in BUILTIN_SCHEMAS}
        out.update({s.name: s for s in self.extra_schemas})
        return out

    def entity_index(self) -> dict[str, tuple[int, int]]:
        """Entity name -> (world id, entity id); ids follow declaration order."""
        out = {}
        for w in self.worlds:
            for i, e in enumerate(w.entities):
                out[e.name] = (w.id, i)
        return out

    def rollup_config(self, spec: RollupSpec) -> ERConfig:
        return ERConfig(
            lifetime_ms=spec.lifetime_ms,
            commit_frequency_ms=spec.commit_frequency_ms,
            block_time_ms=spec.block_time_ms,
            gasless=spec.gasless,
            refresh_clones_on_commit=spec.refresh_clones_on_commit,
        )

    def to_dict(self) -> dict:
        d: dict[str, Any] = {
            "name": self.name,
            "description": self.description,
            "seed": self.seed,
            "duration_ms": self.duration_ms,
            "base_block_time_ms": self.base_block_time_ms,
            "policy": self.policy,
            "verification": self.verification,
        }
        if self.schema_file:
            d["schema_file"] = self.schema_file
        d["systems"] = list(self.systems)
        d["worlds"] = [
            {"id": w.id, "entities": [{"name": e.name, "components": copy.deepcopy(e.components)} for e in w.entities]}
            for w in self.worlds
        ]
        rollups = []
        for r in self.rollups:
            rd = asdict(r)
            if r.tick is None:
                rd.pop("tick")
            rollups.append(rd)
        d["rollups"] = rollups
        d["workload"] = [{"at_ms": a.at_ms, "action": a.action, **copy.deepcopy(a.params)} for a in self.workload]
        return _plain(d)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# -- parsing ----------------------------------------------------------------------------


def _req(node: dict, key: str, typ, where: str):
    if key not in node:
        raise ScenarioError(f"{where}: missing required field", line=_line(node), field=key)
    return _typed(node, key, typ, where)


def _typed(node: dict, key: str, typ, where: str, default=None):
    if key not in node:
        return default
    value = node[key]
    ok = isinstance(value, typ) and not (typ in (int, (int,)) and isinstance(value, bool))
    if not ok:
        name = typ.__name__ if isinstance(typ, type) else "/".join(t.__name__ for t in typ)
        raise ScenarioError(f"{where}: expected {name}, got {type(value).__name__}", line=_line(node, key), field=key)
    return value


def _nonneg(node, key, where, default=None, positive=False):
    v = _typed(node, key, int, where, default)
    if v is not None and (v < 0 or (positive and v == 0)):
        raise ScenarioError(f"{where}: must be {'positive' if positive else 'non-negative'}", line=_line(node, key), field=key)
    return v


def _check_keys(node: dict, allowed: set, where: str):
    for key in node:
        if key not in allowed:
            raise ScenarioError(f"{where}: unknown field", line=_line(node, key), field=str(key))


def _as_map(node, where: str, line=None) -> dict:
    if not isinstance(node, dict):
        raise ScenarioError(f"{where}: expected a mapping", line=line)
    return node


def _as_list(node, key, where) -> list:
    value = node.get(key, [])
    if value is None:
        return []
    if not isinstance(value, list):
        raise ScenarioError(f"{where}: expected a list", line=_line(node, key), field=key)
    return value


_TOP = {
    "name", "description", "seed", "duration_ms", "base_block_time_ms", "policy", "verification",
    "schema_file", "systems", "worlds", "rollups", "workload",
}
_ROLLUP = {
    "name", "at_ms", "lifetime_ms", "commit_frequency_ms", "block_time_ms", "gasless",
    "refresh_clones_on_commit", "delegate", "tick",
}
_ACTION_FIELDS = {
    "system": {"system", "entities", "args"},
    "random_walk": {"system", "entities", "every_ms", "until_ms", "step"},
    "settle": {"rollup"},
    "force_close": {"rollup"},
    "inject_fraud": {"rollup"},
    "undelegate": {"target", "caller"},
    "advance": set(),
}


def parse_scenario(doc, base_dir: Optional[str] = None) -> Scenario:
    top = _as_map(doc, "scenario", 1)
    _check_keys(top, _TOP, "scenario")
    s = Scenario(
        name=_req(top, "name", str, "scenario"),
        duration_ms=_nonneg(top, "duration_ms", "scenario", None),
        description=_typed(top, "description", str, "scenario", ""),
        seed=_typed(top, "seed", int, "scenario", 0),
        base_block_time_ms=_nonneg(top, "base_block_time_ms", "scenario", 400, positive=True),
        policy=_typed(top, "policy", str, "scenario", "force-settle"),
        verification=_typed(top, "verification", str, "scenario", "sync"),
        schema_file=_typed(top, "schema_file", str, "scenario", None),
        base_dir=base_dir,
    )
    if s.duration_ms is None:
        raise ScenarioError("scenario: missing required field", line=_line(top), field="duration_ms")
    if s.policy not in ("force-settle", "reject"):
        raise ScenarioError("policy must be force-settle or reject", line=_line(top, "policy"), field="policy")
    if s.verification not in ("sync", "async"):
        raise ScenarioError("verification must be sync or async", line=_line(top, "verification"), field="verification")
    if s.schema_file:
        path = Path(base_dir or ".") / s.schema_file
        try:
            s.extra_schemas = parse_schemas(path.read_text())
        except OSError as exc:
            raise UnresolvedReference(f"cannot read schema file: {exc}", line=_line(top, "schema_file"), field="schema_file")
        except SchemaError as exc:
            raise ScenarioError(f"schema file: {exc}", line=_line(top, "schema_file"), field="schema_file")

    known_systems = {sd.name for sd in BUILTIN_SYSTEMS}
    for name in _as_list(top, "systems", "systems"):
        if not isinstance(name, str) or name not in known_systems:
            raise UnresolvedReference(f"unknown system {name!r}", line=_line(top, "systems"), field="systems")
        s.systems.append(name)
    schemas = s.schemas()

    seen_entities = set()
    seen_worlds = set()
    for wnode in _as_list(top, "worlds", "worlds"):
        wnode = _as_map(wnode, "world", _line(top, "worlds"))
        _check_keys(wnode, {"id", "entities"}, "world")
        wid = _req(wnode, "id", int, "world")
        if wid < 0 or wid in seen_worlds:
            raise ScenarioError("world id must be unique and non-negative", line=_line(wnode, "id"), field="id")
        seen_worlds.add(wid)
        world = WorldSpec(wid)
        for enode in _as_list(wnode, "entities", "world"):
            enode = _as_map(enode, "entity", _line(wnode, "entities"))
            _check_keys(enode, {"name", "components"}, "entity")
            name = _req(enode, "name", str, "entity")
            if name in seen_entities:
                raise ScenarioError(f"entity {name!r} declared twice", line=_line(enode, "name"), field="name")
            seen_entities.add(name)
            comps = _typed(enode, "components", dict, "entity", {}) or {}
            ent = EntitySpec(name)
            for cname, values in comps.items():
                line = _line(comps, cname)
                if cname not in schemas:
                    raise UnresolvedReference(f"unknown schema {cname!r}", line=line, field=f"{name}.components")
                values = dict(values or {})
                try:
                    schemas[cname].encode(values)
                except SchemaError as exc:
                    raise ScenarioError(str(exc), line=line, field=f"{name}.components.{cname}") from None
                ent.components[cname] = values
            world.entities.append(ent)
        s.worlds.append(world)

    entities = s.entity_index()
    system_names = set(s.systems)

    def check_entities(node, key, where, allow_all=False) -> list:
        value = node.get(key, [])
        if allow_all and value == "all":
            return "all"
        if not isinstance(value, list):
            raise ScenarioError(f"{where}: expected a list of entity names", line=_line(node, key), field=key)
        for e in value:
            if e not in entities:
                raise UnresolvedReference(f"unknown entity {e!r}", line=_line(node, key), field=key)
        return list(value)

    def check_system(node, where) -> str:
        name = _req(node, "system", str, where)
        if name not in system_names:
            raise UnresolvedReference(
                f"system {name!r} is not in the scenario's systems roster", line=_line(node, "system"), field="system"
            )
        return name

    rollup_names = set()
    for rnode in _as_list(top, "rollups", "rollups"):
        rnode = _as_map(rnode, "rollup", _line(top, "rollups"))
        _check_keys(rnode, _ROLLUP, "rollup")
        spec = RollupSpec(
            name=_req(rnode, "name", str, "rollup"),
            lifetime_ms=_nonneg(rnode, "lifetime_ms", "rollup", None, positive=True),
            commit_frequency_ms=_nonneg(rnode, "commit_frequency_ms", "rollup", None, positive=True),
            block_time_ms=_nonneg(rnode, "block_time_ms", "rollup", 50, positive=True),
            at_ms=_nonneg(rnode, "at_ms", "rollup", 0),
            gasless=_typed(rnode, "gasless", bool, "rollup", True),
            refresh_clones_on_commit=_typed(rnode, "refresh_clones_on_commit", bool, "rollup", False),
        )
        for key in ("lifetime_ms", "commit_frequency_ms"):
            if getattr(spec, key) is None:
                raise ScenarioError("rollup: missing required field", line=_line(rnode), field=key)
        if spec.name in rollup_names:
            raise ScenarioError(f"rollup {spec.name!r} declared twice", line=_line(rnode, "name"), field="name")
        rollup_names.add(spec.name)
        try:
            s.rollup_config(spec)
        except InvalidConfig as exc:
            raise ScenarioError(str(exc), line=_line(rnode), field=spec.name) from None
        for ref in _as_list(rnode, "delegate", "rollup"):
            _component_ref(ref, entities, schemas, _line(rnode, "delegate"))
            spec.delegate.append(ref)
        if "tick" in rnode:
            tnode = _as_map(rnode["tick"], "tick", _line(rnode, "tick"))
            _check_keys(tnode, {"interval_ms", "system", "entities", "args"}, "tick")
            spec.tick = TickSpec(
                interval_ms=_nonneg(tnode, "interval_ms", "tick", None, positive=True),
                system=check_system(tnode, "tick"),
                entities=check_entities(tnode, "entities", "tick"),
                args=dict(_typed(tnode, "args", dict, "tick", {}) or {}),
            )
            if spec.tick.interval_ms is None:
                raise ScenarioError("tick: missing required field", line=_line(tnode), field="interval_ms")
        s.rollups.append(spec)

    for anode in _as_list(top, "workload", "workload"):
        anode = _as_map(anode, "action", _line(top, "workload"))
        kind = _req(anode, "action", str, "action")
        if kind not in ACTIONS:
            raise ScenarioError(f"unknown action {kind!r}", line=_line(anode, "action"), field="action")
        _check_keys(anode, {"at_ms", "action"} | _ACTION_FIELDS[kind], f"{kind} action")
        at = _nonneg(anode, "at_ms", kind, None)
        if at is None:
            raise ScenarioError(f"{kind}: missing required field", line=_line(anode), field="at_ms")
        params: dict[str, Any] = {}
        if kind in ("system", "random_walk"):
            params["system"] = check_system(anode, kind)
            params["entities"] = check_entities(anode, "entities", kind, allow_all=kind == "random_walk")
        if kind == "system":
            params["args"] = dict(_typed(anode, "args", dict, kind, {}) or {})
        if kind == "random_walk":
            params["every_ms"] = _nonneg(anode, "every_ms", kind, None, positive=True)
            params["until_ms"] = _nonneg(anode, "until_ms", kind, s.duration_ms)
            params["step"] = _nonneg(anode, "step", kind, 1)
            if params["every_ms"] is None:
                raise ScenarioError(f"{kind}: missing required field", line=_line(anode), field="every_ms")
        if kind in ("settle", "force_close", "inject_fraud"):
            params["rollup"] = _req(anode, "rollup", str, kind)
            if params["rollup"] not in rollup_names:
                raise UnresolvedReference(
                    f"unknown rollup {params['rollup']!r}", line=_line(anode, "rollup"), field="rollup"
                )
        if kind == "undelegate":
            target = _req(anode, "target", str, kind)
            _component_ref(target, entities, schemas, _line(anode, "target"))
            params["target"] = target
            params["caller"] = _typed(anode, "caller", str, kind, "owner")
            if params["caller"] not in ("owner", "anyone"):
                raise ScenarioError("caller must be owner or anyone", line=_line(anode, "caller"), field="caller")
        s.workload.append(ActionSpec(at, kind, params, _line(anode)))
    return s


def _component_ref(ref, entities, schemas, line):
    if not isinstance(ref, str) or "." not in ref:
        raise ScenarioError(f"expected 'entity.Schema', got {ref!r}", line=line, field="delegate")
    ent, _, schema = ref.partition(".")
    if ent not in entities:
        raise UnresolvedReference(f"unknown entity {ent!r}", line=line, field=ref)
    if schema not in schemas:
        raise UnresolvedReference(f"unknown schema {schema!r}", line=line, field=ref)


def loads_scenario(text: str, base_dir: Optional[str] = None) -> Scenario:
    try:
        doc = yaml.load(text, Loader=_LineLoader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        raise ScenarioError(str(exc.problem or exc), line=mark.line + 1 if mark else None) from None
    except yaml.YAMLError as exc:
        raise ScenarioError(str(exc)) from None
    return parse_scenario(doc, base_dir)


def load_scenario(path: Union[str, Path]) -> Scenario:
    """Load ``path``; a bare name such as ``fig1_reward`` selects a bundled scenario."""
    p = Path(path)
    if not p.exists():
        bundled = bundled_path(str(path))
        if bundled is None:
            raise ScenarioError(f"scenario file not found: {path}")
        p = bundled
    return loads_scenario(p.read_text(), str(p.parent))


def dumps_scenario(s: Scenario) -> str:
    return yaml.safe_dump(s.to_dict(), sort_keys=False)


def bundled_dir() -> Path:
    return Path(__file__).resolve().parent.parent / "scenarios"


def bundled_path(name: str) -> Optional[Path]:
    stem = name[:-5] if name.endswith(".yaml") else name
    p = bundled_dir() / f"{stem}.yaml"
    return p if p.exists() else None


def bundled_scenarios() -> list[str]:
    return sorted(p.stem for p in bundled_dir().glob("*.yaml"))
