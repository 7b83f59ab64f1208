"""Drive a :class:`~ephemera.sim.scenario.Scenario` through a fresh cluster."""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from ..account import state_hash
from ..address import Address
from ..cluster import Cluster
from ..ecs.registry import Registry, SystemRecord
from ..ecs.systems import system_by_name
from ..ecs.world import WORLD_PROGRAM, World, apply_system_ix, component_address
from ..errors import EphemeraError, ScenarioError
from ..rollup import FraudSpec
from .metrics import MetricsReport, latency_stats
from .scenario import Scenario

logger = logging.getLogger(__name__)

ADMIN_FUNDS = 10**15
PLAYER_FUNDS = 10**12
MAX_DRAIN_STEPS = 10_000


@dataclass(order=True)
class _Event:
    at_ms: int
    phase: int  # rollups launch before workload actions at the same instant
    index: int
    sub: int
    run: Callable = field(compare=False)
    label: str = field(compare=False, default="")


class ScenarioRun:
    def __init__(self, scenario: Scenario, seed: Optional[int] = None):
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        self.rng = random.Random(self.seed)
        self.cluster = Cluster(
            block_time_ms=scenario.base_block_time_ms,
            policy=scenario.policy,
            verification_mode=scenario.verification,
        )
        self.entities = scenario.entity_index()
        self.schemas = scenario.schemas()
        self.worlds: dict[int, World] = {}
        self.rollups: dict[str, str] = {}  # scenario name -> er_id
        self.errors: list[dict] = []
        self.setup_ids: set[str] = set()
        self.admin = Address.from_label(f"scenario/{scenario.name}/admin")
        self.anyone = Address.from_label(f"scenario/{scenario.name}/anyone")

    # -- helpers -----------------------------------------------------------------------
    def payer(self, entity_name: str) -> Address:
        return Address.from_label(f"scenario/{self.scenario.name}/player/{entity_name}")

    def component(self, ref: str) -> Address:
        ent, _, schema = ref.partition(".")
        world_id, entity = self.entities[ent]
        return component_address(world_id, entity, self.schemas[schema])

    def _error(self, at_ms: int, action: str, exc: Exception) -> None:
        code = getattr(exc, "code", type(exc).__name__)
        self.errors.append({"at_ms": at_ms, "action": action, "code": code, "message": str(exc)})
        logger.info("scenario %s: %s at %d ms failed: %s", self.scenario.name, action, at_ms, exc)

    # -- setup -------------------------------------------------------------------------
    def setup(self) -> None:
        """Fund accounts and create registry, worlds, entities and components in one base block."""
        c, s = self.cluster, self.scenario
        c.fund(self.admin, ADMIN_FUNDS)
        for name in self.entities:
            c.fund(self.payer(name), PLAYER_FUNDS)
        before = set(c.submissions)
        registry = Registry(c, self.admin)
        registry.init()
        systems = [system_by_name(n) for n in s.systems]
        published = []
        for sd in systems:
            for schema in sd.schemas:
                if schema not in published:
                    published.append(schema)
        for w in s.worlds:
            for e in w.entities:
                for cname in e.components:
                    if self.schemas[cname] not in published:
                        published.append(self.schemas[cname])
        for schema in published:
            registry.publish_schema(schema)
        for sd in systems:
            registry.publish_system(SystemRecord.from_system(sd))
        for w in s.worlds:
            world = self.worlds[w.id] = World.create(c, w.id, self.admin)
            for e in w.entities:
                entity, _ = world.create_entity()
                for cname, values in e.components.items():
                    world.attach_component(entity, self.schemas[cname], values)
        c.produce_base_block(c.now_ms)
        self.setup_ids = set(c.submissions) - before
        for tx_id in sorted(self.setup_ids):
            sub = c.submissions.pop(tx_id)
            if sub.status != "ok":
                raise ScenarioError(f"setup transaction {tx_id} ended {sub.status}")

    # -- events ------------------------------------------------------------------------
    def _launch(self, spec) -> None:
        s = self.scenario
        config = s.rollup_config(spec)
        if spec.tick is not None:
            sd = system_by_name(spec.tick.system)
            ids = [self.entities[e][1] for e in spec.tick.entities]
            world = self.worlds[self.entities[spec.tick.entities[0]][0]] if spec.tick.entities else next(iter(self.worlds.values()))
            metas = world.system_metas(sd, ids, check=False)
            config = replace(
                config,
                tick_interval_ms=spec.tick.interval_ms,
                tick_program=WORLD_PROGRAM,
                tick_accounts=tuple(metas),
                tick_data=apply_system_ix(sd.program_id, sd.encode_args(spec.tick.args)),
            )
        accounts = [self.component(ref) for ref in spec.delegate]
        self.rollups[spec.name] = self.cluster.delegate(WORLD_PROGRAM, accounts, config)

    def _er(self, name: str) -> str:
        er_id = self.rollups.get(name)
        if er_id is None:
            raise EphemeraError(f"rollup {name!r} has not been launched yet")
        return er_id

    def _run_system(self, sd, entity_names: list, args: dict) -> None:
        if not entity_names:
            return
        world_id = self.entities[entity_names[0]][0]
        ids = []
        for name in entity_names:
            w, e = self.entities[name]
            if w != world_id:
                raise EphemeraError("a system call cannot span worlds")
            ids.append(e)
        self.worlds[world_id].run_system(sd, ids, args, payer=self.payer(entity_names[0]))

    def _walk_step(self, sd, names: list, step: int) -> None:
        for name in names:
            args = {"dx": self.rng.choice((-step, 0, step)), "dy": self.rng.choice((-step, 0, step)), "dz": 0}
            self._run_system(sd, [name], args)

    def _action(self, spec):
        c, p = self.cluster, spec.params
        kind = spec.action
        if kind == "system":
            sd = system_by_name(p["system"])
            return lambda: self._run_system(sd, p["entities"], p["args"])
        if kind == "settle":
            return lambda: c.settle(self._er(p["rollup"]))
        if kind == "force_close":
            return lambda: c.force_close(WORLD_PROGRAM, self._er(p["rollup"]))
        if kind == "inject_fraud":
            return lambda: c.inject_fraud(self._er(p["rollup"]), FraudSpec.random(self.rng))
        if kind == "undelegate":
            caller = WORLD_PROGRAM if p["caller"] == "owner" else self.anyone
            return lambda: c.undelegate(caller, self.component(p["target"]))
        if kind == "advance":
            return lambda: None
        raise ScenarioError(f"unknown action {kind!r}")

    def events(self) -> list[_Event]:
        out = []
        for i, spec in enumerate(self.scenario.rollups):
            out.append(_Event(spec.at_ms, 0, i, 0, lambda spec=spec: self._launch(spec), f"launch {spec.name}"))
        for i, spec in enumerate(self.scenario.workload):
            if spec.action == "random_walk":
                p = spec.params
                sd = system_by_name(p["system"])
                names = list(self.entities) if p["entities"] == "all" else p["entities"]
                if sd.args is None or not {"dx", "dy", "dz"} <= {f.name for f in sd.args.fields}:
                    raise ScenarioError(f"random_walk needs a system taking dx/dy/dz, not {sd.name!r}", line=spec.line)
                for k, t in enumerate(range(spec.at_ms, p["until_ms"], p["every_ms"])):
                    out.append(_Event(t, 1, i, k, lambda sd=sd, names=names, step=p["step"]: self._walk_step(sd, names, step), "random_walk"))
            else:
                out.append(_Event(spec.at_ms, 1, i, 0, self._action(spec), spec.action))
        return sorted(out)

    # -- run ---------------------------------------------------------------------------
    def run(self) -> MetricsReport:
        self.setup()
        c = self.cluster
        for ev in self.events():
            if ev.at_ms > self.scenario.duration_ms:
                break
            c.advance_to(ev.at_ms)
            try:
                ev.run()
            except (EphemeraError, ValueError) as exc:
                self._error(ev.at_ms, ev.label, exc)
        c.advance_to(self.scenario.duration_ms)
        self._drain()
        return self.metrics()

    def _open_submissions(self) -> bool:
        return any(not s.terminal for s in self.cluster.submissions.values())

    def _drain(self) -> None:
        """Let queued transactions land after the scripted horizon."""
        c = self.cluster
        for _ in range(MAX_DRAIN_STEPS):
            if not self._open_submissions():
                return
            c.advance_to(c._next_event())

    def metrics(self) -> MetricsReport:
        c, s = self.cluster, self.scenario
        secs = s.duration_ms / 1000
        m = MetricsReport(s.name, self.seed, s.duration_ms)
        layers: dict[str, dict] = {}
        lat: dict[str, list] = {}
        for sub in c.submissions.values():
            m.routed += 1
            m.routing[sub.decision] = m.routing.get(sub.decision, 0) + 1
            status = sub.status or "rejected:not-included"
            if status.startswith("rejected:"):
                m.rejected += 1
                reason = status.split(":", 1)[1]
                m.rejections[reason] = m.rejections.get(reason, 0) + 1
                continue
            layer = sub.layer
            d = layers.setdefault(layer, {"included": 0, "ok": 0, "failed": 0, "tps": 0.0})
            d["included"] += 1
            d["ok" if status == "ok" else "failed"] += 1
            lat.setdefault(layer, []).append(sub.latency_ms)
            if layer == "base":
                m.base_included += 1
            else:
                m.er_included += 1
        for d in layers.values():
            d["tps"] = round(d["included"] / secs, 3) if secs else 0.0
        m.layers = layers
        m.latency = {layer: latency_stats(xs) for layer, xs in lat.items()}
        m.ticks = c.ticks_included
        commits = list(c.dlp.commits.values())
        m.commits = len(commits)
        m.final_commits = sum(1 for r in commits if r.final)
        m.reverted_commits = sum(1 for r in commits if r.reverted)
        m.fraud = c.verifier.fraud_count
        m.verified = len(c.verifier.verdicts) - m.fraud
        for er_id, sess in sorted(c.dlp.sessions.items()):
            m.sessions[er_id] = {"status": sess.status, "reason": sess.close_reason, "commits": len(sess.commits)}
        m.errors = list(self.errors)
        m.state_digest = state_hash({a: acct.encode() for a, acct in c.base.accounts.items()}).hex()
        return m


def run_scenario(scenario: Scenario, seed: Optional[int] = None) -> MetricsReport:
    return ScenarioRun(scenario, seed).run()
