"""Systems as programs, plus the built-in component schemas and systems.

A :class:`SystemDef` wraps a plain Python function over decoded component
values into a program routine. The routine is only ever reached through the
world program's ``apply_system`` instruction, which has already checked that
every account it passes is a genuine component of the world.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

from ..address import Address
from ..errors import ProgramError, SchemaError
from ..execution import InvokeContext, ProgramRoutine
from .schema import HEADER_LEN, ComponentSchema, split_component

POSITION = ComponentSchema.of("Position", ("x", "i64", "tiles"), ("y", "i64", "tiles"), ("z", "i64", "tiles"))
VELOCITY = ComponentSchema.of("Velocity", ("dx", "i64", "tiles"), ("dy", "i64", "tiles"), ("dz", "i64", "tiles"))
CHEST = ComponentSchema.of("Chest", ("amount", "u64", "coins"), ("opened", "u64"))
ENERGY = ComponentSchema.of("Energy", ("value", "u64", "points"))
ENERGY_RULE = ComponentSchema.of(
    "EnergyRule", ("base", "u64", "points"), ("rate", "u64", "points"), ("period_ms", "u64", "ms"), ("start_ms", "u64", "ms")
)

BUILTIN_SCHEMAS = (POSITION, VELOCITY, CHEST, ENERGY, ENERGY_RULE)


@dataclass
class EntityRow:
    """Decoded components of one entity, keyed by schema name."""

    entity: int
    values: dict = field(default_factory=dict)
    writable: dict = field(default_factory=dict)

    def __getitem__(self, schema_name: str) -> dict:
        return self.values[schema_name]


@dataclass(frozen=True)
class SystemDef:
    name: str
    reads: tuple
    writes: tuple
    fn: Callable
    args: Optional[ComponentSchema] = None
    description: str = ""
    version: int = 1

    @property
    def program_id(self) -> Address:
        return Address.from_label(f"ephemera/system/{self.name}")

    @property
    def schemas(self) -> tuple:
        return self.writes + tuple(s for s in self.reads if s not in self.writes)

    def encode_args(self, args: Mapping) -> bytes:
        if self.args is None:
            if args:
                raise ProgramError("system takes no arguments")
            return b""
        return self.args.encode(args)

    def _transition(self, ctx: InvokeContext) -> None:
        by_id = {s.schema_id: s for s in self.schemas}
        try:
            args = self.args.decode(ctx.data) if self.args is not None else {}
        except SchemaError:
            raise ProgramError("invalid-instruction") from None
        rows: dict[int, EntityRow] = {}
        slots = []
        for view in ctx.accounts:
            _, entity, schema_id, body = split_component(view.data)
            schema = by_id.get(schema_id)
            if schema is None:
                raise ProgramError("unexpected-component")
            row = rows.get(entity)
            if row is None:
                row = rows[entity] = EntityRow(entity)
            row.values[schema.name] = schema.decode(body)
            row.writable[schema.name] = view.writable
            slots.append((view, row, schema))
        try:
            self.fn(list(rows.values()), args, ctx)
            bodies = [schema.encode(row.values[schema.name]) for _, row, schema in slots]
        except KeyError as exc:
            raise ProgramError("missing-component", f"{self.name}: no {exc} component") from None
        except SchemaError as exc:
            raise ProgramError("invalid-component-value", str(exc)) from None
        for (view, _, _), body in zip(slots, bodies):
            if body != view.data[HEADER_LEN:]:
                view.data = view.data[:HEADER_LEN] + body

    def routine(self) -> ProgramRoutine:
        return ProgramRoutine(self.program_id, self._transition, f"system/{self.name}")


# -- built-in systems ------------------------------------------------------------------

MOVE_ARGS = ComponentSchema.of("MoveArgs", ("dx", "i64"), ("dy", "i64"), ("dz", "i64"))
REWARD_ARGS = ComponentSchema.of("RewardArgs", ("target_x", "i64"), ("target_y", "i64"), ("amount", "u64"))
ENERGY_ARGS = ComponentSchema.of("EnergyArgs", ("rate", "u64"))


def _movement(rows, args, ctx):
    for row in rows:
        pos = row["Position"]
        pos["x"] += args["dx"]
        pos["y"] += args["dy"]
        pos["z"] += args["dz"]


def _reward(rows, args, ctx):
    for row in rows:
        pos = row["Position"]
        if (pos["x"], pos["y"]) != (args["target_x"], args["target_y"]):
            raise ProgramError("not-at-target")
        chest = row["Chest"]
        chest["amount"] = (chest["amount"] + args["amount"]) % (1 << 64)
        chest["opened"] += 1


def _physics(rows, args, ctx):
    for row in rows:
        pos, vel = row["Position"], row["Velocity"]
        pos["x"] += vel["dx"]
        pos["y"] += vel["dy"]
        pos["z"] += vel["dz"]


def _energy_tick(rows, args, ctx):
    for row in rows:
        row["Energy"]["value"] += args["rate"]


MOVEMENT = SystemDef("movement", (), (POSITION,), _movement, MOVE_ARGS, "shift positions by a fixed delta")
REWARD = SystemDef(
    "reward", (POSITION,), (CHEST,), _reward, REWARD_ARGS, "pay into the chest of a player standing on the target cell"
)
PHYSICS = SystemDef("physics", (VELOCITY,), (POSITION,), _physics, None, "advance positions by their velocity")
ENERGY_TICK = SystemDef("energy_tick", (), (ENERGY,), _energy_tick, ENERGY_ARGS, "add a fixed amount of energy")

BUILTIN_SYSTEMS = (MOVEMENT, REWARD, PHYSICS, ENERGY_TICK)


def system_by_name(name: str) -> SystemDef:
    for s in BUILTIN_SYSTEMS:
        if s.name == name:
            return s
    raise KeyError(name)


def schema_by_name(name: str) -> ComponentSchema:
    for s in BUILTIN_SCHEMAS:
        if s.name == name:
            return s
    raise KeyError(name)
