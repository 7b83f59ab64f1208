"""Components computed from other state and the clock instead of being stored.

Reading a derived component never writes anything. Inputs are read from the
base layer by default, i.e. at their last committed value; pass
``source="latest"`` to read through the router instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

from ..errors import MissingInput
from .schema import ComponentSchema, split_component
from .systems import ENERGY, ENERGY_RULE
from .world import WORLD_PROGRAM, component_address

CLOCK = "clock"


@dataclass(frozen=True)
class DerivedComponent:
    schema: ComponentSchema
    inputs: tuple  # ComponentSchema instances and/or CLOCK
    derive: Callable[[Mapping[str, dict], int], dict]

    @property
    def schema_id(self) -> bytes:
        return self.schema.schema_id


def read_inputs(cluster, world_id: int, entity: int, derived: DerivedComponent, *, source: str = "committed") -> dict:
    values = {}
    for inp in derived.inputs:
        if inp == CLOCK:
            continue
        addr = component_address(world_id, entity, inp)
        if source == "committed":
            acct = cluster.base.get_account(addr)
        else:
            _, got = cluster.read([addr])
            acct = got.get(addr)
        if acct is None or acct.owner != WORLD_PROGRAM:
            raise MissingInput(f"entity {entity} has no {inp.name} component")
        values[inp.name] = inp.decode(split_component(acct.data)[3])
    return values


def read_derived(cluster, world_id: int, entity: int, derived: DerivedComponent, now_ms: int, *, source="committed") -> dict:
    """Evaluate ``derived`` for ``entity`` at ``now_ms``; purely a read."""
    inputs = read_inputs(cluster, world_id, entity, derived, source=source)
    values = derived.derive(inputs, now_ms)
    derived.schema.encode(values)  # same range checks as a stored component
    return values


def energy_at(rule: Mapping, now_ms: int) -> int:
    """``base + rate * whole periods elapsed since start`` (``base`` before start)."""
    elapsed = now_ms - rule["start_ms"]
    if elapsed <= 0 or rule["period_ms"] == 0:
        return rule["base"]
    return rule["base"] + rule["rate"] * (elapsed // rule["period_ms"])


DERIVED_ENERGY = DerivedComponent(
    ENERGY,
    (ENERGY_RULE, CLOCK),
    lambda inputs, now: {"value": energy_at(inputs["EnergyRule"], now)},
)
