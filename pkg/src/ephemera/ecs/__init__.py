"""Entity-component-system layer over accounts and programs."""

from .derived import CLOCK, DERIVED_ENERGY, DerivedComponent, energy_at, read_derived
from .observe import ComponentUpdate, Observer
from .registry import REGISTRY_ADDRESS, REGISTRY_PROGRAM, REGISTRY_ROUTINE, Registry, SystemRecord, discover
from .schema import ComponentSchema, Field, dump_schemas, parse_schemas
from .systems import (
    BUILTIN_SCHEMAS,
    BUILTIN_SYSTEMS,
    CHEST,
    ENERGY,
    ENERGY_RULE,
    ENERGY_TICK,
    MOVEMENT,
    PHYSICS,
    POSITION,
    REWARD,
    VELOCITY,
    SystemDef,
    schema_by_name,
    system_by_name,
)
from .world import WORLD_PROGRAM, WORLD_ROUTINE, World, component_address, world_address

__all__ = [
    "BUILTIN_SCHEMAS",
    "BUILTIN_SYSTEMS",
    "CHEST",
    "CLOCK",
    "ComponentSchema",
    "ComponentUpdate",
    "DERIVED_ENERGY",
    "DerivedComponent",
    "ENERGY",
    "ENERGY_RULE",
    "ENERGY_TICK",
    "Field",
    "MOVEMENT",
    "Observer",
    "PHYSICS",
    "POSITION",
    "REGISTRY_ADDRESS",
    "REGISTRY_PROGRAM",
    "REGISTRY_ROUTINE",
    "REWARD",
    "Registry",
    "SystemDef",
    "SystemRecord",
    "VELOCITY",
    "WORLD_PROGRAM",
    "WORLD_ROUTINE",
    "World",
    "component_address",
    "discover",
    "dump_schemas",
    "energy_at",
    "parse_schemas",
    "read_derived",
    "schema_by_name",
    "system_by_name",
    "world_address",
]
