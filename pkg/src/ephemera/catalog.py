"""The program roster every layer shares."""

from __future__ import annotations

from .ecs.registry import REGISTRY_ROUTINE
from .ecs.systems import BUILTIN_SYSTEMS
from .ecs.world import WORLD_ROUTINE
from .execution import ProgramRegistry
from .programs import COUNTER_ROUTINE, SYSTEM_ROUTINE


def builtin_routines() -> list:
    return [SYSTEM_ROUTINE, COUNTER_ROUTINE, WORLD_ROUTINE, REGISTRY_ROUTINE] + [s.routine() for s in BUILTIN_SYSTEMS]


def default_registry() -> ProgramRegistry:
    return ProgramRegistry(builtin_routines())
