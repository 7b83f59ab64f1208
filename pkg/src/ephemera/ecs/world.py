"""The world program and its client.

Accounts owned by the world program:

world
    ``derive_pda(WORLD_PROGRAM, ["world", world_id])``; data is
    ``u64 world_id || u64 next_entity_id``. Entity ids are handed out
    sequentially and never reused, so the registered set is
    ``range(next_entity_id)``.
component
    ``derive_pda(WORLD_PROGRAM, [world_id, entity_id, schema_id])``; data is
    the component header followed by the schema-encoded values.

Instructions (first byte):

``0 init_world``        ``u64 world_id``; accounts ``[payer, world(w)]``
``1 create_entity``     accounts ``[payer, world(w)]``
``2 attach_component``  ``u64 entity || schema_id || values``; accounts ``[payer, world, component(w)]``
``3 apply_system``      ``system program_id || args``; accounts ``[payer, world, components...]``

``apply_system`` checks every component account against its header, then calls
the system program with the component accounts, so systems can only ever
touch real components of that world.
"""

from __future__ import annotations

import struct
from typing import Iterable, Mapping, Optional, Sequence

from ..address import Address, derive_pda
from ..errors import (
    DuplicateComponent,
    MissingComponent,
    ProgramError,
    UnknownEntity,
    UnknownWorld,
)
from ..execution import AccountMeta, InvokeContext, ProgramRoutine
from .schema import HEADER_LEN, ComponentSchema, split_component

WORLD_PROGRAM = Address.from_label("ephemera/world")

INIT_WORLD = 0
CREATE_ENTITY = 1
ATTACH_COMPONENT = 2
APPLY_SYSTEM = 3

_WORLD = struct.Struct("<QQ")


def world_address(world_id: int) -> Address:
    return derive_pda(WORLD_PROGRAM, ["world", world_id])


def component_address(world_id: int, entity: int, schema: ComponentSchema | bytes) -> Address:
    schema_id = schema.schema_id if isinstance(schema, ComponentSchema) else bytes(schema)
    return derive_pda(WORLD_PROGRAM, [world_id, entity, schema_id])


def decode_world(data: bytes) -> tuple[int, int]:
    """``(world_id, next_entity_id)``."""
    return _WORLD.unpack(data)


def init_world_ix(world_id: int) -> bytes:
    return struct.pack("<BQ", INIT_WORLD, world_id)


def create_entity_ix() -> bytes:
    return bytes([CREATE_ENTITY])


def attach_component_ix(entity: int, schema: ComponentSchema, values: Mapping) -> bytes:
    return struct.pack("<BQ", ATTACH_COMPONENT, entity) + schema.schema_id + schema.encode(values)


def apply_system_ix(system_program: Address, args: bytes = b"") -> bytes:
    return bytes([APPLY_SYSTEM]) + bytes(system_program) + args


def _world_state(view) -> tuple[int, int]:
    if view.owner != WORLD_PROGRAM or len(view.data) != _WORLD.size:
        raise ProgramError("unknown-world")
    return decode_world(view.data)


def _world_program(ctx: InvokeContext) -> None:
    op = ctx.data[0]
    if op == INIT_WORLD:
        (world_id,) = struct.unpack_from("<Q", ctx.data, 1)
        world = ctx.accounts[1]
        if world.address != world_address(world_id):
            raise ProgramError("world-address-mismatch")
        if not world.is_blank:
            raise ProgramError("world-exists")
        world.owner = WORLD_PROGRAM
        world.data = _WORLD.pack(world_id, 0)
        return
    world = ctx.accounts[1]
    world_id, next_id = _world_state(world)
    if op == CREATE_ENTITY:
        world.data = _WORLD.pack(world_id, next_id + 1)
        return
    if op == ATTACH_COMPONENT:
        (entity,) = struct.unpack_from("<Q", ctx.data, 1)
        schema_id = bytes(ctx.data[9:41])
        if len(schema_id) != 32:
            raise ProgramError("invalid-instruction")
        if entity >= next_id:
            raise ProgramError("unknown-entity")
        comp = ctx.accounts[2]
        if comp.address != component_address(world_id, entity, schema_id):
            raise ProgramError("component-address-mismatch")
        if not comp.is_blank:
            raise ProgramError("duplicate-component")
        comp.owner = WORLD_PROGRAM
        comp.data = struct.pack("<QQ", world_id, entity) + schema_id + bytes(ctx.data[41:])
        return
    if op == APPLY_SYSTEM:
        system = Address(bytes(ctx.data[1:33]))
        comps = ctx.accounts[2:]
        for view in comps:
            if view.owner != WORLD_PROGRAM or len(view.data) < HEADER_LEN:
                raise ProgramError("not-a-component")
            w, entity, schema_id, _ = split_component(view.data)
            if w != world_id or view.address != component_address(world_id, entity, schema_id):
                raise ProgramError("component-address-mismatch")
        ctx.invoke(system, bytes(ctx.data[33:]), comps, world_id=world_id)
        return
    raise ProgramError("unknown-instruction")


WORLD_ROUTINE = ProgramRoutine(WORLD_PROGRAM, _world_program, "world")


class World:
    """Client-side handle that turns ECS calls into transactions.

    ``cluster`` is anything with ``send_instruction`` and ``read`` (a
    :class:`~ephemera.cluster.Cluster`). Entity ids are tracked locally so that
    several creations can be queued inside one block.
    """

    def __init__(self, cluster, world_id: int, payer: Address, *, next_entity_id: Optional[int] = None):
        self.cluster = cluster
        self.world_id = world_id
        self.address = world_address(world_id)
        self.payer = Address(payer)
        self._next = next_entity_id
        self._pending_components: set = set()

    @classmethod
    def create(cls, cluster, world_id: int, payer: Address) -> "World":
        """Submit ``init_world``; the handle is usable immediately."""
        cluster.send_instruction(
            payer, WORLD_PROGRAM, [AccountMeta(world_address(world_id), True)], init_world_ix(world_id)
        )
        return cls(cluster, world_id, payer, next_entity_id=0)

    def _exists(self, addr: Address) -> bool:
        if addr in self._pending_components:
            return True
        base = getattr(self.cluster, "base", None)
        if base is not None:
            # Components exist on the base layer whether or not they are delegated.
            return addr in base.accounts
        return self._read([addr]).get(addr) is not None

    def _read(self, addrs):
        _, accounts = self.cluster.read(addrs)
        return accounts

    def next_entity_id(self) -> int:
        if self._next is None:
            acct = self._read([self.address]).get(self.address)
            if acct is None or acct.owner != WORLD_PROGRAM:
                raise UnknownWorld(f"world {self.world_id} does not exist")
            self._next = decode_world(acct.data)[1]
        return self._next

    def entities(self) -> range:
        return range(self.next_entity_id())

    def create_entity(self):
        entity = self.next_entity_id()
        receipt = self.cluster.send_instruction(
            self.payer, WORLD_PROGRAM, [AccountMeta(self.address, True)], create_entity_ix()
        )
        self._next = entity + 1
        return entity, receipt

    def component_address(self, entity: int, schema: ComponentSchema) -> Address:
        return component_address(self.world_id, entity, schema)

    def attach_component(self, entity: int, schema: ComponentSchema, values: Mapping | None = None):
        if entity >= self.next_entity_id() or entity < 0:
            raise UnknownEntity(f"entity {entity} is not registered in world {self.world_id}")
        addr = self.component_address(entity, schema)
        if self._exists(addr):
            raise DuplicateComponent(f"entity {entity} already has {schema.name}")
        receipt = self.cluster.send_instruction(
            self.payer,
            WORLD_PROGRAM,
            [AccountMeta(self.address, False), AccountMeta(addr, True)],
            attach_component_ix(entity, schema, values or {}),
        )
        self._pending_components.add(addr)
        return addr, receipt

    def read_component(self, entity: int, schema: ComponentSchema) -> Optional[dict]:
        addr = self.component_address(entity, schema)
        acct = self._read([addr]).get(addr)
        if acct is None or acct.owner != WORLD_PROGRAM:
            return None
        return schema.decode(split_component(acct.data)[3])

    def system_metas(self, system, entities: Sequence[int], *, check: bool = True) -> list[AccountMeta]:
        """Component metas for ``system`` over ``entities`` (writes writable, reads read-only)."""
        metas = [AccountMeta(self.address, False)]
        addrs = []
        for entity in entities:
            for schema in system.writes:
                addrs.append((self.component_address(entity, schema), True))
            for schema in system.reads:
                if schema in system.writes:
                    continue
                addrs.append((self.component_address(entity, schema), False))
        if check:
            for addr, _ in addrs:
                if not self._exists(addr):
                    raise MissingComponent(f"component {addr.short} does not exist")
        metas += [AccountMeta(a, w) for a, w in addrs]
        return metas

    def run_system(self, system, entities: Iterable[int], args: Mapping | None = None, *, payer: Address | None = None):
        """Build and route one ``apply_system`` transaction; returns the router receipt."""
        entities = list(entities)
        metas = self.system_metas(system, entities)
        data = apply_system_ix(system.program_id, system.encode_args(args or {}))
        return self.cluster.send_instruction(payer or self.payer, WORLD_PROGRAM, metas, data)
