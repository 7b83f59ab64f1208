"""Public registry of component schemas and system records.

The registry is a single base-layer account owned by the registry program at
``derive_pda(REGISTRY_PROGRAM, ["registry"])``. Its data::

    u32 n_schemas || (u32 len || schema layout)* || u32 n_systems || (u32 len || record)*

Record encoding::

    u16 len || name || u32 version || program_id
    || u16 n || read schema ids || u16 n || write schema ids || u16 len || description

Publishing rules, enforced by the program: the system's program must exist,
every schema it touches must already be published, and versions of one name
strictly increase.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Optional

from ..address import Address, derive_pda
from ..errors import ProgramError, UnknownProgram
from ..execution import AccountMeta, InvokeContext, ProgramRoutine
from .schema import ComponentSchema

REGISTRY_PROGRAM = Address.from_label("ephemera/registry")
REGISTRY_ADDRESS = derive_pda(REGISTRY_PROGRAM, ["registry"])

INIT_REGISTRY = 0
PUBLISH_SCHEMA = 1
PUBLISH_SYSTEM = 2

_EMPTY = struct.pack("<II", 0, 0)


@dataclass(frozen=True)
class SystemRecord:
    name: str
    version: int
    program_id: Address
    reads: tuple = ()
    writes: tuple = ()
    description: str = ""

    def __post_init__(self):
        object.__setattr__(self, "reads", tuple(bytes(s) for s in self.reads))
        object.__setattr__(self, "writes", tuple(bytes(s) for s in self.writes))
        object.__setattr__(self, "program_id", Address(self.program_id))

    @classmethod
    def from_system(cls, system, version: Optional[int] = None) -> "SystemRecord":
        return cls(
            system.name,
            system.version if version is None else version,
            system.program_id,
            tuple(s.schema_id for s in system.reads),
            tuple(s.schema_id for s in system.writes),
            system.description,
        )

    @property
    def schema_ids(self) -> frozenset:
        return frozenset(self.reads) | frozenset(self.writes)

    def encode(self) -> bytes:
        name, desc = self.name.encode(), self.description.encode()
        parts = [struct.pack("<H", len(name)), name, struct.pack("<I", self.version), self.program_id]
        for ids in (self.reads, self.writes):
            parts.append(struct.pack("<H", len(ids)))
            parts.extend(ids)
        parts += [struct.pack("<H", len(desc)), desc]
        return b"".join(parts)

    @classmethod
    def decode(cls, buf: bytes) -> "SystemRecord":
        try:
            (n,) = struct.unpack_from("<H", buf, 0)
            pos = 2
            name = buf[pos : pos + n].decode()
            pos += n
            (version,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            program_id = Address(buf[pos : pos + 32])
            pos += 32
            lists = []
            for _ in range(2):
                (k,) = struct.unpack_from("<H", buf, pos)
                pos += 2
                ids = tuple(bytes(buf[pos + 32 * i : pos + 32 * (i + 1)]) for i in range(k))
                if any(len(i) != 32 for i in ids):
                    raise ValueError("truncated schema id")
                lists.append(ids)
                pos += 32 * k
            (d,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            desc = buf[pos : pos + d].decode()
            pos += d
        except (struct.error, UnicodeDecodeError) as exc:
            raise ValueError(f"malformed system record: {exc}") from None
        if pos != len(buf):
            raise ValueError("trailing bytes after system record")
        return cls(name, version, program_id, lists[0], lists[1], desc)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "version": self.version,
            "program_id": self.program_id.hex(),
            "reads": [s.hex() for s in self.reads],
            "writes": [s.hex() for s in self.writes],
            "description": self.description,
        }

    @classmethod
    def from_dict(cls, d) -> "SystemRecord":
        return cls(
            d["name"],
            int(d["version"]),
            Address.from_hex(d["program_id"]),
            tuple(bytes.fromhex(s) for s in d.get("reads", ())),
            tuple(bytes.fromhex(s) for s in d.get("writes", ())),
            d.get("description", ""),
        )


def _blobs(buf: bytes, pos: int) -> tuple[list[bytes], int]:
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    out = []
    for _ in range(n):
        (k,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        out.append(bytes(buf[pos : pos + k]))
        pos += k
    return out, pos


def decode_registry(data: bytes) -> tuple[list[ComponentSchema], list[SystemRecord]]:
    schemas, pos = _blobs(data, 0)
    records, pos = _blobs(data, pos)
    if pos != len(data):
        raise ValueError("trailing bytes in registry")
    return [ComponentSchema.from_layout_bytes(s) for s in schemas], [SystemRecord.decode(r) for r in records]


def encode_registry(schemas: Iterable[ComponentSchema], records: Iterable[SystemRecord]) -> bytes:
    parts = []
    for blobs in ([s.layout_bytes() for s in schemas], [r.encode() for r in records]):
        parts.append(struct.pack("<I", len(blobs)))
        for b in blobs:
            parts += [struct.pack("<I", len(b)), b]
    return b"".join(parts)


def _registry_program(ctx: InvokeContext) -> None:
    op = ctx.data[0]
    reg = ctx.accounts[1]
    if reg.address != REGISTRY_ADDRESS:
        raise ProgramError("registry-address-mismatch")
    if op == INIT_REGISTRY:
        if not reg.is_blank:
            raise ProgramError("registry-exists")
        reg.owner = REGISTRY_PROGRAM
        reg.data = _EMPTY
        return
    if reg.owner != REGISTRY_PROGRAM:
        raise ProgramError("unknown-registry")
    schemas, records = decode_registry(reg.data)
    if op == PUBLISH_SCHEMA:
        schema = ComponentSchema.from_layout_bytes(bytes(ctx.data[1:]))
        if all(s.schema_id != schema.schema_id for s in schemas):
            schemas.append(schema)
    elif op == PUBLISH_SYSTEM:
        record = SystemRecord.decode(bytes(ctx.data[1:]))
        if not ctx.program_exists(record.program_id):
            raise ProgramError("unknown-program")
        known = {s.schema_id for s in schemas}
        if not record.schema_ids <= known:
            raise ProgramError("unknown-schema")
        latest = max((r.version for r in records if r.name == record.name), default=0)
        if record.version <= latest:
            raise ProgramError("version-not-increasing")
        records.append(record)
    else:
        raise ProgramError("unknown-instruction")
    reg.data = encode_registry(schemas, records)


REGISTRY_ROUTINE = ProgramRoutine(REGISTRY_PROGRAM, _registry_program, "registry")


def discover(records: Iterable[SystemRecord], name: Optional[str] = None, schema_ids: Iterable[bytes] = ()) -> list:
    """Records whose name contains ``name`` or that touch any of ``schema_ids``.

    With both criteria a record matching either is returned; with neither, all
    records are. Ordered by name, then newest version first.
    """
    ids = frozenset(bytes(s) for s in schema_ids)
    out = []
    for r in records:
        if name is None and not ids:
            out.append(r)
        elif (name is not None and name in r.name) or (ids and r.schema_ids & ids):
            out.append(r)
    return sorted(out, key=lambda r: (r.name, -r.version))


class Registry:
    """Client for the registry account; all writes are routed transactions."""

    def __init__(self, cluster, payer: Address):
        self.cluster = cluster
        self.payer = Address(payer)

    def _send(self, data: bytes):
        return self.cluster.send_instruction(self.payer, REGISTRY_PROGRAM, [AccountMeta(REGISTRY_ADDRESS, True)], data)

    def init(self):
        return self._send(bytes([INIT_REGISTRY]))

    def publish_schema(self, schema: ComponentSchema):
        return self._send(bytes([PUBLISH_SCHEMA]) + schema.layout_bytes())

    def publish_system(self, record: SystemRecord):
        programs = getattr(self.cluster, "programs", None)
        if programs is not None and record.program_id not in programs:
            raise UnknownProgram(f"system {record.name!r} has no registered program")
        return self._send(bytes([PUBLISH_SYSTEM]) + record.encode())

    def contents(self) -> tuple[list[ComponentSchema], list[SystemRecord]]:
        _, accounts = self.cluster.read([REGISTRY_ADDRESS])
        acct = accounts.get(REGISTRY_ADDRESS)
        if acct is None or acct.owner != REGISTRY_PROGRAM:
            return [], []
        return decode_registry(acct.data)

    def discover_systems(self, name: Optional[str] = None, schema_ids: Iterable[bytes] = ()) -> list[SystemRecord]:
        return discover(self.contents()[1], name, schema_ids)

    def schemas(self) -> list[ComponentSchema]:
        return self.contents()[0]

    def export_records(self) -> dict:
        schemas, records = self.contents()
        return {
            "schemas": [s.layout_bytes().hex() for s in schemas],
            "systems": [r.to_dict() for r in records],
        }


def import_records(doc: dict) -> tuple[list[ComponentSchema], list[SystemRecord]]:
    return (
        [ComponentSchema.from_layout_bytes(bytes.fromhex(s)) for s in doc.get("schemas", ())],
        [SystemRecord.from_dict(r) for r in doc.get("systems", ())],
    )
