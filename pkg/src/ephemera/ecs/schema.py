"""Component schemas: field layouts, a fixed-width binary codec, and a small
text format for declaring them.

Schema files hold one section per component::

    # comments and blank lines are ignored
    [Position]
    x = i64 tiles
    y = i64 tiles
    z = i64

    [Badge]
    tag = bytes16
    shiny = bool

Each field line is ``name = type [unit]``. Types are ``i64``, ``u64``,
``f64``, ``bool`` and ``bytesN`` (fixed length ``N``, 1..1024).
"""

from __future__ import annotations

import hashlib
import math
import re
import struct
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Mapping, Union

from ..errors import SchemaError

SCALARS = {"i64": "q", "u64": "Q", "f64": "d", "bool": "?"}
MAX_BYTES_LEN = 1024
_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_BYTES = re.compile(r"^bytes([0-9]+)$")

Value = Union[int, float, bool, bytes]


@dataclass(frozen=True)
class Field:
    name: str
    type: str
    unit: str = ""

    def __post_init__(self):
        if not _NAME.match(self.name):
            raise SchemaError(f"invalid field name {self.name!r}")
        if self.type not in SCALARS:
            m = _BYTES.match(self.type)
            if not m or not 1 <= int(m.group(1)) <= MAX_BYTES_LEN:
                raise SchemaError(f"unknown field type {self.type!r}")
        if self.unit and not re.match(r"^\S+$", self.unit):
            raise SchemaError(f"unit must be a single token, got {self.unit!r}")

    @property
    def struct_code(self) -> str:
        return SCALARS.get(self.type) or f"{self.type[5:]}s"

    def default(self) -> Value:
        if self.type == "bool":
            return False
        if self.type == "f64":
            return 0.0
        if self.type.startswith("bytes"):
            return bytes(int(self.type[5:]))
        return 0

    def check(self, value) -> Value:
        t = self.type
        if t == "bool":
            if not isinstance(value, bool):
                raise SchemaError(f"{self.name}: expected bool")
            return value
        if t == "f64":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise SchemaError(f"{self.name}: expected a number")
            return float(value)
        if t in ("i64", "u64"):
            if isinstance(value, bool) or not isinstance(value, int):
                raise SchemaError(f"{self.name}: expected an integer")
            lo, hi = (-(2**63), 2**63 - 1) if t == "i64" else (0, 2**64 - 1)
            if not lo <= value <= hi:
                raise SchemaError(f"{self.name}: {value} out of range for {t}")
            return value
        n = int(t[5:])
        if isinstance(value, str):
            value = bytes.fromhex(value)
        if not isinstance(value, (bytes, bytearray)) or len(value) != n:
            raise SchemaError(f"{self.name}: expected {n} bytes")
        return bytes(value)


@dataclass(frozen=True)
class ComponentSchema:
    name: str
    fields: tuple

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        if not _NAME.match(self.name):
            raise SchemaError(f"invalid schema name {self.name!r}")
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise SchemaError(f"{self.name}: duplicate field name")

    @classmethod
    def of(cls, name: str, *fields: tuple) -> "ComponentSchema":
        """``ComponentSchema.of("Position", ("x", "i64"), ("y", "i64", "tiles"))``."""
        return cls(name, tuple(Field(*f) for f in fields))

    # immutable; the cached struct cannot be pickled, so copies share the instance
    def __copy__(self):
        return self

    def __deepcopy__(self, memo):
        return self

    def __reduce__(self):
        return (type(self), (self.name, self.fields))

    @cached_property
    def _struct(self) -> struct.Struct:
        return struct.Struct("<" + "".join(f.struct_code for f in self.fields))

    @property
    def size(self) -> int:
        return self._struct.size

    def layout_bytes(self) -> bytes:
        parts = [struct.pack("<H", len(self.name)), self.name.encode(), struct.pack("<H", len(self.fields))]
        for f in self.fields:
            for s in (f.name, f.type, f.unit):
                b = s.encode()
                parts += [struct.pack("<H", len(b)), b]
        return b"".join(parts)

    @classmethod
    def from_layout_bytes(cls, buf: bytes) -> "ComponentSchema":
        pos = 0

        def take_str() -> str:
            nonlocal pos
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            raw = buf[pos : pos + n]
            if len(raw) != n:
                raise SchemaError("truncated schema layout")
            pos += n
            return raw.decode()

        try:
            name = take_str()
            (count,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            fields = [Field(take_str(), take_str(), take_str()) for _ in range(count)]
        except (struct.error, UnicodeDecodeError) as exc:
            raise SchemaError(f"malformed schema layout: {exc}") from None
        if pos != len(buf):
            raise SchemaError("trailing bytes after schema layout")
        return cls(name, tuple(fields))

    @cached_property
    def schema_id(self) -> bytes:
        return hashlib.sha256(b"EPHEMERA_SCHEMA" + self.layout_bytes()).digest()

    def defaults(self) -> dict:
        return {f.name: f.default() for f in self.fields}

    def encode(self, values: Mapping[str, Value]) -> bytes:
        unknown = set(values) - {f.name for f in self.fields}
        if unknown:
            raise SchemaError(f"{self.name}: unknown field(s) {sorted(unknown)}")
        merged = self.defaults()
        merged.update(values)
        return self._struct.pack(*(f.check(merged[f.name]) for f in self.fields))

    def decode(self, data: bytes) -> dict:
        if len(data) != self.size:
            raise SchemaError(f"{self.name}: expected {self.size} bytes, got {len(data)}")
        return dict(zip((f.name for f in self.fields), self._struct.unpack(data)))

    def values_equal(self, a: Mapping, b: Mapping) -> bool:
        """Field-wise equality that treats NaN as equal to NaN (bytewise semantics)."""
        for f in self.fields:
            x, y = a[f.name], b[f.name]
            if f.type == "f64" and isinstance(x, float) and isinstance(y, float):
                if math.isnan(x) and math.isnan(y):
                    continue
            if x != y:
                return False
        return True


def parse_schemas(text: str) -> list[ComponentSchema]:
    schemas: list[ComponentSchema] = []
    name = None
    fields: list[Field] = []
    seen = set()

    def close():
        if name is not None:
            schemas.append(ComponentSchema(name, tuple(fields)))

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            if line.startswith("["):
                if not line.endswith("]"):
                    raise SchemaError("unterminated section header")
                close()
                name = line[1:-1].strip()
                if name in seen:
                    raise SchemaError(f"schema {name!r} defined twice")
                seen.add(name)
                fields = []
                continue
            if name is None:
                raise SchemaError("field outside of a [Schema] section")
            key, sep, rest = line.partition("=")
            if not sep:
                raise SchemaError("expected 'name = type [unit]'")
            parts = rest.split()
            if not 1 <= len(parts) <= 2:
                raise SchemaError("expected 'name = type [unit]'")
            fields.append(Field(key.strip(), parts[0], parts[1] if len(parts) == 2 else ""))
        except SchemaError as exc:
            raise SchemaError(f"line {lineno}: {exc}") from None
    close()
    return schemas


def dump_schemas(schemas: Iterable[ComponentSchema]) -> str:
    out = []
    for s in schemas:
        out.append(f"[{s.name}]")
        for f in s.fields:
            out.append(f"{f.name} = {f.type}" + (f" {f.unit}" if f.unit else ""))
        out.append("")
    return "\n".join(out)


# -- component account data ------------------------------------------------------------
# Component accounts carry a header so a stream consumer can decode them without
# knowing the address derivation: u64 world id || u64 entity id || schema id (32).

HEADER = struct.Struct("<QQ32s")
HEADER_LEN = HEADER.size


def component_data(world_id: int, entity: int, schema: ComponentSchema, values: Mapping[str, Value]) -> bytes:
    return HEADER.pack(world_id, entity, schema.schema_id) + schema.encode(values)


def split_component(data: bytes) -> tuple[int, int, bytes, bytes]:
    if len(data) < HEADER_LEN:
        raise SchemaError("component data shorter than its header")
    world_id, entity, schema_id = HEADER.unpack_from(data)
    return world_id, entity, schema_id, data[HEADER_LEN:]
