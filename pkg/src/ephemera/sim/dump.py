"""Base-layer state dumps: a JSON snapshot of every account plus the delegation table."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Union

from ..account import Account, state_hash
from ..address import Address
from ..ecs.registry import REGISTRY_PROGRAM, decode_registry
from ..ecs.schema import HEADER_LEN, ComponentSchema, split_component
from ..ecs.systems import BUILTIN_SCHEMAS
from ..ecs.world import WORLD_PROGRAM, decode_world
from ..errors import EphemeraError

DUMP_VERSION = 1


def state_dump(cluster) -> dict:
    accounts = {a.hex(): acct.encode().hex() for a, acct in sorted(cluster.base.accounts.items())}
    delegated = {a.hex(): er for a, er in sorted(cluster.router.table(refresh=True).items())}
    digest = state_hash({a: acct.encode() for a, acct in cluster.base.accounts.items()}).hex()
    return {
        "version": DUMP_VERSION,
        "now_ms": cluster.now_ms,
        "slot": cluster.base.slot,
        "state_digest": digest,
        "accounts": accounts,
        "delegated": delegated,
    }


def write_state_dump(cluster, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(state_dump(cluster), indent=1, sort_keys=True) + "\n")


def load_state_dump(path: Union[str, Path]) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
        accounts = {Address.from_hex(a): Account.decode(bytes.fromhex(e)) for a, e in doc["accounts"].items()}
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise EphemeraError(f"unreadable state dump {path}: {exc}") from None
    for addr, acct in accounts.items():
        if acct.address != addr:
            raise EphemeraError(f"state dump entry {addr.hex()} encodes account {acct.address.hex()}")
    doc["decoded"] = accounts
    return doc


def _registry_schemas(accounts) -> list[ComponentSchema]:
    for acct in accounts.values():
        if acct.owner == REGISTRY_PROGRAM:
            try:
                return decode_registry(acct.data)[0]
            except ValueError:
                return []
    return []


def describe_dump(doc: dict, extra_schemas: Iterable[ComponentSchema] = ()) -> list[str]:
    """Human-readable lines, decoding worlds and components with every schema we can find."""
    accounts = doc["decoded"]
    by_id = {s.schema_id: s for s in (*BUILTIN_SCHEMAS, *_registry_schemas(accounts), *extra_schemas)}
    digest = state_hash({a: acct.encode() for a, acct in accounts.items()}).hex()
    ok = digest == doc.get("state_digest")
    lines = [
        f"state at {doc.get('now_ms')} ms, slot {doc.get('slot')}: {len(accounts)} accounts",
        f"digest {digest} ({'matches' if ok else 'DOES NOT MATCH'} recorded)",
    ]
    delegated = doc.get("delegated", {})
    for addr, acct in sorted(accounts.items()):
        tag = f" delegated to {delegated[addr.hex()]}" if addr.hex() in delegated else ""
        desc = f"{len(acct.data)} data bytes"
        if acct.executable:
            desc = "program"
        elif acct.owner == WORLD_PROGRAM and len(acct.data) == 16:
            world_id, nxt = decode_world(acct.data)
            desc = f"world {world_id}, {nxt} entities"
        elif acct.owner == WORLD_PROGRAM and len(acct.data) >= HEADER_LEN:
            world_id, entity, schema_id, body = split_component(acct.data)
            schema = by_id.get(schema_id)
            if schema is None:
                desc = f"world {world_id} entity {entity} component {schema_id.hex()[:12]} (unknown schema)"
            else:
                try:
                    values = schema.decode(body)
                    desc = f"world {world_id} entity {entity} {schema.name} {values}"
                except EphemeraError:
                    desc = f"world {world_id} entity {entity} {schema.name} (undecodable)"
        elif acct.owner == REGISTRY_PROGRAM:
            schemas, systems = decode_registry(acct.data)
            desc = f"registry: {len(schemas)} schemas, {len(systems)} systems"
        lines.append(f"{addr.hex()[:16]} bal {acct.balance:>16} {desc}{tag}")
    return lines
