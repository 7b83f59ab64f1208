"""Observer streams: router subscriptions decoded into component updates."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

from ..account import Account
from ..router import AccountUpdate
from .schema import HEADER_LEN, ComponentSchema, split_component
from .world import WORLD_PROGRAM


@dataclass(frozen=True)
class ComponentUpdate:
    entity: int
    schema: str
    old: Optional[dict]
    new: dict
    source: str
    slot: int
    timestamp_ms: int
    kind: str
    address: bytes


class Observer:
    """Decoded updates for every component of ``world_id`` matching ``schemas``.

    An update whose bytes equal the last value seen for that component (for
    instance the final commit of a value already streamed from the rollup) is
    dropped, so each distinct write shows up once.
    """

    def __init__(self, router, world_id: int, schemas: Iterable[ComponentSchema]):
        self.world_id = world_id
        self.schemas = {s.schema_id: s for s in schemas}
        self._last: dict[bytes, bytes] = {}
        self.subscription = router.subscribe(predicate=self._matches)
        self._router = router

    def _matches(self, update: AccountUpdate) -> bool:
        enc = update.encoding
        # owner sits at bytes 32..64 of the canonical encoding
        if enc[32:64] != WORLD_PROGRAM:
            return False
        data = Account.decode(enc).data
        if len(data) < HEADER_LEN:
            return False
        world_id, _, schema_id, _ = split_component(data)
        return world_id == self.world_id and schema_id in self.schemas

    def poll(self) -> list[ComponentUpdate]:
        out = []
        for upd in self.subscription.poll():
            if self._last.get(upd.address) == upd.encoding:
                continue
            data = Account.decode(upd.encoding).data
            _, entity, schema_id, body = split_component(data)
            schema = self.schemas[schema_id]
            prev = self._last.get(upd.address)
            old = schema.decode(split_component(Account.decode(prev).data)[3]) if prev is not None else None
            self._last[upd.address] = upd.encoding
            out.append(
                ComponentUpdate(
                    entity, schema.name, old, schema.decode(body), upd.source, upd.slot, upd.timestamp_ms, upd.kind, upd.address
                )
            )
        return out

    def close(self) -> None:
        self._router.unsubscribe(self.subscription.id)
