"""32-byte addresses and program-derived address (PDA) derivation."""

from __future__ import annotations

import hashlib
from typing import Iterable, Union

from .errors import SeedTooLong, TooManySeeds

ADDRESS_LEN = 32
MAX_SEED_LEN = 32
MAX_SEEDS = 16
PDA_DOMAIN = b"EPHEMERA_PDA"
LABEL_DOMAIN = b"EPHEMERA_LABEL"

Seed = Union[bytes, str, int]


class Address(bytes):
    """Opaque 32-byte identifier. Ordering is bytewise, as for ``bytes``."""

    def __new__(cls, value: bytes | bytearray | memoryview) -> "Address":
        if isinstance(value, Address):
            return value
        value = bytes(value)
        if len(value) != ADDRESS_LEN:
            raise ValueError(f"address must be {ADDRESS_LEN} bytes, got {len(value)}")
        return super().__new__(cls, value)

    @classmethod
    def from_hex(cls, text: str) -> "Address":
        return cls(bytes.fromhex(text))

    @classmethod
    def from_label(cls, label: str) -> "Address":
        """Deterministic address for a human-readable name (wallets, program ids)."""
        return cls(hashlib.sha256(LABEL_DOMAIN + label.encode()).digest())

    def __str__(self) -> str:
        return self.hex()

    def __repr__(self) -> str:
        return f"Address({self.hex()[:12]}…)"

    @property
    def short(self) -> str:
        return self.hex()[:8]


def _seed_bytes(seed: Seed) -> bytes:
    if isinstance(seed, str):
        return seed.encode()
    if isinstance(seed, int):
        return seed.to_bytes(8, "little")
    return bytes(seed)


def derive_pda(program_id: Address, seeds: Iterable[Seed]) -> Address:
    """Derive a keyless address owned by ``program_id``.

    Layout hashed with SHA-256::

        "EPHEMERA_PDA" || u8 n_seeds || (u8 len || seed)* || program_id

    ``str`` seeds are UTF-8 encoded and ``int`` seeds become u64 little-endian.
    """
    raw = [_seed_bytes(s) for s in seeds]
    if len(raw) > MAX_SEEDS:
        raise TooManySeeds(f"{len(raw)} seeds, at most {MAX_SEEDS} allowed")
    h = hashlib.sha256()
    h.update(PDA_DOMAIN)
    h.update(bytes([len(raw)]))
    for seed in raw:
        if len(seed) > MAX_SEED_LEN:
            raise SeedTooLong(f"seed of {len(seed)} bytes exceeds {MAX_SEED_LEN}")
        h.update(bytes([len(seed)]))
        h.update(seed)
    h.update(bytes(program_id))
    return Address(h.digest()[:ADDRESS_LEN])


# Well-known identities.
SYSTEM_PROGRAM = Address(bytes(ADDRESS_LEN))
LOADER_PROGRAM = Address.from_label("ephemera/loader")
DELEGATION_PROGRAM = Address.from_label("ephemera/delegation")
TICK_AUTHORITY = Address.from_label("ephemera/tick-authority")
