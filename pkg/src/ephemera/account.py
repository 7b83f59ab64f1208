"""Account state cells and their canonical byte encoding.

Canonical encoding (used for hashing, commits and archives)::

    address (32) || owner (32) || u64 balance LE || u8 executable
    || u32 data length LE || data

``delegated_to`` is a base-layer flag, not part of the encoding.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Iterable, Mapping, Optional

from .address import ADDRESS_LEN, SYSTEM_PROGRAM, Address

_HEADER = struct.Struct("<QBI")
_FIXED = 2 * ADDRESS_LEN + _HEADER.size
MAX_BALANCE = 2**64 - 1


class Account:
    __slots__ = ("address", "owner", "balance", "data", "executable", "delegated_to")

    def __init__(
        self,
        address: Address,
        owner: Address = SYSTEM_PROGRAM,
        balance: int = 0,
        data: bytes = b"",
        executable: bool = False,
        delegated_to: Optional[str] = None,
    ):
        if not 0 <= balance <= MAX_BALANCE:
            raise ValueError(f"balance out of range: {balance}")
        self.address = address
        self.owner = owner
        self.balance = balance
        self.data = bytes(data)
        self.executable = executable
        self.delegated_to = delegated_to

    def copy(self) -> "Account":
        new = Account.__new__(Account)
        new.address = self.address
        new.owner = self.owner
        new.balance = self.balance
        new.data = self.data
        new.executable = self.executable
        new.delegated_to = self.delegated_to
        return new

    def encode(self) -> bytes:
        return b"".join(
            (
                self.address,
                self.owner,
                _HEADER.pack(self.balance, 1 if self.executable else 0, len(self.data)),
                self.data,
            )
        )

    @classmethod
    def decode(cls, buf: bytes) -> "Account":
        if len(buf) < _FIXED:
            raise ValueError("account encoding too short")
        balance, executable, length = _HEADER.unpack_from(buf, 2 * ADDRESS_LEN)
        if executable not in (0, 1):
            raise ValueError(f"invalid executable flag {executable}")
        if len(buf) != _FIXED + length:
            raise ValueError("account data length mismatch")
        return cls(
            address=Address(buf[:ADDRESS_LEN]),
            owner=Address(buf[ADDRESS_LEN : 2 * ADDRESS_LEN]),
            balance=balance,
            data=buf[_FIXED:],
            executable=bool(executable),
        )

    def same_state(self, other: "Account") -> bool:
        return (
            self.owner == other.owner
            and self.balance == other.balance
            and self.data == other.data
            and self.executable == other.executable
        )

    @property
    def is_blank(self) -> bool:
        return (
            self.owner == SYSTEM_PROGRAM
            and self.balance == 0
            and not self.data
            and not self.executable
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Account):
            return NotImplemented
        return (
            self.address == other.address
            and self.same_state(other)
            and self.delegated_to == other.delegated_to
        )

    def __repr__(self) -> str:
        flags = " exe" if self.executable else ""
        if self.delegated_to:
            flags += f" delegated_to={self.delegated_to}"
        return (
            f"Account({self.address.short} owner={self.owner.short} "
            f"balance={self.balance} data={len(self.data)}B{flags})"
        )


def state_hash(encodings: Mapping[Address, Optional[bytes]] | Iterable[tuple]) -> bytes:
    """Order-independent digest of a set of account encodings.

    Absent accounts (``None``) hash as a zero-length marker so that
    "missing" and "empty" remain distinct.
    """
    items = encodings.items() if isinstance(encodings, Mapping) else encodings
    h = hashlib.sha256(b"EPHEMERA_STATE")
    for addr, enc in sorted(items, key=lambda kv: bytes(kv[0])):
        h.update(addr)
        if enc is None:
            h.update(b"\x00")
        else:
            h.update(b"\x01" + len(enc).to_bytes(4, "little") + enc)
    return h.digest()
