"""Ledgers: account store, block production and blockhash validity."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

from .account import Account
from .address import Address
from .execution import (
    Outcome,
    ProgramRegistry,
    ProgramRoutine,
    Transaction,
    register_program,
    run_transactions,
    validate_transaction,
)

BASE_BLOCK_TIME_MS = 400
VALIDITY_WINDOW = 150
BASE_FLAT_FEE = 5000


class SimClock:
    """Injected simulated clock; time only moves forward."""

    def __init__(self, now_ms: int = 0):
        self.now_ms = now_ms

    def advance_to(self, t: int) -> int:
        if t < self.now_ms:
            raise ValueError(f"clock cannot move backwards ({t} < {self.now_ms})")
        self.now_ms = t
        return t

    def advance(self, ms: int) -> int:
        return self.advance_to(self.now_ms + ms)


@dataclass(frozen=True)
class ChainClock:
    """Per-layer timing parameters read against a shared :class:`SimClock`."""

    clock: SimClock
    block_time_ms: int = BASE_BLOCK_TIME_MS

    def __post_init__(self):
        if self.block_time_ms <= 0:
            raise ValueError("block_time_ms must be positive")

    @property
    def now_ms(self) -> int:
        return self.clock.now_ms


def encode_results(results: Iterable[tuple[str, str]]) -> bytes:
    results = list(results)
    parts = [struct.pack("<I", len(results))]
    for tx_id, status in results:
        a, b = tx_id.encode(), status.encode()
        parts += [struct.pack("<H", len(a)), a, struct.pack("<H", len(b)), b]
    return b"".join(parts)


def block_hash(parent_hash: bytes, slot: int, results) -> bytes:
    return hashlib.sha256(parent_hash + struct.pack("<Q", slot) + encode_results(results)).digest()


@dataclass(frozen=True)
class Block:
    slot: int
    parent_hash: bytes
    hash: bytes
    timestamp_ms: int
    transaction_results: tuple  # ((tx_id, status), ...)
    fees_burned: int = 0


class Ledger:
    """Account store plus a hash-chained block list.

    Subclasses decide write authority and fees; the block loop is shared.
    """

    layer = "ledger"

    def __init__(
        self,
        programs: ProgramRegistry,
        clock: SimClock,
        *,
        block_time_ms: int = BASE_BLOCK_TIME_MS,
        validity_window: int = VALIDITY_WINDOW,
        genesis_seed: bytes = b"EPHEMERA_GENESIS",
    ):
        self.programs = programs
        self.chain_clock = ChainClock(clock, block_time_ms)
        self.validity_window = validity_window
        self.accounts: dict[Address, Account] = {}
        genesis = hashlib.sha256(genesis_seed).digest()
        self.blocks: list[Block] = [Block(0, bytes(32), genesis, clock.now_ms, ())]
        self._slot_by_hash: dict[bytes, int] = {genesis: 0}
        self.block_listeners: list[Callable[["Ledger", Block, list[Outcome]], None]] = []

    # -- clock -----------------------------------------------------------
    @property
    def clock(self) -> SimClock:
        return self.chain_clock.clock

    @property
    def block_time_ms(self) -> int:
        return self.chain_clock.block_time_ms

    # -- chain view ------------------------------------------------------
    def load(self, addr: Address) -> Optional[Account]:
        return self.accounts.get(addr)

    def store(self, account: Account) -> None:
        self.accounts[account.address] = account

    def is_writable(self, addr: Address) -> bool:
        return True

    def write_rejection(self, addr: Address, tx: Transaction, charged_fee: int) -> Optional[str]:
        return None

    def required_fee(self, tx: Transaction) -> int:
        return 0

    def charged_fee(self, tx: Transaction) -> int:
        return tx.fee

    # -- queries ---------------------------------------------------------
    def get_account(self, addr: Address) -> Optional[Account]:
        acct = self.accounts.get(addr)
        return acct.copy() if acct is not None else None

    def upsert_account(self, account: Account) -> None:
        self.store(account.copy())

    @property
    def tip(self) -> Block:
        return self.blocks[-1]

    @property
    def slot(self) -> int:
        return self.blocks[-1].slot

    def block_at(self, slot: int) -> Block:
        return self.blocks[slot]

    def is_blockhash_valid(self, h: bytes, at_slot: int | None = None) -> bool:
        """True iff ``h`` names one of our blocks at most ``validity_window`` slots old."""
        slot = self._slot_by_hash.get(bytes(h))
        if slot is None:
            return False
        at = self.slot if at_slot is None else at_slot
        return 0 <= at - slot <= self.validity_window

    def register_program(self, routine: ProgramRoutine) -> Address:
        return register_program(self, routine)

    def validate(self, tx: Transaction) -> Optional[str]:
        return validate_transaction(tx, self)

    # -- block production ------------------------------------------------
    def produce_block(self, pending: Sequence[Transaction], now_ms: int | None = None) -> Block:
        """Execute ``pending`` and append one block; invalid txs are included as rejected."""
        block, _ = self.produce_block_with_outcomes(pending, now_ms)
        return block

    def produce_block_with_outcomes(self, pending, now_ms=None):
        now = self.clock.now_ms if now_ms is None else now_ms
        parent = self.tip
        if now < parent.timestamp_ms:
            raise ValueError("block timestamp precedes parent")
        slot = parent.slot + 1
        outcomes = run_transactions(pending, self, now, slot)
        results = tuple((o.id, o.status) for o in outcomes)
        h = block_hash(parent.hash, slot, results)
        block = Block(slot, parent.hash, h, now, results, sum(o.fee_charged for o in outcomes))
        self.blocks.append(block)
        self._slot_by_hash[h] = slot
        for listener in self.block_listeners:
            listener(self, block, outcomes)
        return block, outcomes

    def total_balance(self) -> int:
        return sum(a.balance for a in self.accounts.values())


class BaseChain(Ledger):
    """The base layer: flat fees, and delegated accounts are read-only here."""

    layer = "base"

    def __init__(self, programs: ProgramRegistry, clock: SimClock, *, flat_fee: int = BASE_FLAT_FEE, **kw):
        super().__init__(programs, clock, **kw)
        self.flat_fee = flat_fee

    def write_rejection(self, addr, tx, charged_fee):
        acct = self.accounts.get(addr)
        if acct is not None and acct.delegated_to is not None:
            return "writes-delegated-account"
        return None

    def required_fee(self, tx):
        return self.flat_fee

    def charged_fee(self, tx):
        return tx.fee

    def mint(self, addr: Address, amount: int) -> Account:
        """Genesis-style funding used by scenario setup and tests."""
        acct = self.accounts.get(addr)
        if acct is None:
            acct = Account(addr)
        else:
            acct = acct.copy()
        acct.balance += amount
        self.store(acct)
        return acct
