"""Transactions, program routines and the conflict-free batch executor.

The executor is shared by the base layer, every rollup runtime and the
replay verifier. It talks to a *chain view*, any object providing::

    programs                        ProgramRegistry
    load(addr) -> Account | None
    store(account)
    is_blockhash_valid(h) -> bool
    is_writable(addr) -> bool       may this layer mutate the account at all?
    write_rejection(addr, tx, charged_fee) -> str | None
    required_fee(tx) -> int
    charged_fee(tx) -> int
"""

from __future__ import annotations

import hashlib
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Optional, Sequence

from .account import Account
from .address import ADDRESS_LEN, LOADER_PROGRAM, SYSTEM_PROGRAM, Address
from .errors import DuplicateProgram, ProgramError

logger = logging.getLogger(__name__)

OK = "ok"
MAX_CPI_DEPTH = 4


def rejected(reason: str) -> str:
    return f"rejected:{reason}"


def failed(reason: str) -> str:
    return f"failed:{reason}"


def is_included_ok(status: str) -> bool:
    return status == OK


@dataclass(frozen=True)
class AccountMeta:
    address: Address
    writable: bool = False


@dataclass(frozen=True)
class Transaction:
    """A fee-paying program invocation with declared read/write intent.

    Wire layout (little-endian)::

        u16 len || id (utf-8) || fee_payer || recent_blockhash || program_id
        || u16 n_metas || (address || u8 writable)*n || u32 len || data || u64 fee
    """

    id: str
    fee_payer: Address
    recent_blockhash: bytes
    program_id: Address
    metas: tuple[AccountMeta, ...]
    data: bytes = b""
    fee: int = 0

    def __post_init__(self):
        object.__setattr__(self, "metas", tuple(self.metas))
        seen = set()
        for m in self.metas:
            if m.address in seen:
                raise ValueError(f"transaction {self.id}: account listed twice")
            seen.add(m.address)
        if not any(m.address == self.fee_payer and m.writable for m in self.metas):
            raise ValueError(f"transaction {self.id}: fee payer must be a writable meta")
        if len(self.recent_blockhash) != 32:
            raise ValueError("recent_blockhash must be 32 bytes")
        if self.fee < 0:
            raise ValueError("fee must be non-negative")

    @cached_property
    def writable(self) -> frozenset:
        return frozenset(m.address for m in self.metas if m.writable)

    @cached_property
    def readonly(self) -> frozenset:
        return frozenset(m.address for m in self.metas if not m.writable)

    def state_metas(self) -> tuple[AccountMeta, ...]:
        """Metas other than the fee payer; these decide routing."""
        return tuple(m for m in self.metas if m.address != self.fee_payer)

    def encode(self) -> bytes:
        ident = self.id.encode()
        parts = [
            struct.pack("<H", len(ident)),
            ident,
            self.fee_payer,
            bytes(self.recent_blockhash),
            self.program_id,
            struct.pack("<H", len(self.metas)),
        ]
        for m in self.metas:
            parts.append(m.address)
            parts.append(b"\x01" if m.writable else b"\x00")
        parts.append(struct.pack("<I", len(self.data)))
        parts.append(self.data)
        parts.append(struct.pack("<Q", self.fee))
        return b"".join(parts)

    @classmethod
    def decode(cls, buf: bytes) -> "Transaction":
        try:
            (n,) = struct.unpack_from("<H", buf, 0)
            pos = 2
            ident = buf[pos : pos + n].decode()
            pos += n
            fee_payer = Address(buf[pos : pos + ADDRESS_LEN])
            pos += ADDRESS_LEN
            blockhash = bytes(buf[pos : pos + 32])
            pos += 32
            program_id = Address(buf[pos : pos + ADDRESS_LEN])
            pos += ADDRESS_LEN
            (count,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            metas = []
            for _ in range(count):
                addr = Address(buf[pos : pos + ADDRESS_LEN])
                flag = buf[pos + ADDRESS_LEN]
                if flag not in (0, 1):
                    raise ValueError("bad writable flag")
                metas.append(AccountMeta(addr, bool(flag)))
                pos += ADDRESS_LEN + 1
            (dlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            data = bytes(buf[pos : pos + dlen])
            if len(data) != dlen:
                raise ValueError("truncated data")
            pos += dlen
            (fee,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
        except (struct.error, IndexError, UnicodeDecodeError) as exc:
            raise ValueError(f"malformed transaction: {exc}") from exc
        if pos != len(buf):
            raise ValueError("trailing bytes after transaction")
        return cls(ident, fee_payer, blockhash, program_id, tuple(metas), data, fee)

    def digest(self) -> bytes:
        return hashlib.sha256(self.encode()).digest()


class AccountView:
    """Mutable working copy of one account handed to a routine."""

    __slots__ = ("_acct", "writable")

    def __init__(self, acct: Account, writable: bool):
        self._acct = acct
        self.writable = writable

    address = property(lambda self: self._acct.address)
    executable = property(lambda self: self._acct.executable)

    @property
    def owner(self) -> Address:
        return self._acct.owner

    @owner.setter
    def owner(self, value: Address):
        self._acct.owner = Address(value)

    @property
    def balance(self) -> int:
        return self._acct.balance

    @balance.setter
    def balance(self, value: int):
        if value < 0:
            raise ProgramError("insufficient-funds")
        self._acct.balance = value

    @property
    def data(self) -> bytes:
        return self._acct.data

    @data.setter
    def data(self, value: bytes):
        self._acct.data = bytes(value)

    @property
    def is_blank(self) -> bool:
        return self._acct.is_blank

    def __repr__(self) -> str:
        return f"AccountView({self._acct!r}, writable={self.writable})"


class InvokeContext:
    """What a routine sees: instruction data, account views, the clock."""

    def __init__(self, program_id, data, accounts, now_ms, slot, chain, invoked, depth=0):
        self.program_id = program_id
        self.data = data
        self.accounts: list[AccountView] = accounts
        self.now_ms = now_ms
        self.slot = slot
        self._chain = chain
        self._invoked = invoked
        self.depth = depth
        self.extra: dict = {}

    def program_exists(self, program_id: Address) -> bool:
        acct = self._chain.load(program_id)
        return bool(acct and acct.executable and program_id in self._chain.programs)

    def invoke(self, program_id: Address, data: bytes, accounts=None, **extra) -> None:
        """Cross-program call sharing this transaction's account views."""
        if self.depth + 1 > MAX_CPI_DEPTH:
            raise ProgramError("cpi-depth-exceeded")
        if not self.program_exists(program_id):
            raise ProgramError("unknown-program")
        routine = self._chain.programs.get(program_id)
        self._invoked.add(program_id)
        child = InvokeContext(
            program_id,
            data,
            self.accounts if accounts is None else list(accounts),
            self.now_ms,
            self.slot,
            self._chain,
            self._invoked,
            self.depth + 1,
        )
        child.extra.update(extra)
        routine.transition(child)


@dataclass(frozen=True)
class ProgramRoutine:
    program_id: Address
    transition: Callable[[InvokeContext], None]
    name: str = ""


class ProgramRegistry:
    """Routine lookup shared by every layer (same code on base and rollups)."""

    def __init__(self, routines: Iterable[ProgramRoutine] = ()):
        self._routines: dict[Address, ProgramRoutine] = {}
        for r in routines:
            self.add(r)

    def add(self, routine: ProgramRoutine) -> Address:
        if routine.program_id in self._routines:
            raise DuplicateProgram(f"program {routine.name or routine.program_id.short} already registered")
        self._routines[routine.program_id] = routine
        return routine.program_id

    def get(self, program_id: Address) -> ProgramRoutine:
        return self._routines[program_id]

    def __contains__(self, program_id) -> bool:
        return program_id in self._routines

    def __iter__(self):
        return iter(self._routines.values())

    def by_name(self, name: str) -> ProgramRoutine:
        for r in self._routines.values():
            if r.name == name:
                return r
        raise KeyError(name)


def program_account(routine: ProgramRoutine) -> Account:
    return Account(
        routine.program_id,
        owner=LOADER_PROGRAM,
        data=routine.name.encode(),
        executable=True,
    )


def register_program(chain, routine: ProgramRoutine) -> Address:
    """Register ``routine`` and create its executable account on ``chain``."""
    chain.programs.add(routine)
    chain.store(program_account(routine))
    return routine.program_id


def validate_transaction(tx: Transaction, chain) -> Optional[str]:
    """Return ``None`` when ``tx`` may execute on ``chain``, else the reason."""
    if not chain.is_blockhash_valid(tx.recent_blockhash):
        return "expired-blockhash"
    charged = chain.charged_fee(tx)
    for m in tx.metas:
        if m.writable:
            reason = chain.write_rejection(m.address, tx, charged)
            if reason:
                return reason
    prog = chain.load(tx.program_id)
    if prog is None or not prog.executable or tx.program_id not in chain.programs:
        return "unknown-program"
    if tx.fee < chain.required_fee(tx):
        return "insufficient-fee"
    if charged:
        payer = chain.load(tx.fee_payer)
        if payer is None or payer.balance < charged:
            return "insufficient-fee"
    return None


@dataclass
class Outcome:
    tx: Transaction
    status: str
    fee_charged: int = 0
    writes: list = field(default_factory=list)
    loaded: dict = field(default_factory=dict)

    @property
    def id(self) -> str:
        return self.tx.id


def _check_mutations(views, originals, chain, invoked) -> Optional[str]:
    before = after = 0
    for view, orig in zip(views, originals):
        cur = view._acct
        before += orig.balance
        after += cur.balance
        if cur.same_state(orig):
            continue
        if not view.writable or not chain.is_writable(cur.address):
            return "writes-read-only"
        if cur.executable != orig.executable:
            return "illegal-mutation"
        owner = orig.owner
        if cur.owner != orig.owner:
            # Only a blank system account may be claimed by a program.
            if orig.owner != SYSTEM_PROGRAM or orig.data or cur.owner not in invoked:
                return "illegal-owner-change"
            owner = cur.owner
        if cur.data != orig.data and owner not in invoked:
            return "illegal-data-write"
        if cur.balance < orig.balance and orig.owner not in invoked:
            return "illegal-debit"
    if before != after:
        return "balance-not-conserved"
    return None


def execute_one(tx: Transaction, chain, now_ms: int = 0, slot: int = 0) -> Outcome:
    """Validate and run ``tx`` against ``chain`` without storing anything."""
    reason = validate_transaction(tx, chain)
    if reason:
        return Outcome(tx, rejected(reason))
    charged = chain.charged_fee(tx)
    loaded = {}
    originals = []
    views = []
    payer_index = None
    for i, m in enumerate(tx.metas):
        acct = chain.load(m.address)
        loaded[m.address] = acct
        work = acct.copy() if acct is not None else Account(m.address)
        if m.address == tx.fee_payer:
            payer_index = i
            work.balance -= charged
        originals.append(work.copy())
        views.append(AccountView(work, m.writable))

    def fee_only() -> list:
        if not charged:
            return []
        return [originals[payer_index].copy()]

    routine = chain.programs.get(tx.program_id)
    invoked = {tx.program_id}
    ctx = InvokeContext(tx.program_id, tx.data, views, now_ms, slot, chain, invoked)
    try:
        routine.transition(ctx)
    except ProgramError as exc:
        return Outcome(tx, failed(exc.code), charged, fee_only(), loaded)
    except (ValueError, struct.error, IndexError) as exc:
        logger.debug("routine %s raised %r", routine.name, exc)
        return Outcome(tx, failed("invalid-instruction"), charged, fee_only(), loaded)

    violation = _check_mutations(views, originals, chain, invoked)
    if violation:
        return Outcome(tx, failed(violation), charged, fee_only(), loaded)

    writes = []
    for view, m in zip(views, tx.metas):
        cur = view._acct
        prev = loaded[m.address]
        if prev is None:
            if not cur.is_blank:
                writes.append(cur)
        elif not cur.same_state(prev):
            writes.append(cur)
    return Outcome(tx, OK, charged, writes, loaded)


def apply_transaction(tx: Transaction, chain, now_ms: int = 0, slot: int = 0) -> Outcome:
    """Execute one transaction and store its writes immediately."""
    out = execute_one(tx, chain, now_ms, slot)
    for acct in out.writes:
        chain.store(acct)
    return out


@dataclass
class BatchSchedule:
    batches: list  # list[tuple[str, ...]] of transaction ids
    index_batches: list = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.batches)


def schedule_batches(txs: Sequence[Transaction]) -> BatchSchedule:
    """Greedy conflict-free batching in arrival order.

    A transaction lands in the earliest batch that comes after every batch
    holding a conflicting predecessor (write/write or read/write overlap), so
    batches never contain a conflict and conflicting pairs keep their order.
    """
    last_write: dict = {}
    last_read: dict = {}
    index_batches: list[list[int]] = []
    for i, tx in enumerate(txs):
        b = 0
        for a in tx.writable:
            w = last_write.get(a, -1)
            r = last_read.get(a, -1)
            b = max(b, w + 1, r + 1)
        for a in tx.readonly:
            b = max(b, last_write.get(a, -1) + 1)
        if b == len(index_batches):
            index_batches.append([])
        index_batches[b].append(i)
        for a in tx.writable:
            last_write[a] = b
        for a in tx.readonly:
            if last_read.get(a, -1) < b:
                last_read[a] = b
    return BatchSchedule(
        [tuple(txs[i].id for i in batch) for batch in index_batches], index_batches
    )


def run_transactions(
    txs: Sequence[Transaction], chain, now_ms: int = 0, slot: int = 0, workers: int | None = None
) -> list[Outcome]:
    """Execute ``txs`` batch by batch; returns outcomes in input order.

    Members of a batch all run against the state at the start of the batch
    and their writes are stored afterwards, so the result only matches
    sequential execution because batches are conflict-free.
    """
    txs = list(txs)
    schedule = schedule_batches(txs)
    outcomes: list[Optional[Outcome]] = [None] * len(txs)
    pool = ThreadPoolExecutor(max_workers=workers) if workers and workers > 1 else None
    try:
        for batch in schedule.index_batches:
            if pool is not None and len(batch) > 1:
                results = list(pool.map(lambda i: execute_one(txs[i], chain, now_ms, slot), batch))
            else:
                results = [execute_one(txs[i], chain, now_ms, slot) for i in batch]
            for i, out in zip(batch, results):
                outcomes[i] = out
                for acct in out.writes:
                    chain.store(acct)
    finally:
        if pool is not None:
            pool.shutdown()
    return outcomes  # type: ignore[return-value]


def execute_transactions(txs: Sequence[Transaction], chain, now_ms: int = 0, slot: int = 0, workers=None):
    """Execute with the batch scheduler; returns ``[(id, status), ...]``."""
    return [(o.id, o.status) for o in run_transactions(txs, chain, now_ms, slot, workers)]


def execute_sequential(txs: Sequence[Transaction], chain, now_ms: int = 0, slot: int = 0):
    """Strict arrival-order execution, one transaction at a time."""
    return [(o.id, o.status) for o in (apply_transaction(t, chain, now_ms, slot) for t in txs)]
