"""Ephemeral rollup runtime and its provisioner.

A rollup holds write authority over its delegated accounts for a bounded
lifetime. It produces its own fast blocks, lazily clones any other base-layer
account or program it touches (read-only), fires fee-free ticks at a fixed
cadence, and periodically commits delegated state back through the DLP along
with the log segment that justifies it.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass
from typing import Iterable, Optional

from .account import Account, state_hash
from .address import TICK_AUTHORITY, Address
from .archive import FeeSchedule, LogArchive, LogRecord, LogSegment
from .chain import VALIDITY_WINDOW, BaseChain, Ledger, SimClock
from .delegation import (
    AccountsDelegated,
    CommitRecord,
    DelegationProgram,
    ERConfig,
    ProvisionRequest,
)
from .errors import DuplicateER, RollupNotAlive, UnknownAccount
from .execution import AccountMeta, Outcome, ProgramRegistry, Transaction, rejected

logger = logging.getLogger(__name__)

TERMINATED = rejected("er-terminated")


class RollupLedger(Ledger):
    """Ledger view local to one rollup: writes only to delegated accounts."""

    layer = "er"

    def __init__(self, rollup: "EphemeralRollup", programs, clock, **kw):
        super().__init__(programs, clock, **kw)
        self.rollup = rollup

    def load(self, addr: Address) -> Optional[Account]:
        acct = self.accounts.get(addr)
        if acct is None:
            acct = self.rollup._clone(addr)
        return acct

    def is_writable(self, addr: Address) -> bool:
        return addr in self.rollup.delegated

    def write_rejection(self, addr, tx, charged_fee):
        if addr == tx.fee_payer and charged_fee == 0:
            return None  # no debit happens, so an undelegated payer is fine
        if addr not in self.rollup.delegated:
            return "writes-undelegated"
        return None

    def required_fee(self, tx):
        return self.rollup.fees.required(tx)

    def charged_fee(self, tx):
        return self.rollup.fees.charged(tx)


@dataclass
class TickSchedule:
    interval_ms: int
    program: Address
    next_fire_ms: int
    accounts: tuple = ()
    data: bytes = b""
    fired: int = 0


@dataclass(frozen=True)
class FraudSpec:
    """Corrupt one byte of one claimed encoding in the next commit."""

    account_index: int
    byte_offset: int
    xor_mask: int = 0xFF

    @classmethod
    def random(cls, rng: random.Random) -> "FraudSpec":
        return cls(rng.randrange(1 << 16), rng.randrange(1 << 16), rng.randrange(1, 256))

    def apply(self, states: dict) -> Optional[Address]:
        if not states:
            return None
        addrs = sorted(states)
        addr = addrs[self.account_index % len(addrs)]
        enc = bytearray(states[addr])
        enc[self.byte_offset % len(enc)] ^= self.xor_mask
        states[addr] = bytes(enc)
        return addr


class EphemeralRollup:
    def __init__(
        self,
        er_id: str,
        config: ERConfig,
        *,
        base: BaseChain,
        dlp: DelegationProgram,
        programs: ProgramRegistry,
        archive: LogArchive,
        clock: SimClock,
        started_ms: int,
        expires_at_ms: int,
        validity_window: int = VALIDITY_WINDOW,
    ):
        self.er_id = er_id
        self.config = config
        self.base = base
        self.dlp = dlp
        self.archive = archive
        self.clock = clock
        self.started_ms = started_ms
        self.expires_at_ms = expires_at_ms
        self.fees = FeeSchedule(config.gasless, config.flat_fee)
        self.delegated: set[Address] = set()
        self.cloned: set[Address] = set()
        self.base_reads = 0
        self.alive = True
        self.pending: list[tuple[Transaction, int]] = []
        self.ledger = RollupLedger(
            self,
            programs,
            clock,
            block_time_ms=config.block_time_ms,
            validity_window=validity_window,
            genesis_seed=b"EPHEMERA_ER_GENESIS:" + er_id.encode(),
        )
        self.next_block_ms = started_ms + config.block_time_ms
        self.last_commit_ms = started_ms
        self.last_commit_id: Optional[int] = None
        self.commits: list[CommitRecord] = []
        self.ticks: Optional[TickSchedule] = None
        if config.tick_interval_ms:
            self.ticks = TickSchedule(
                config.tick_interval_ms,
                config.tick_program,
                started_ms + config.tick_interval_ms,
                config.tick_accounts,
                config.tick_data,
            )
        self.fraud: Optional[FraudSpec] = None
        self.termination_reason: Optional[str] = None
        self.drop_listeners: list = []
        archive.open_session(er_id, config.to_dict())
        self.segment = LogSegment(er_id, 0, None, self.fees)

    # -- accounts ------------------------------------------------------------
    @property
    def accounts(self) -> dict:
        return self.ledger.accounts

    def add_accounts(self, addrs: Iterable[Address]) -> None:
        for addr in addrs:
            if addr in self.delegated:
                continue
            acct = self.base.accounts[addr].copy()
            acct.delegated_to = None
            self.ledger.accounts[addr] = acct
            self.cloned.discard(addr)
            self.delegated.add(addr)
            self.segment.added[addr] = acct.encode()

    def release(self, addrs: Iterable[Address]) -> None:
        for addr in addrs:
            self.delegated.discard(addr)
            self.ledger.accounts.pop(addr, None)

    def _clone(self, addr: Address) -> Optional[Account]:
        src = self.base.accounts.get(addr)
        self.base_reads += 1
        if src is None:
            return None
        acct = src.copy()
        acct.delegated_to = None
        self.ledger.accounts[addr] = acct
        self.cloned.add(addr)
        return acct

    def clone_account_on_demand(self, addr: Address) -> Account:
        """Return the local copy, cloning it read-only from the base layer on first use."""
        if not self.alive:
            raise RollupNotAlive(f"{self.er_id} is not alive")
        acct = self.ledger.load(addr)
        if acct is None:
            raise UnknownAccount(f"{addr.short} does not exist on the base layer")
        return acct.copy()

    def read(self, addr: Address) -> Optional[Account]:
        """Client read: local copy if present, else the base value (no cloning side effect)."""
        acct = self.ledger.accounts.get(addr)
        if acct is None:
            return self.base.get_account(addr)
        return acct.copy()

    # -- transactions ------------------------------------------------------------
    def submit(self, tx: Transaction, now_ms: int | None = None) -> None:
        if not self.alive:
            raise RollupNotAlive(f"{self.er_id} is not alive")
        self.pending.append((tx, self.clock.now_ms if now_ms is None else now_ms))

    def _log(self, outcomes: list[Outcome], block) -> None:
        delegated = self.delegated
        for out in outcomes:
            readonly = {
                a: acct.encode()
                for a, acct in out.loaded.items()
                if a not in delegated and acct is not None and not acct.executable
            }
            pre = {a: (out.loaded[a].encode() if out.loaded.get(a) else None) for a in out.tx.writable if a in out.loaded}
            post = dict(pre)
            for acct in out.writes:
                post[acct.address] = acct.encode()
            self.segment.records.append(
                LogRecord(out.tx, out.status, block.slot, block.timestamp_ms, readonly, state_hash(pre), state_hash(post))
            )

    def er_execute(self, txs, now_ms: int | None = None) -> list[tuple[str, str]]:
        """Run ``txs`` as one rollup block and log them in the current segment."""
        if not self.alive:
            raise RollupNotAlive(f"{self.er_id} is not alive")
        now = self.clock.now_ms if now_ms is None else now_ms
        block, outcomes = self.ledger.produce_block_with_outcomes(list(txs), now)
        self._log(outcomes, block)
        return list(block.transaction_results)

    def _due_ticks(self, now: int) -> list[Transaction]:
        out = []
        t = self.ticks
        while t is not None and t.next_fire_ms <= now:
            metas = (AccountMeta(TICK_AUTHORITY, True),) + tuple(t.accounts)
            out.append(
                Transaction(
                    f"{self.er_id}/tick/{t.fired}",
                    TICK_AUTHORITY,
                    self.ledger.tip.hash,
                    t.program,
                    metas,
                    t.data,
                    0,
                )
            )
            t.fired += 1
            t.next_fire_ms += t.interval_ms
        return out

    def tick(self, now_ms: int | None = None):
        """Fire every tick due at ``now_ms`` in a block of its own."""
        now = self.clock.now_ms if now_ms is None else now_ms
        due = self._due_ticks(now)
        if not due:
            return None
        return self.er_execute(due, now)

    def step(self, now: int) -> None:
        """One block boundary: ticks + pending txs, then commit / expiry checks."""
        if not self.alive:
            return
        txs = self._due_ticks(now)
        txs += [tx for tx, _ in self.pending]
        self.pending = []
        self.er_execute(txs, now)
        self.next_block_ms = now + self.config.block_time_ms
        if now - self.last_commit_ms >= self.config.commit_frequency_ms:
            self.produce_commit(now, "periodic")
        if self.alive and now >= self.expires_at_ms:
            self.terminate(now, "lifetime-expired")
            self.dlp.conclude_session(self.er_id, "lifetime-expired")

    # -- settlement ------------------------------------------------------------------
    def produce_commit(
        self, now_ms: int | None = None, reason: str = "settlement", releasing=frozenset(), final: bool = False
    ) -> Optional[CommitRecord]:
        if not self.alive:
            return None
        now = self.clock.now_ms if now_ms is None else now_ms
        if self.pending:
            # Drain in-flight transactions so the commit covers everything accepted.
            txs = [tx for tx, _ in self.pending]
            self.pending = []
            self.er_execute(txs, now)
        seg = self.segment
        seg.delegated = tuple(sorted(self.delegated))
        states = {a: self.ledger.accounts[a].encode() for a in seg.delegated}
        if self.fraud is not None and states:
            corrupted = self.fraud.apply(states)
            logger.info("%s: corrupting commit claim for %s", self.er_id, corrupted.short)
            self.fraud = None
        seg_hash = self.archive.add_segment(seg)
        self.last_commit_ms = now
        record = self.dlp.commit(self.er_id, states, seg_hash, final=final, releasing=releasing)
        seg.commit_id = record.commit_id
        self.archive.add_commit(self.er_id, record.commit_id, seg, seg_hash, states, final)
        self.commits.append(record)
        self.last_commit_id = record.commit_id
        logger.debug("%s: %s commit %d at %d ms", self.er_id, reason, record.commit_id, now)
        if self.alive:
            self.segment = LogSegment(self.er_id, seg.index + 1, record.commit_id, self.fees)
            if self.config.refresh_clones_on_commit:
                for addr in self.cloned:
                    self.ledger.accounts.pop(addr, None)
                self.cloned.clear()
        return record

    def terminate(self, now_ms: int | None = None, reason: str = "terminated") -> Optional[CommitRecord]:
        """Final commit then stop; a second call is a no-op."""
        if not self.alive:
            return None
        record = self.produce_commit(now_ms, reason, final=True)
        if self.alive:
            self.alive = False
            self.termination_reason = reason
        return record

    def abort(self, reason: str) -> list[Transaction]:
        """Stop without committing (fraud, or nothing left delegated)."""
        if not self.alive:
            return []
        self.alive = False
        self.termination_reason = reason
        dropped = [tx for tx, _ in self.pending]
        self.pending = []
        for listener in self.drop_listeners:
            listener(self, dropped)
        return dropped

    def inject_fraud(self, spec: FraudSpec | random.Random | None = None) -> None:
        if spec is None:
            spec = FraudSpec(0, 0)
        elif isinstance(spec, random.Random):
            spec = FraudSpec.random(spec)
        self.fraud = spec


class Provisioner:
    """Watches the DLP event stream and runs one :class:`EphemeralRollup` per session."""

    def __init__(
        self,
        base: BaseChain,
        dlp: DelegationProgram,
        programs: ProgramRegistry,
        archive: LogArchive,
        clock: SimClock,
        validity_window: int = VALIDITY_WINDOW,
    ):
        self.base = base
        self.dlp = dlp
        self.programs = programs
        self.archive = archive
        self.clock = clock
        self.validity_window = validity_window
        self.rollups: dict[str, EphemeralRollup] = {}
        self.listeners: list = []
        self.paused = False
        self._cursor = 0
        dlp.runtime = self

    def poll(self) -> list[EphemeralRollup]:
        if self.paused:
            return []
        events, self._cursor = self.dlp.events.since(self._cursor)
        started = []
        for ev in events:
            if isinstance(ev, ProvisionRequest):
                if ev.er_id not in self.rollups:
                    rollup = self.provision(ev)
                    if rollup is not None:
                        started.append(rollup)
            elif isinstance(ev, AccountsDelegated):
                rollup = self.rollups.get(ev.er_id)
                if rollup is not None and rollup.alive:
                    rollup.add_accounts(ev.accounts)
        return started

    def provision(self, request: ProvisionRequest) -> Optional[EphemeralRollup]:
        if request.er_id in self.rollups:
            raise DuplicateER(f"{request.er_id} already provisioned")
        session = self.dlp.session(request.er_id)
        if not session.active:
            return None
        rollup = EphemeralRollup(
            request.er_id,
            request.config,
            base=self.base,
            dlp=self.dlp,
            programs=self.programs,
            archive=self.archive,
            clock=self.clock,
            started_ms=self.clock.now_ms,
            expires_at_ms=session.expires_at_ms,
            validity_window=self.validity_window,
        )
        # Whatever the DLP holds right now; later delegations arrive as events.
        rollup.add_accounts(list(session.accounts))
        self.rollups[request.er_id] = rollup
        for listener in self.listeners:
            listener(rollup)
        logger.info("provisioned %s (block %d ms)", request.er_id, request.config.block_time_ms)
        return rollup

    def get(self, er_id: str) -> Optional[EphemeralRollup]:
        return self.rollups.get(er_id)

    def alive(self) -> list[EphemeralRollup]:
        return [r for _, r in sorted(self.rollups.items()) if r.alive]

    def next_block_ms(self) -> Optional[int]:
        if self.paused:  # a stalled operator produces nothing, so it schedules nothing
            return None
        times =[r.next_block_ms for r in self.rollups.values() if r.alive]
        return min(times) if times else None

    def step(self, now: int) -> None:
        if self.paused:
            return
        for rollup in self.alive():
            while rollup.alive and rollup.next_block_ms <= now:
                rollup.step(rollup.next_block_ms)

    # -- DLP runtime hooks ----------------------------------------------------------
    def settle(self, er_id: str, releasing) -> None:
        rollup = self.rollups.get(er_id)
        if rollup is not None and rollup.alive and not self.paused:
            rollup.produce_commit(self.clock.now_ms, "undelegate" if releasing else "settlement", releasing)

    def terminate(self, er_id: str, reason: str) -> None:
        rollup = self.rollups.get(er_id)
        if rollup is not None and rollup.alive and not self.paused:
            rollup.terminate(self.clock.now_ms, reason)

    def abort(self, er_id: str, reason: str) -> None:
        rollup = self.rollups.get(er_id)
        if rollup is not None:
            rollup.abort(reason)

    def release(self, er_id: str, accounts) -> None:
        rollup = self.rollups.get(er_id)
        if rollup is not None:
            rollup.release(accounts)
