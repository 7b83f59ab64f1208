"""The delegation program (DLP).

Locks base-layer accounts to an ephemeral rollup, accepts optimistic state
commits from the rollup sequencer, and enforces the undelegation rules:
the owner program may release at any time, anyone may once the rollup's
lifetime has passed.

The DLP drives the rollup runtime through a small hook object (``runtime``)
with ``settle``, ``terminate``, ``abort`` and ``release`` methods, and
hands each commit to ``verifier.submit``. Both are wired by the cluster.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

from .account import Account
from .address import Address
from .chain import BASE_FLAT_FEE, BaseChain, SimClock
from .errors import (
    AlreadyDelegated,
    ExecutableAccount,
    ForeignAccount,
    InvalidConfig,
    LifetimeNotExpired,
    NotDelegated,
    NotOwner,
    UnknownAccount,
    UnknownCommit,
    UnknownER,
)
from .execution import AccountMeta

logger = logging.getLogger(__name__)

MIN_BLOCK_TIME_MS = 10
MAX_BLOCK_TIME_MS = 400


@dataclass(frozen=True)
class ERConfig:
    lifetime_ms: int
    commit_frequency_ms: int
    block_time_ms: int = 50
    target_tps: int = 1000
    gasless: bool = True
    tick_interval_ms: Optional[int] = None
    tick_program: Optional[Address] = None
    tick_accounts: tuple = ()
    tick_data: bytes = b""
    refresh_clones_on_commit: bool = False
    flat_fee: int = BASE_FLAT_FEE

    def __post_init__(self):
        object.__setattr__(self, "tick_accounts", tuple(self.tick_accounts))
        for name in ("lifetime_ms", "commit_frequency_ms", "block_time_ms", "target_tps"):
            if getattr(self, name) <= 0:
                raise InvalidConfig(f"{name} must be positive")
        if not MIN_BLOCK_TIME_MS <= self.block_time_ms <= MAX_BLOCK_TIME_MS:
            raise InvalidConfig(f"block_time_ms must be within [{MIN_BLOCK_TIME_MS}, {MAX_BLOCK_TIME_MS}]")
        if self.commit_frequency_ms > self.lifetime_ms:
            raise InvalidConfig("commit_frequency_ms exceeds lifetime_ms")
        if self.block_time_ms > self.commit_frequency_ms:
            raise InvalidConfig("block_time_ms exceeds commit_frequency_ms")
        if (self.tick_interval_ms is None) != (self.tick_program is None):
            raise InvalidConfig("tick_interval_ms and tick_program go together")
        if self.tick_interval_ms is not None and self.tick_interval_ms <= 0:
            raise InvalidConfig("tick_interval_ms must be positive")

    def to_dict(self) -> dict:
        return {
            "lifetime_ms": self.lifetime_ms,
            "commit_frequency_ms": self.commit_frequency_ms,
            "block_time_ms": self.block_time_ms,
            "target_tps": self.target_tps,
            "gasless": self.gasless,
            "tick_interval_ms": self.tick_interval_ms,
            "tick_program": self.tick_program.hex() if self.tick_program else None,
            "tick_accounts": [[m.address.hex(), m.writable] for m in self.tick_accounts],
            "tick_data": self.tick_data.hex(),
            "refresh_clones_on_commit": self.refresh_clones_on_commit,
            "flat_fee": self.flat_fee,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ERConfig":
        d = dict(d)
        if d.get("tick_program"):
            d["tick_program"] = Address.from_hex(d["tick_program"])
        d["tick_accounts"] = tuple(
            AccountMeta(Address.from_hex(a), bool(w)) for a, w in d.get("tick_accounts", ())
        )
        d["tick_data"] = bytes.fromhex(d.get("tick_data", ""))
        return cls(**d)


@dataclass
class DelegationRecord:
    account: Address
    owner_program: Address
    er_id: str
    delegated_at_ms: int
    config: ERConfig
    status: str = "active"  # active | committing | closed
    last_verified_commit: Optional[int] = None
    pre_delegation: bytes = b""


@dataclass
class CommitRecord:
    commit_id: int
    er_id: str
    base_slot: int
    account_states: dict
    log_segment_hash: bytes
    verified: bool = False
    reverted: bool = False
    final: bool = False
    releasing: frozenset = frozenset()

    @property
    def pending(self) -> bool:
        return not self.verified and not self.reverted


@dataclass
class Session:
    """One rollup's worth of delegation state (one ``delegate`` call)."""

    er_id: str
    owner_program: Address
    config: ERConfig
    created_at_ms: int
    accounts: list = field(default_factory=list)
    status: str = "active"
    close_reason: Optional[str] = None
    last_verified_states: dict = field(default_factory=dict)
    last_verified_commit: Optional[int] = None
    commits: list = field(default_factory=list)

    @property
    def expires_at_ms(self) -> int:
        return self.created_at_ms + self.config.lifetime_ms

    @property
    def active(self) -> bool:
        return self.status == "active"

    def pending_commits(self) -> list:
        return [c for c in self.commits if c.pending]


# -- event stream ---------------------------------------------------------


@dataclass(frozen=True)
class ProvisionRequest:
    er_id: str
    config: ERConfig
    accounts: tuple
    timestamp_ms: int


@dataclass(frozen=True)
class AccountsDelegated:
    er_id: str
    accounts: tuple
    timestamp_ms: int


@dataclass(frozen=True)
class AccountsUndelegated:
    er_id: str
    accounts: tuple
    timestamp_ms: int


@dataclass(frozen=True)
class CommitLanded:
    er_id: str
    commit_id: int
    timestamp_ms: int


@dataclass(frozen=True)
class CommitResolved:
    er_id: str
    commit_id: int
    verified: bool
    timestamp_ms: int


@dataclass(frozen=True)
class SessionClosed:
    er_id: str
    reason: str
    timestamp_ms: int


class EventStream:
    """Append-only event log; consumers keep their own cursor."""

    def __init__(self):
        self._events: list = []

    def emit(self, event) -> None:
        self._events.append(event)

    def since(self, cursor: int) -> tuple[list, int]:
        return self._events[cursor:], len(self._events)

    def __len__(self) -> int:
        return len(self._events)

    def __iter__(self):
        return iter(self._events)


class DelegationProgram:
    def __init__(self, base: BaseChain, clock: SimClock):
        self.base = base
        self.clock = clock
        self.records: dict[Address, DelegationRecord] = {}
        self.history: list[DelegationRecord] = []
        self.sessions: dict[str, Session] = {}
        self.commits: dict[int, CommitRecord] = {}
        self.events = EventStream()
        self.runtime = None
        self.verifier = None
        self.commit_listeners: list = []
        self._next_er = 1
        self._next_commit = 1

    # -- queries -----------------------------------------------------------
    def delegation_table(self) -> dict[Address, str]:
        return {addr: rec.er_id for addr, rec in self.records.items()}

    def session(self, er_id: str) -> Session:
        try:
            return self.sessions[er_id]
        except KeyError:
            raise UnknownER(f"unknown rollup {er_id}") from None

    def record_for(self, addr: Address) -> Optional[DelegationRecord]:
        return self.records.get(addr)

    # -- delegation ----------------------------------------------------------
    def _check_delegable(self, owner_program: Address, accounts: Iterable[Address]) -> list:
        checked = []
        for addr in accounts:
            addr = Address(addr)
            acct = self.base.accounts.get(addr)
            if acct is None:
                raise UnknownAccount(f"account {addr.short} does not exist")
            if acct.executable:
                raise ExecutableAccount(f"account {addr.short} is executable")
            if acct.delegated_to is not None or addr in self.records:
                raise AlreadyDelegated(f"account {addr.short} already delegated to {acct.delegated_to}")
            if acct.owner != owner_program:
                raise NotOwner(f"caller does not own {addr.short}")
            if addr in checked:
                raise AlreadyDelegated(f"account {addr.short} listed twice")
            checked.append(addr)
        return checked

    def _lock(self, session: Session, accounts: list, now: int) -> list:
        records = []
        for addr in accounts:
            acct = self.base.accounts[addr]
            enc = acct.encode()
            rec = DelegationRecord(
                addr,
                session.owner_program,
                session.er_id,
                now,
                session.config,
                pre_delegation=enc,
                last_verified_commit=session.last_verified_commit,
            )
            self.records[addr] = rec
            acct.delegated_to = session.er_id
            session.accounts.append(addr)
            session.last_verified_states[addr] = enc
            records.append(rec)
        return records

    def request_provision(self, owner_program: Address, config: ERConfig) -> str:
        """Open a rollup session with no accounts yet (accounts may follow)."""
        now = self.clock.now_ms
        er_id = f"er-{self._next_er}"
        self._next_er += 1
        self.sessions[er_id] = Session(er_id, Address(owner_program), config, now)
        self.events.emit(ProvisionRequest(er_id, config, (), now))
        return er_id

    def delegate(self, owner_program: Address, accounts: Iterable[Address], config: ERConfig) -> list[DelegationRecord]:
        """Lock ``accounts`` to a new rollup and emit its provisioning request."""
        owner_program = Address(owner_program)
        accounts = self._check_delegable(owner_program, accounts)
        now = self.clock.now_ms
        er_id = f"er-{self._next_er}"
        self._next_er += 1
        session = Session(er_id, owner_program, config, now)
        self.sessions[er_id] = session
        records = self._lock(session, accounts, now)
        self.events.emit(ProvisionRequest(er_id, config, tuple(accounts), now))
        return records

    def delegate_accounts(self, owner_program: Address, er_id: str, accounts: Iterable[Address]) -> list[DelegationRecord]:
        """Add accounts to an existing session (before or after provisioning)."""
        session = self.session(er_id)
        if not session.active:
            raise UnknownER(f"rollup {er_id} is closed")
        if Address(owner_program) != session.owner_program:
            raise NotOwner("caller does not own this rollup session")
        accounts = self._check_delegable(session.owner_program, accounts)
        if self.runtime is not None:
            # A commit boundary keeps each log segment's delegated set fixed.
            self.runtime.settle(er_id, frozenset())
            self._flush(er_id)
        now = self.clock.now_ms
        records = self._lock(session, accounts, now)
        self.events.emit(AccountsDelegated(er_id, tuple(accounts), now))
        return records

    # -- commits ---------------------------------------------------------------
    def commit(
        self,
        er_id: str,
        states: Mapping[Address, bytes],
        log_segment_hash: bytes,
        *,
        final: bool = False,
        releasing: Iterable[Address] = (),
    ) -> CommitRecord:
        """Accept a sequencer commit and apply it optimistically to the base layer."""
        session = self.sessions.get(er_id)
        if session is None or not session.active:
            raise UnknownER(f"rollup {er_id} is not active")
        delegated = set(session.accounts)
        for addr in states:
            if addr not in delegated:
                raise ForeignAccount(f"{Address(addr).short} is not delegated to {er_id}")
        record = CommitRecord(
            self._next_commit,
            er_id,
            self.base.slot + 1,
            {Address(a): bytes(e) for a, e in states.items()},
            bytes(log_segment_hash),
            final=final,
            releasing=frozenset(releasing) if not final else frozenset(states),
        )
        self._next_commit += 1
        self._apply_states(er_id, record.account_states)
        session.commits.append(record)
        self.commits[record.commit_id] = record
        self.events.emit(CommitLanded(er_id, record.commit_id, self.clock.now_ms))
        for listener in self.commit_listeners:
            listener(record)
        if self.verifier is not None:
            self.verifier.submit(record)
        return record

    def _apply_states(self, er_id: str, states: Mapping[Address, bytes]) -> None:
        for addr in sorted(states):
            try:
                acct = Account.decode(states[addr])
            except ValueError:
                logger.warning("commit for %s carries an undecodable encoding; not applied", addr.short)
                continue
            if acct.address != addr or acct.executable:
                logger.warning("commit for %s carries an inconsistent encoding; not applied", addr.short)
                continue
            acct.delegated_to = er_id
            self.base.store(acct)

    def _oldest_pending(self, commit_id: int) -> tuple[CommitRecord, Session]:
        rec = self.commits.get(commit_id)
        if rec is None:
            raise UnknownCommit(f"unknown commit {commit_id}")
        session = self.sessions[rec.er_id]
        pending = session.pending_commits()
        if not pending or pending[0] is not rec:
            raise UnknownCommit(f"commit {commit_id} is not the oldest pending commit")
        return rec, session

    def mark_verified(self, commit_id: int) -> CommitRecord:
        rec, session = self._oldest_pending(commit_id)
        rec.verified = True
        session.last_verified_states.update(rec.account_states)
        session.last_verified_commit = rec.commit_id
        for addr in rec.account_states:
            live = self.records.get(addr)
            if live is not None and live.er_id == rec.er_id:
                live.last_verified_commit = rec.commit_id
        self.events.emit(CommitResolved(rec.er_id, commit_id, True, self.clock.now_ms))
        return rec

    def reject_commit(self, commit_id: int) -> CommitRecord:
        """Fraud: revert to the last verified state, stop the rollup, unlock."""
        rec, session = self._oldest_pending(commit_id)
        for c in session.pending_commits():
            c.reverted = True
        for addr in session.accounts:
            acct = Account.decode(session.last_verified_states[addr])
            acct.delegated_to = session.er_id
            self.base.store(acct)
        self.events.emit(CommitResolved(rec.er_id, commit_id, False, self.clock.now_ms))
        if self.runtime is not None:
            self.runtime.abort(session.er_id, "fraud")
        self._close(session, "fraud")
        return rec

    # -- settlement and release ----------------------------------------------------
    def _flush(self, er_id: str) -> None:
        if self.verifier is not None:
            self.verifier.flush(er_id)

    def request_settlement(self, er_id: str) -> Optional[CommitRecord]:
        """Optional state settlement request: commit now rather than at the next period."""
        session = self.session(er_id)
        if not session.active:
            return None
        if self.runtime is not None:
            self.runtime.settle(er_id, frozenset())
        self._flush(er_id)
        return session.commits[-1] if session.commits else None

    def undelegate(self, caller: Address, account: Address, now_ms: int | None = None) -> DelegationRecord:
        now = self.clock.now_ms if now_ms is None else now_ms
        account = Address(account)
        rec = self.records.get(account)
        if rec is None:
            raise NotDelegated(f"{account.short} is not delegated")
        expired = now >= rec.delegated_at_ms + rec.config.lifetime_ms
        if not expired and Address(caller) != rec.owner_program:
            raise LifetimeNotExpired(
                f"{account.short}: lifetime ends at {rec.delegated_at_ms + rec.config.lifetime_ms} ms"
            )
        session = self.sessions[rec.er_id]
        rec.status = "committing"
        if self.runtime is not None:
            self.runtime.settle(rec.er_id, frozenset([account]))
        self._flush(rec.er_id)
        if account not in self.records:
            # Verification failed during settlement; the session is already closed.
            return rec
        self._release(session, [account])
        if self.runtime is not None:
            self.runtime.release(rec.er_id, [account])
        if not session.accounts:
            if self.runtime is not None:
                self.runtime.abort(rec.er_id, "undelegated")
            self._close(session, "undelegated")
        return rec

    def force_close(self, owner_program: Address, er_id: str) -> None:
        session = self.session(er_id)
        if Address(owner_program) != session.owner_program:
            raise NotOwner("only the delegating program may force closure")
        if not session.active:
            return
        if self.runtime is not None:
            self.runtime.terminate(er_id, "force-close")
        self._flush(er_id)
        if session.active:
            self._close(session, "force-close")

    def conclude_session(self, er_id: str, reason: str = "lifetime-expired") -> None:
        """Called by the provisioner once the rollup has produced its final commit."""
        session = self.session(er_id)
        self._flush(er_id)
        if session.active:
            self._close(session, reason)

    def _release(self, session: Session, accounts: list) -> None:
        now = self.clock.now_ms
        for addr in accounts:
            rec = self.records.pop(addr)
            rec.status = "closed"
            self.history.append(rec)
            acct = self.base.accounts.get(addr)
            if acct is not None:
                acct.delegated_to = None
            session.accounts.remove(addr)
        self.events.emit(AccountsUndelegated(session.er_id, tuple(accounts), now))

    def _close(self, session: Session, reason: str) -> None:
        if session.accounts:
            accounts = list(session.accounts)
            self._release(session, accounts)
            if self.runtime is not None:
                self.runtime.release(session.er_id, accounts)
        session.status = "closed"
        session.close_reason = reason
        self.events.emit(SessionClosed(session.er_id, reason, self.clock.now_ms))
