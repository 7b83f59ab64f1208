"""Commit verification by deterministic re-execution.

``verify_commit`` is pure: it replays a log segment from the previous
verified state and compares the outcome with the sequencer's claim. The
:class:`Verifier` wires verdicts back into the DLP, either synchronously on
every commit or through a queue that is drained on demand.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Mapping, Optional, Union

from .account import Account, state_hash
from .address import Address
from .archive import ArchivedSession, LogArchive, LogSegment, read_archive
from .errors import UnknownCommit
from .execution import ProgramRegistry, execute_one, program_account, rejected

logger = logging.getLogger(__name__)

SKIPPED_STATUS = rejected("expired-blockhash")


@dataclass(frozen=True)
class Mismatch:
    address: Optional[Address]
    expected: Optional[bytes]
    claimed: Optional[bytes]
    reason: str = "state-mismatch"


@dataclass(frozen=True)
class VerificationVerdict:
    commit_id: Optional[int]
    mismatch: Optional[Mismatch] = None

    @property
    def verified(self) -> bool:
        return self.mismatch is None

    @property
    def outcome(self) -> str:
        return "verified" if self.mismatch is None else "fraud"

    def to_dict(self) -> dict:
        d = {"commit_id": self.commit_id, "outcome": self.outcome}
        if self.mismatch is not None:
            m = self.mismatch
            d.update(
                reason=m.reason,
                address=m.address.hex() if m.address is not None else None,
                expected=m.expected.hex() if m.expected is not None else None,
                claimed=m.claimed.hex() if m.claimed is not None else None,
            )
        return d


class ReplayChain:
    """Chain view for replay: delegated state plus per-record read-only snapshots."""

    def __init__(self, programs: ProgramRegistry, segment: LogSegment, state: dict):
        self.programs = programs
        self.fees = segment.fees
        self.delegated = frozenset(segment.delegated)
        self.state = state
        self.snapshot: Mapping[Address, bytes] = {}
        self._program_accounts = {}

    def load(self, addr):
        acct = self.state.get(addr)
        if acct is not None:
            return acct
        enc = self.snapshot.get(addr)
        if enc is not None:
            return Account.decode(enc)
        if addr in self.programs:
            acct = self._program_accounts.get(addr)
            if acct is None:
                acct = self._program_accounts[addr] = program_account(self.programs.get(addr))
            return acct
        return None

    def store(self, account):
        self.state[account.address] = account

    def is_blockhash_valid(self, h, at_slot=None):
        # Records rejected for an expired blockhash are skipped, so every
        # replayed transaction saw a valid one.
        return True

    def is_writable(self, addr):
        return addr in self.delegated

    def write_rejection(self, addr, tx, charged_fee):
        if addr == tx.fee_payer and charged_fee == 0:
            return None
        return None if addr in self.delegated else "writes-undelegated"

    def required_fee(self, tx):
        return self.fees.required(tx)

    def charged_fee(self, tx):
        return self.fees.charged(tx)


def replay_segment(
    prev_state: Mapping[Address, bytes], segment: LogSegment, programs: ProgramRegistry
) -> tuple[dict, Optional[Mismatch]]:
    """Re-execute ``segment`` sequentially from ``prev_state``.

    Returns the replayed encodings of the segment's delegated accounts and the
    first per-record divergence found (status or state hash), if any.
    """
    delegated = set(segment.delegated)
    state: dict[Address, Account] = {}
    for addr, enc in prev_state.items():
        # Accounts released earlier are read-only clones from here on.
        if addr in delegated:
            state[Address(addr)] = Account.decode(enc)
    for addr, enc in segment.added.items():
        state[Address(addr)] = Account.decode(enc)
    chain = ReplayChain(programs, segment, state)
    divergence = None
    for i, rec in enumerate(segment.records):
        if rec.status == SKIPPED_STATUS:
            continue
        chain.snapshot = rec.readonly
        out = execute_one(rec.tx, chain, rec.timestamp_ms, rec.slot)
        if out.status != rec.status and divergence is None:
            divergence = Mismatch(None, out.status.encode(), rec.status.encode(), f"status-mismatch@{i}")
        if out.loaded:
            pre = {a: (out.loaded[a].encode() if out.loaded.get(a) else None) for a in rec.tx.writable if a in out.loaded}
            post = dict(pre)
            for acct in out.writes:
                post[acct.address] = acct.encode()
            if divergence is None and (state_hash(pre) != rec.pre_hash or state_hash(post) != rec.post_hash):
                divergence = Mismatch(None, None, None, f"hash-mismatch@{i}")
        for acct in out.writes:
            chain.store(acct)
    chain.snapshot = {}
    replayed = {a: state[a].encode() for a in segment.delegated if a in state}
    return replayed, divergence


def verify_commit(
    prev_state: Mapping[Address, bytes],
    segment: Optional[LogSegment],
    claimed: Mapping[Address, bytes],
    programs: ProgramRegistry,
    *,
    prev_commit_id: Optional[int] = None,
    commit_id: Optional[int] = None,
) -> VerificationVerdict:
    """Verified iff replaying ``segment`` from ``prev_state`` yields exactly ``claimed``."""
    if segment is None or segment.start_commit != prev_commit_id:
        return VerificationVerdict(commit_id, Mismatch(None, None, None, "segment-gap"))
    try:
        replayed, _ = replay_segment(prev_state, segment, programs)
    except ValueError as exc:
        logger.warning("commit %s: replay failed: %s", commit_id, exc)
        return VerificationVerdict(commit_id, Mismatch(None, None, None, "segment-gap"))
    addrs = sorted(set(replayed) | set(claimed) | set(segment.delegated))
    for addr in addrs:
        expected = replayed.get(addr)
        got = claimed.get(addr)
        if expected != got:
            return VerificationVerdict(commit_id, Mismatch(addr, expected, got))
    return VerificationVerdict(commit_id)


def apply_verdict(dlp, verdict: VerificationVerdict):
    """Mark the commit verified, or revert/stop/unlock on fraud."""
    if verdict.commit_id is None:
        raise UnknownCommit("verdict carries no commit id")
    if verdict.verified:
        return dlp.mark_verified(verdict.commit_id)
    return dlp.reject_commit(verdict.commit_id)


class Verifier:
    """Checks every DLP commit against the archive.

    In sync mode the verdict is applied inside ``submit``. In async mode
    commits queue up until ``process`` or ``flush`` runs; the DLP flushes a
    session before releasing any of its accounts.
    """

    def __init__(self, dlp, archive: LogArchive, programs: ProgramRegistry, *, mode: str = "sync"):
        if mode not in ("sync", "async"):
            raise ValueError("mode must be 'sync' or 'async'")
        self.dlp = dlp
        self.archive = archive
        self.programs = programs
        self.mode = mode
        self.queue: deque = deque()
        self.verdicts: list[VerificationVerdict] = []
        self.listeners: list = []
        dlp.verifier = self

    def submit(self, record) -> None:
        self.queue.append(record)
        if self.mode == "sync":
            self.process()

    def _check(self, record) -> VerificationVerdict:
        session = self.dlp.session(record.er_id)
        prev = session.last_verified_states
        segment = self.archive.get(record.log_segment_hash)
        return verify_commit(
            prev,
            segment,
            record.account_states,
            self.programs,
            prev_commit_id=session.last_verified_commit,
            commit_id=record.commit_id,
        )

    def process(self, limit: Optional[int] = None) -> list[VerificationVerdict]:
        done = []
        while self.queue and (limit is None or len(done) < limit):
            record = self.queue.popleft()
            if not record.pending:
                continue  # reverted along with an earlier fraudulent commit
            verdict = self._check(record)
            apply_verdict(self.dlp, verdict)
            if not verdict.verified:
                m = verdict.mismatch
                logger.warning(
                    "fraud in %s commit %d: %s at %s", record.er_id, record.commit_id, m.reason, m.address.short if m.address else "-"
                )
            self.verdicts.append(verdict)
            for listener in self.listeners:
                listener(record, verdict)
            done.append(verdict)
        return done

    def flush(self, er_id: Optional[str] = None) -> list[VerificationVerdict]:
        # Commits resolve strictly in order across the queue; draining everything is simplest.
        return self.process()

    @property
    def fraud_count(self) -> int:
        return sum(1 for v in self.verdicts if not v.verified)


# -- standalone archive replay ----------------------------------------------------


@dataclass
class SessionReplay:
    er_id: str
    final_states: dict
    verdicts: list

    @property
    def ok(self) -> bool:
        return all(v.verified for v in self.verdicts)

    @property
    def first_fraud(self) -> Optional[VerificationVerdict]:
        return next((v for v in self.verdicts if not v.verified), None)


def replay_session(session: ArchivedSession, programs: ProgramRegistry) -> SessionReplay:
    """Replay every segment in order, checking each commit against its claim."""
    state: dict[Address, bytes] = {}
    prev_commit: Optional[int] = None
    verdicts = []
    for seg in session.segments:
        commit = session.commit_for(seg.index)
        if commit is None:
            # Trailing segment without a commit (session cut short); replay for the final state only.
            replayed, _ = replay_segment(state, seg, programs)
            state.update(replayed)
            continue
        claimed = commit.states
        if seg.hash() != commit.segment_hash:
            verdicts.append(VerificationVerdict(commit.commit_id, Mismatch(None, None, None, "segment-gap")))
            break
        verdict = verify_commit(state, seg, claimed, programs, prev_commit_id=prev_commit, commit_id=commit.commit_id)
        verdicts.append(verdict)
        if not verdict.verified:
            break
        # Released accounts drop out of later segments; keep their last value.
        state.update({Address(a): bytes(e) for a, e in claimed.items()})
        prev_commit = commit.commit_id
    return SessionReplay(session.er_id, state, verdicts)


def archive_and_replay(
    source: Union[str, Path, IO[str], Iterable[str]], programs: ProgramRegistry
) -> dict[str, SessionReplay]:
    """Replay a whole archive file; raises ``MalformedLog`` on a bad file."""
    return {s.er_id: replay_session(s, programs) for s in read_archive(source)}
