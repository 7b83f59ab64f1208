"""One simulated deployment: base layer, DLP, provisioner, verifier and router
sharing a clock, plus the bookkeeping needed for metrics.

Time only moves through :meth:`Cluster.advance_to`. At every instant the
base layer produces its block before any rollup does, and rollups step in
``er_id`` order, so a run is a deterministic function of its inputs.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .address import TICK_AUTHORITY, Address
from .archive import LogArchive
from .catalog import default_registry
from .chain import BASE_BLOCK_TIME_MS, BASE_FLAT_FEE, VALIDITY_WINDOW, BaseChain, SimClock
from .delegation import DelegationProgram, ERConfig
from .errors import RollupNotAlive
from .execution import AccountMeta, ProgramRegistry, Transaction, program_account, rejected
from .rollup import FraudSpec, Provisioner
from .router import ER, REJECT, RouteDecision, RouterPolicy, RpcRouter, SendReceipt
from .verification import Verifier

logger = logging.getLogger(__name__)


@dataclass
class Submission:
    tx_id: str
    layer: Optional[str]  # "base", an er_id, or None for router rejections
    submitted_ms: int
    decision: str
    status: Optional[str] = None
    included_ms: Optional[int] = None
    slot: Optional[int] = None

    @property
    def latency_ms(self) -> Optional[int]:
        if self.included_ms is None:
            return None
        return self.included_ms - self.submitted_ms

    @property
    def terminal(self) -> bool:
        return self.status is not None


class Cluster:
    def __init__(
        self,
        *,
        programs: ProgramRegistry | None = None,
        block_time_ms: int = BASE_BLOCK_TIME_MS,
        validity_window: int = VALIDITY_WINDOW,
        flat_fee: int = BASE_FLAT_FEE,
        policy: RouterPolicy | str | None = None,
        verification_mode: str = "sync",
        start_ms: int = 0,
    ):
        self.clock = SimClock(start_ms)
        self.programs = programs if programs is not None else default_registry()
        self.base = BaseChain(
            self.programs, self.clock, block_time_ms=block_time_ms, validity_window=validity_window, flat_fee=flat_fee
        )
        for routine in self.programs:
            self.base.store(program_account(routine))
        self.archive = LogArchive()
        self.dlp = DelegationProgram(self.base, self.clock)
        self.provisioner = Provisioner(
            self.base, self.dlp, self.programs, self.archive, self.clock, validity_window=validity_window
        )
        self.verifier = Verifier(self.dlp, self.archive, self.programs, mode=verification_mode)
        if isinstance(policy, str):
            policy = RouterPolicy(policy)
        self.base_pending: list[tuple[Transaction, int]] = []
        self.router = RpcRouter(self.base, self.dlp, self.provisioner, self._submit_base, self.clock, policy)
        self.next_base_ms = start_ms + block_time_ms
        self.submissions: dict[str, Submission] = {}
        self.ticks_included = 0
        self._ids = itertools.count(1)

        hub = self.router.hub
        self.base.block_listeners.append(hub.on_block("base"))
        self.base.block_listeners.append(self._track_block("base"))
        self.provisioner.listeners.append(self._on_rollup)
        self.dlp.commit_listeners.append(hub.on_commit(self.base, self.clock))
        self.verifier.listeners.append(hub.on_verdict(self.base, self.clock))
        self.router.send_listeners.append(self._track_send)

    # -- wiring --------------------------------------------------------------------
    def _on_rollup(self, rollup) -> None:
        rollup.ledger.block_listeners.append(self.router.hub.on_block(rollup.er_id))
        rollup.ledger.block_listeners.append(self._track_block(rollup.er_id))
        rollup.drop_listeners.append(self._on_dropped)

    def _submit_base(self, tx: Transaction) -> None:
        self.base_pending.append((tx, self.clock.now_ms))

    def _track_send(self, receipt: SendReceipt) -> None:
        sub = Submission(receipt.tx_id, receipt.layer, receipt.submitted_ms, receipt.decision.label(), receipt.status)
        self.submissions[receipt.tx_id] = sub

    def _track_block(self, layer: str):
        def listener(ledger, block, outcomes):
            for out in outcomes:
                sub = self.submissions.get(out.id)
                if sub is None:
                    if out.tx.fee_payer == TICK_AUTHORITY:
                        self.ticks_included += 1
                    continue
                if sub.terminal:
                    continue
                sub.status = out.status
                sub.included_ms = block.timestamp_ms
                sub.slot = block.slot
                sub.layer = layer

        return listener

    def _on_dropped(self, rollup, txs) -> None:
        for tx in txs:
            sub = self.submissions.get(tx.id)
            if sub is not None and not sub.terminal:
                sub.status = rejected("er-terminated")

    # -- time --------------------------------------------------------------------------
    @property
    def now_ms(self) -> int:
        return self.clock.now_ms

    def _next_event(self) -> int:
        t = self.next_base_ms
        er = self.provisioner.next_block_ms()
        return t if er is None else min(t, er)

    def advance_to(self, t: int, *, inclusive: bool = True) -> None:
        """Run every block due up to ``t`` (excluding ``t`` itself unless ``inclusive``)."""
        if t < self.clock.now_ms:
            raise ValueError(f"cannot move back to {t} ms from {self.clock.now_ms} ms")
        self.provisioner.poll()
        while True:
            nxt = self._next_event()
            if nxt > t or (nxt == t and not inclusive):
                break
            self.clock.advance_to(nxt)
            if self.next_base_ms <= nxt:
                self.produce_base_block(nxt)
                self.next_base_ms += self.base.block_time_ms
            self.provisioner.poll()
            self.provisioner.step(nxt)
            self.provisioner.poll()
        self.clock.advance_to(t)

    def advance(self, ms: int) -> None:
        self.advance_to(self.clock.now_ms + ms)

    def produce_base_block(self, now_ms: int | None = None):
        txs = [tx for tx, _ in self.base_pending]
        self.base_pending = []
        return self.base.produce_block(txs, self.clock.now_ms if now_ms is None else now_ms)

    # -- accounts and delegation -----------------------------------------------------
    def fund(self, addr: Address, amount: int):
        return self.base.mint(Address(addr), amount)

    def delegate(self, owner_program: Address, accounts: Iterable[Address], config: ERConfig) -> str:
        accounts = list(accounts)
        if accounts:
            er_id = self.dlp.delegate(owner_program, accounts, config)[0].er_id
        else:
            er_id = self.dlp.request_provision(owner_program, config)
        self.provisioner.poll()
        return er_id

    def delegate_more(self, owner_program: Address, er_id: str, accounts: Iterable[Address]):
        records = self.dlp.delegate_accounts(owner_program, er_id, accounts)
        self.provisioner.poll()
        return records

    def undelegate(self, caller: Address, account: Address):
        rec = self.dlp.undelegate(caller, account, self.clock.now_ms)
        self.provisioner.poll()
        return rec

    def settle(self, er_id: str):
        return self.dlp.request_settlement(er_id)

    def force_close(self, owner_program: Address, er_id: str) -> None:
        self.dlp.force_close(owner_program, er_id)
        self.provisioner.poll()

    def inject_fraud(self, er_id: str, spec: FraudSpec | None = None) -> None:
        rollup = self.provisioner.get(er_id)
        if rollup is None or not rollup.alive:
            raise RollupNotAlive(f"{er_id} is not alive")
        rollup.inject_fraud(spec)

    def rollup(self, er_id: str):
        return self.provisioner.get(er_id)

    # -- client helpers ------------------------------------------------------------
    def next_tx_id(self, prefix: str = "tx") -> str:
        return f"{prefix}-{next(self._ids)}"

    def required_fee(self, decision: RouteDecision, tx_probe: Transaction | None = None) -> int:
        if decision.target == ER:
            rollup = self.provisioner.get(decision.er_id)
            if rollup is not None:
                if rollup.fees.gasless:
                    return 0
                return rollup.fees.flat_fee
        return self.base.flat_fee

    def build_transaction(
        self,
        decision: RouteDecision,
        fee_payer: Address,
        program_id: Address,
        metas: Sequence[AccountMeta],
        data: bytes = b"",
        tx_id: str | None = None,
    ) -> Transaction:
        metas = [m for m in metas if m.address != fee_payer]
        if decision.target == REJECT:
            blockhash = self.base.tip.hash
        else:
            try:
                blockhash = self.router.latest_blockhash(decision)
            except Exception:  # target vanished between decision and signing
                blockhash = self.base.tip.hash
        return Transaction(
            tx_id or self.next_tx_id(),
            Address(fee_payer),
            blockhash,
            Address(program_id),
            (AccountMeta(Address(fee_payer), True), *metas),
            data,
            self.required_fee(decision),
        )

    def send_instruction(
        self,
        fee_payer: Address,
        program_id: Address,
        metas: Sequence[AccountMeta],
        data: bytes = b"",
        tx_id: str | None = None,
    ) -> SendReceipt:
        """Build a transaction against the routed chain's blockhash and fee, then send it."""
        tx_id = tx_id or self.next_tx_id()
        decision = self.router.route_instruction(metas, fee_payer)
        tx = self.build_transaction(decision, fee_payer, program_id, metas, data, tx_id)
        return self.router.send(
            tx, rebuild=lambda d: self.build_transaction(d, fee_payer, program_id, metas, data, tx_id)
        )

    def send(self, tx: Transaction) -> SendReceipt:
        return self.router.send(tx)

    def read(self, accounts: Iterable[Address]):
        return self.router.read(accounts)

    # -- summaries ------------------------------------------------------------------
    def status(self) -> dict:
        return {
            "now_ms": self.clock.now_ms,
            "base": {"slot": self.base.slot, "tip": self.base.tip.hash.hex(), "pending": len(self.base_pending)},
            "rollups": {
                er_id: {
                    "alive": r.alive,
                    "slot": r.ledger.slot,
                    "tip": r.ledger.tip.hash.hex(),
                    "delegated": len(r.delegated),
                    "commits": len(r.commits),
                    "pending": len(r.pending),
                    "expires_at_ms": r.expires_at_ms,
                    "termination_reason": r.termination_reason,
                }
                for er_id, r in sorted(self.provisioner.rollups.items())
            },
            "sessions": {
                er_id: {"status": s.status, "close_reason": s.close_reason, "accounts": len(s.accounts)}
                for er_id, s in sorted(self.dlp.sessions.items())
            },
            "verdicts": {"verified": len(self.verifier.verdicts) - self.verifier.fraud_count, "fraud": self.verifier.fraud_count},
        }
