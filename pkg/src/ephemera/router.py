"""Client-facing RPC router.

Routing is decided purely from a transaction's account metas and the DLP's
delegation table (``address -> er_id``):

reads
    any requested account delegated -> that rollup; accounts in two different
    rollups -> reject ``multi-er-read``; otherwise the base layer.
sends
    only writable metas other than the fee payer count. None delegated -> base;
    all delegated to one rollup -> that rollup; anything else -> the policy:
    ``force-settle`` (undelegate the delegated writables, then base) or
    ``reject`` (``mixed-writable``).
"""

from __future__ import annotations

import itertools
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional

from .account import Account
from .address import Address
from .errors import NoRouteTarget, UnknownER
from .execution import AccountMeta, Transaction

logger = logging.getLogger(__name__)

BASE = "base"
ER = "er"
FORCE_SETTLE = "force-settle"
REJECT = "reject"

POLICIES = ("force-settle", "reject")

# Validation failures that mean "wrong chain", worth one re-route.
MISROUTE_REASONS = frozenset({"writes-undelegated", "writes-delegated-account", "er-not-alive"})


@dataclass(frozen=True)
class RouteDecision:
    target: str
    er_id: Optional[str] = None
    reason: Optional[str] = None
    settle: tuple = ()  # accounts to undelegate before a force-settled send

    @classmethod
    def base(cls) -> "RouteDecision":
        return cls(BASE)

    @classmethod
    def er(cls, er_id: str) -> "RouteDecision":
        return cls(ER, er_id)

    @classmethod
    def reject(cls, reason: str) -> "RouteDecision":
        return cls(REJECT, reason=reason)

    @property
    def layer(self) -> Optional[str]:
        """Where the transaction finally executes."""
        if self.target == ER:
            return self.er_id
        if self.target in (BASE, FORCE_SETTLE):
            return BASE
        return None

    def label(self) -> str:
        if self.target == ER:
            return f"ER({self.er_id})"
        if self.target == BASE:
            return "BaseLayer"
        if self.target == FORCE_SETTLE:
            return "ForceSettleThenBase"
        return f"Reject({self.reason})"

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "er_id": self.er_id,
            "reason": self.reason,
            "settle": [a.hex() for a in self.settle],
        }


@dataclass(frozen=True)
class RouterPolicy:
    mixed_writable_policy: str = "force-settle"

    def __post_init__(self):
        if self.mixed_writable_policy not in POLICIES:
            raise ValueError(f"mixed_writable_policy must be one of {POLICIES}")


def decide_read(accounts: Iterable[Address], table: Mapping[Address, str]) -> RouteDecision:
    homes = {table[a] for a in accounts if a in table}
    if len(homes) > 1:
        return RouteDecision.reject("multi-er-read")
    if homes:
        return RouteDecision.er(homes.pop())
    return RouteDecision.base()


def decide_send(metas, fee_payer: Optional[Address], table: Mapping[Address, str], policy: RouterPolicy) -> RouteDecision:
    writable = [m.address for m in metas if m.writable and m.address != fee_payer]
    delegated = [a for a in writable if a in table]
    if not delegated:
        return RouteDecision.base()
    homes = {table[a] for a in delegated}
    if len(delegated) == len(writable) and len(homes) == 1:
        return RouteDecision.er(homes.pop())
    if policy.mixed_writable_policy == "reject":
        return RouteDecision.reject("mixed-writable")
    return RouteDecision(FORCE_SETTLE, settle=tuple(sorted(delegated)))


def route_transaction(tx: Transaction, table: Mapping[Address, str], policy: RouterPolicy) -> RouteDecision:
    return decide_send(tx.metas, tx.fee_payer, table, policy)


# -- subscriptions -------------------------------------------------------------------


@dataclass(frozen=True)
class AccountUpdate:
    address: Address
    encoding: bytes
    source: str  # "base" or an er_id
    slot: int
    timestamp_ms: int
    kind: str = "write"  # write | commit | revert
    final: bool = False

    def account(self) -> Account:
        return Account.decode(self.encoding)

    def to_dict(self) -> dict:
        return {
            "address": self.address.hex(),
            "encoding": self.encoding.hex(),
            "source": self.source,
            "slot": self.slot,
            "timestamp_ms": self.timestamp_ms,
            "kind": self.kind,
            "final": self.final,
        }


class Subscription:
    def __init__(self, sub_id: int, accounts: Optional[frozenset], predicate: Optional[Callable] = None):
        self.id = sub_id
        self.accounts = accounts
        self.predicate = predicate
        self.active = True
        self._queue: list[AccountUpdate] = []
        self._lock = threading.Lock()

    def matches(self, update: AccountUpdate) -> bool:
        if self.accounts is not None and update.address not in self.accounts:
            return False
        return self.predicate is None or self.predicate(update)

    def push(self, update: AccountUpdate) -> None:
        with self._lock:
            self._queue.append(update)

    def poll(self) -> list[AccountUpdate]:
        with self._lock:
            out, self._queue = self._queue, []
        return out

    def __len__(self) -> int:
        return len(self._queue)


class SubscriptionHub:
    """Fans out block writes, settling commits and reverts to subscribers.

    An account streams from whichever chain currently writes it: blocks on the
    base layer only touch undelegated accounts and rollup blocks only touch
    delegated ones. Intermediate commits are not re-broadcast since clients
    already saw those values come from the rollup; the commits that hand an
    account back (final or releasing) are, so streams continue on the base.
    """

    def __init__(self):
        self.subscriptions: dict[int, Subscription] = {}
        self._ids = itertools.count(1)

    def subscribe(self, accounts: Optional[Iterable[Address]] = None, predicate=None) -> Subscription:
        accts = frozenset(Address(a) for a in accounts) if accounts is not None else None
        sub = Subscription(next(self._ids), accts, predicate)
        self.subscriptions[sub.id] = sub
        return sub

    def unsubscribe(self, sub_id: int) -> bool:
        sub = self.subscriptions.pop(sub_id, None)
        if sub is not None:
            sub.active = False
        return sub is not None

    def publish(self, update: AccountUpdate) -> None:
        for sub in list(self.subscriptions.values()):
            if sub.matches(update):
                sub.push(update)

    # -- wiring ----------------------------------------------------------------------
    def on_block(self, source: str):
        def listener(ledger, block, outcomes):
            if not self.subscriptions:
                return
            for out in outcomes:
                for acct in out.writes:
                    self.publish(AccountUpdate(acct.address, acct.encode(), source, block.slot, block.timestamp_ms))

        return listener

    def on_commit(self, base, clock):
        def listener(record):
            if not self.subscriptions:
                return
            handed_back = record.account_states if record.final else {
                a: e for a, e in record.account_states.items() if a in record.releasing
            }
            for addr in sorted(handed_back):
                self.publish(
                    AccountUpdate(addr, handed_back[addr], record.er_id, base.slot, clock.now_ms, "commit", True)
                )

        return listener

    def on_verdict(self, base, clock):
        def listener(record, verdict):
            if verdict.verified or not self.subscriptions:
                return
            for addr in sorted(record.account_states):
                acct = base.accounts.get(addr)
                if acct is not None:
                    self.publish(AccountUpdate(addr, acct.encode(), "base", base.slot, clock.now_ms, "revert", True))

        return listener


# -- the router ----------------------------------------------------------------------


@dataclass
class SendReceipt:
    tx_id: str
    decision: RouteDecision
    layer: Optional[str]
    submitted_ms: int
    rerouted: bool = False
    status: Optional[str] = None  # set immediately only for router-level rejections
    tx: Optional[Transaction] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "tx_id": self.tx_id,
            "decision": self.decision.to_dict(),
            "layer": self.layer,
            "submitted_ms": self.submitted_ms,
            "rerouted": self.rerouted,
            "status": self.status,
        }


class RpcRouter:
    """Routes reads, sends, blockhash requests and subscriptions.

    ``submit_base`` queues a transaction for the next base block; rollups are
    found through the provisioner. The delegation table is cached and
    refreshed when the DLP's event stream grows.
    """

    def __init__(self, base, dlp, provisioner, submit_base: Callable, clock, policy: RouterPolicy | None = None):
        self.base = base
        self.dlp = dlp
        self.provisioner = provisioner
        self.submit_base = submit_base
        self.clock = clock
        self.policy = policy or RouterPolicy()
        self.hub = SubscriptionHub()
        self.trace: list[tuple[dict, RouteDecision]] = []
        self.send_listeners: list = []
        self._table: dict[Address, str] = {}
        self._table_version = -1
        self._lock = threading.RLock()

    # -- delegation table ------------------------------------------------------------
    def table(self, refresh: bool = False) -> dict[Address, str]:
        with self._lock:
            version = len(self.dlp.events)
            if refresh or version != self._table_version:
                self._table = self.dlp.delegation_table()
                self._table_version = version
            return self._table

    def _record(self, request: dict, decision: RouteDecision) -> RouteDecision:
        self.trace.append((request, decision))
        return decision

    def route_read(self, accounts: Iterable[Address]) -> RouteDecision:
        accounts = [Address(a) for a in accounts]
        with self._lock:
            decision = decide_read(accounts, self.table())
            return self._record({"op": "read", "accounts": [a.hex() for a in accounts]}, decision)

    def route_send(self, tx: Transaction) -> RouteDecision:
        with self._lock:
            decision = route_transaction(tx, self.table(), self.policy)
            request = {
                "op": "send",
                "tx": tx.id,
                "metas": [[m.address.hex(), m.writable] for m in tx.metas],
                "fee_payer": tx.fee_payer.hex(),
            }
            return self._record(request, decision)

    def route_instruction(self, metas, fee_payer: Optional[Address] = None) -> RouteDecision:
        """Decision for a transaction not yet built (used to pick its blockhash)."""
        with self._lock:
            return decide_send(metas, fee_payer, self.table(), self.policy)

    # -- reads ----------------------------------------------------------------------
    def _rollup(self, er_id: str):
        rollup = self.provisioner.get(er_id) if self.provisioner is not None else None
        if rollup is None:
            raise UnknownER(f"no runtime for {er_id}")
        return rollup

    def read(self, accounts: Iterable[Address]) -> tuple[RouteDecision, dict]:
        accounts = [Address(a) for a in accounts]
        decision = self.route_read(accounts)
        if decision.target == REJECT:
            return decision, {}
        if decision.target == ER:
            rollup = self.provisioner.get(decision.er_id)
            if rollup is not None and rollup.alive:
                return decision, {a: rollup.read(a) for a in accounts}
            # Session still listed but its runtime is gone (or not yet up): base has the settled state.
        return decision, {a: self.base.get_account(a) for a in accounts}

    def latest_blockhash(self, decision: RouteDecision) -> bytes:
        if decision.target in (BASE, FORCE_SETTLE):
            return self.base.tip.hash
        if decision.target == ER:
            rollup = self._rollup(decision.er_id)
            if not rollup.alive:
                raise UnknownER(f"{decision.er_id} has terminated")
            return rollup.ledger.tip.hash
        raise NoRouteTarget(f"decision {decision.label()} has no target chain")

    # -- sends ----------------------------------------------------------------------
    def _force_settle(self, decision: RouteDecision) -> None:
        for addr in decision.settle:
            rec = self.dlp.record_for(addr)
            if rec is not None:
                # The router acts for the owning program, which may always release.
                self.dlp.undelegate(rec.owner_program, addr)

    def _dispatch(self, tx: Transaction, decision: RouteDecision) -> Optional[str]:
        """Hand ``tx`` to its target; returns a misroute reason instead of queueing if one applies."""
        if decision.target == ER:
            rollup = self.provisioner.get(decision.er_id) if self.provisioner else None
            if rollup is None or not rollup.alive:
                return "er-not-alive"
            reason = rollup.ledger.validate(tx)
            if reason in MISROUTE_REASONS:
                return reason
            rollup.submit(tx)
            return None
        if decision.target == FORCE_SETTLE:
            self._force_settle(decision)
        reason = self.base.validate(tx)
        if reason in MISROUTE_REASONS:
            return reason
        self.submit_base(tx)
        return None

    def send(self, tx: Transaction, rebuild: Optional[Callable[[RouteDecision], Transaction]] = None) -> SendReceipt:
        """Route and submit; a misrouted transaction is re-routed once.

        ``rebuild`` lets the caller re-sign against the new target's blockhash.
        """
        now = self.clock.now_ms
        decision = self.route_send(tx)
        rerouted = False
        if decision.target == REJECT:
            receipt = SendReceipt(tx.id, decision, None, now, status=f"rejected:{decision.reason}", tx=tx)
        else:
            miss = self._dispatch(tx, decision)
            if miss is not None:
                logger.debug("%s misrouted to %s (%s); re-routing", tx.id, decision.label(), miss)
                rerouted = True
                self.table(refresh=True)
                decision = self.route_send(tx)
                if rebuild is not None and decision.target != REJECT:
                    tx = rebuild(decision)
                if decision.target == REJECT:
                    miss = decision.reason
                else:
                    miss = self._dispatch(tx, decision)
                if miss is not None:
                    receipt = SendReceipt(tx.id, decision, None, now, True, f"rejected:{miss}", tx=tx)
                    for listener in self.send_listeners:
                        listener(receipt)
                    return receipt
            receipt = SendReceipt(tx.id, decision, decision.layer, now, rerouted, tx=tx)
        for listener in self.send_listeners:
            listener(receipt)
        return receipt

    def send_bytes(self, raw: bytes) -> SendReceipt:
        return self.send(Transaction.decode(raw))

    # -- subscriptions -----------------------------------------------------------------
    def subscribe(self, accounts: Iterable[Address] | None = None, predicate=None) -> Subscription:
        return self.hub.subscribe(accounts, predicate)

    def unsubscribe(self, sub_id: int) -> bool:
        return self.hub.unsubscribe(sub_id)

    def trace_lines(self) -> list[str]:
        lines = []
        for req, decision in self.trace:
            if req["op"] == "read":
                accts = ",".join(a[:8] for a in req["accounts"])
                lines.append(f"read [{accts}] -> {decision.label()}")
            else:
                metas = ",".join(f"{a[:8]}:{'w' if w else 'r'}" for a, w in req["metas"])
                lines.append(f"send {req['tx']} [{metas}] -> {decision.label()}")
        return lines


# -- decision table ------------------------------------------------------------------

HOMES = ("e1", "e2", "base")


def decision_table(policy: RouterPolicy, max_accounts: int = 3) -> list[tuple[tuple, RouteDecision, RouteDecision]]:
    """Route every transaction over up to ``max_accounts`` distinct accounts.

    Each account is placed in rollup ``e1``, rollup ``e2`` or left on the base
    layer, and is either readable or writable. Returns ``(cells, read, send)``
    where ``cells`` is a tuple of ``(home, writable)`` pairs. The fee payer is
    a separate base-layer account.
    """
    payer = Address.from_label("decision-table/payer")
    out = []
    for n in range(max_accounts + 1):
        addrs = [Address.from_label(f"decision-table/{i}") for i in range(n)]
        for cells in itertools.product(itertools.product(HOMES, (False, True)), repeat=n):
            table = {a: home for a, (home, _) in zip(addrs, cells) if home != "base"}
            metas = [AccountMeta(payer, True)] + [AccountMeta(a, w) for a, (_, w) in zip(addrs, cells)]
            out.append((cells, decide_read(addrs, table), decide_send(metas, payer, table, policy)))
    return out


def format_decision_table(rows) -> list[str]:
    lines = []
    for cells, read, send in rows:
        shape = " ".join(f"{home}:{'w' if w else 'r'}" for home, w in cells) or "(none)"
        lines.append(f"{shape:<24} read -> {read.label():<22} send -> {send.label()}")
    return lines
