import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ephemera.catalog import default_registry
from ephemera.chain import BaseChain, SimClock
from ephemera.delegation import DelegationProgram, ERConfig, ProvisionRequest
from ephemera.errors import (
    AlreadyDelegated,
    ExecutableAccount,
    ForeignAccount,
    InvalidConfig,
    LifetimeNotExpired,
    NotDelegated,
    NotOwner,
    UnknownER,
)
from ephemera.execution import AccountMeta, program_account
from ephemera.programs import COUNTER_PROGRAM
from ephemera.router import RouteDecision

from conftest import PAYER, STRANGER, CounterWorld, counter_account

CFG = ERConfig(lifetime_ms=1000, commit_frequency_ms=500, block_time_ms=10)


def bare_dlp(n=2):
    clock = SimClock()
    base = BaseChain(default_registry(), clock)
    for r in base.programs:
        base.store(program_account(r))
    accts = []
    for i in range(n):
        a = counter_account(f"d/{i}", i)
        base.upsert_account(a)
        accts.append(a.address)
    return DelegationProgram(base, clock), base, clock, accts


def test_config_invariants():
    with pytest.raises(InvalidConfig):
        ERConfig(lifetime_ms=100, commit_frequency_ms=200)
    with pytest.raises(InvalidConfig):
        ERConfig(lifetime_ms=1000, commit_frequency_ms=20, block_time_ms=50)
    with pytest.raises(InvalidConfig):
        ERConfig(lifetime_ms=1000, commit_frequency_ms=500, block_time_ms=5)
    with pytest.raises(InvalidConfig):
        ERConfig(lifetime_ms=1000, commit_frequency_ms=500, block_time_ms=401)
    assert ERConfig.from_dict(CFG.to_dict()) == CFG


def test_delegate_two_pdas_one_request():
    dlp, base, _, accts = bare_dlp()
    records = dlp.delegate(COUNTER_PROGRAM, accts, CFG)
    assert {r.er_id for r in records} == {"er-1"}
    assert all(base.get_account(a).delegated_to == "er-1" for a in accts)
    requests = [e for e in dlp.events if isinstance(e, ProvisionRequest)]
    assert len(requests) == 1 and set(requests[0].accounts) == set(accts)


def test_delegate_errors():
    dlp, base, _, accts = bare_dlp()
    with pytest.raises(NotOwner):
        dlp.delegate(STRANGER, accts[:1], CFG)
    dlp.delegate(COUNTER_PROGRAM, accts[:1], CFG)
    with pytest.raises(AlreadyDelegated):
        dlp.delegate(COUNTER_PROGRAM, accts[:1], CFG)
    prog = next(iter(base.programs)).program_id
    with pytest.raises(ExecutableAccount):
        dlp.delegate(base.get_account(prog).owner, [prog], CFG)


def test_commit_applies_and_rejects_foreign():
    dlp, base, _, accts = bare_dlp()
    dlp.delegate(COUNTER_PROGRAM, accts[:1], CFG)
    moved = base.get_account(accts[0])
    moved.data = (42).to_bytes(8, "little")
    rec = dlp.commit("er-1", {accts[0]: moved.encode()}, bytes(32))
    assert base.get_account(accts[0]).data == moved.data
    assert not rec.verified and rec.pending
    with pytest.raises(ForeignAccount):
        dlp.commit("er-1", {accts[1]: base.get_account(accts[1]).encode()}, bytes(32))
    with pytest.raises(UnknownER):
        dlp.commit("er-9", {}, bytes(32))


def test_reject_commit_reverts_to_last_verified():
    dlp, base, _, accts = bare_dlp()
    dlp.delegate(COUNTER_PROGRAM, accts[:1], CFG)
    original = base.get_account(accts[0]).encode()
    acct = base.get_account(accts[0])
    acct.data = (7).to_bytes(8, "little")
    c1 = dlp.commit("er-1", {accts[0]: acct.encode()}, bytes(32))
    dlp.mark_verified(c1.commit_id)
    acct.data = (8).to_bytes(8, "little")
    c2 = dlp.commit("er-1", {accts[0]: acct.encode()}, bytes(32))
    dlp.reject_commit(c2.commit_id)
    now = base.get_account(accts[0])
    assert now.data == (7).to_bytes(8, "little") and now.delegated_to is None
    assert original != now.encode()
    assert dlp.sessions["er-1"].close_reason == "fraud"


def test_undelegate_rules():
    dlp, base, clock, accts = bare_dlp()
    dlp.delegate(COUNTER_PROGRAM, accts, CFG)
    with pytest.raises(LifetimeNotExpired):
        dlp.undelegate(STRANGER, accts[0])
    dlp.undelegate(COUNTER_PROGRAM, accts[0])  # owner at any time
    assert base.get_account(accts[0]).delegated_to is None
    with pytest.raises(NotDelegated):
        dlp.undelegate(COUNTER_PROGRAM, accts[0])
    clock.advance_to(1000)
    dlp.undelegate(STRANGER, accts[1])
    assert base.get_account(accts[1]).delegated_to is None
    assert dlp.sessions["er-1"].status == "closed"


@settings(max_examples=100, deadline=None)
@given(st.integers(100, 60_000), st.integers(0, 120_000))
def test_undelegate_boundary(lifetime, t):
    dlp, base, clock, accts = bare_dlp(1)
    dlp.delegate(COUNTER_PROGRAM, accts, ERConfig(lifetime_ms=lifetime, commit_frequency_ms=lifetime, block_time_ms=10))
    clock.advance_to(t)
    if t >= lifetime:
        dlp.undelegate(STRANGER, accts[0])
        assert accts[0] not in dlp.records
    else:
        with pytest.raises(LifetimeNotExpired):
            dlp.undelegate(STRANGER, accts[0])


def test_force_close_idempotent_and_owner_only():
    w = CounterWorld()
    er = w.delegate()
    w.add(w.accounts[0], 5)
    w.cluster.advance(20)
    with pytest.raises(NotOwner):
        w.cluster.force_close(STRANGER, er)
    w.cluster.force_close(COUNTER_PROGRAM, er)
    assert w.value(w.accounts[0]) == 5  # final commit persisted
    assert all(w.cluster.base.get_account(a).delegated_to is None for a in w.accounts)
    w.cluster.force_close(COUNTER_PROGRAM, er)
    assert w.cluster.dlp.sessions[er].close_reason == "force-close"


def test_force_close_resolves_pending_commit_first():
    w = CounterWorld(verification_mode="async")
    er = w.delegate()
    w.add(w.accounts[0], 3)
    w.cluster.advance(600)  # one periodic commit, left unverified
    assert w.cluster.dlp.sessions[er].pending_commits()
    w.cluster.force_close(COUNTER_PROGRAM, er)
    assert not w.cluster.dlp.sessions[er].pending_commits()
    assert all(c.verified for c in w.cluster.dlp.sessions[er].commits)


def test_base_write_to_delegated_rejected_then_allowed_after_release():
    w = CounterWorld(policy="reject")
    w.delegate(w.accounts[:1])
    w.cluster.base.produce_block([])
    tx = w.cluster.build_transaction(
        RouteDecision.base(),
        PAYER,
        COUNTER_PROGRAM,
        [AccountMeta(w.accounts[0], True)],
        b"\x01" + bytes(8),
    )
    assert w.cluster.base.validate(tx) == "writes-delegated-account"
    w.cluster.undelegate(COUNTER_PROGRAM, w.accounts[0])
    assert w.cluster.base.validate(tx) is None


def test_single_writer_every_change_from_commit():
    w = CounterWorld()
    er = w.delegate()
    seen = []
    for i in range(30):
        w.add(w.accounts[i % 3], 1)
        w.cluster.advance(10)
        seen.append(w.cluster.base.get_account(w.accounts[0]).encode())
    commits = w.cluster.dlp.sessions[er].commits
    committed = {c.account_states[w.accounts[0]] for c in commits} | {w.cluster.dlp.sessions[er].last_verified_states[w.accounts[0]]}
    pre = w.cluster.dlp.records[w.accounts[0]].pre_delegation
    for enc in seen:
        assert enc in committed or enc == pre


def test_commit_monotonic_slots():
    w = CounterWorld()
    er = w.delegate(lifetime_ms=3000, commit_frequency_ms=400)
    for _ in range(20):
        w.add(w.accounts[0])
        w.cluster.advance(150)
    slots = [c.base_slot for c in w.cluster.dlp.sessions[er].commits if c.verified]
    assert slots == sorted(slots)
