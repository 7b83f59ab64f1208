import copy

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ephemera.address import Address
from ephemera.execution import AccountMeta
from ephemera.programs import COUNTER_ADD, COUNTER_PROGRAM, counter_ix
from ephemera.router import RouteDecision, RouterPolicy, decide_read, decide_send, decision_table

from conftest import PAYER, CounterWorld
from oracles import expected_read, expected_send


@pytest.mark.parametrize("policy", ["force-settle", "reject"])
def test_decision_table_matches_oracle(policy):
    rows = decision_table(RouterPolicy(policy))
    assert len(rows) == 1 + 6 + 36 + 216
    for cells, read, send in rows:
        assert read.label() == expected_read(cells), cells
        assert send.label() == expected_send(cells, policy), cells


def test_fee_payer_ignored_in_routing():
    acct = Address.from_label("r/a")
    table = {acct: "e1", PAYER: "e2"}
    metas = [AccountMeta(PAYER, True), AccountMeta(acct, True)]
    assert decide_send(metas, PAYER, table, RouterPolicy()) == RouteDecision.er("e1")


def test_blockhash_follows_target(world):
    er = world.delegate(world.accounts[:1])
    world.cluster.advance(30)
    router = world.cluster.router
    assert router.latest_blockhash(RouteDecision.er(er)) == world.cluster.rollup(er).ledger.tip.hash
    assert router.latest_blockhash(RouteDecision.base()) == world.cluster.base.tip.hash


def test_blockhash_expires_after_window():
    w = CounterWorld(block_time_ms=10)
    c = w.cluster
    metas = [AccountMeta(w.accounts[0], True)]
    stale = c.build_transaction(RouteDecision.base(), PAYER, COUNTER_PROGRAM, metas, counter_ix(COUNTER_ADD, 1), "stale")
    c.advance(10 * 150)
    assert c.base.validate(stale) is None
    c.advance(10)
    assert c.base.validate(stale) == "expired-blockhash"
    receipt = c.send(stale)
    assert receipt.layer == "base"
    c.advance(10)
    assert c.submissions["stale"].status == "rejected:expired-blockhash"
    assert w.value(w.accounts[0]) == 0


def test_router_reads_follow_delegation(world):
    er = world.delegate(world.accounts[:1])
    world.add(world.accounts[0], 6)
    world.cluster.advance(10)
    decision, accts = world.cluster.read([world.accounts[0]])
    assert decision == RouteDecision.er(er)
    assert accts[world.accounts[0]].data[:1] == b"\x06"
    decision, _ = world.cluster.read(world.accounts[1:])
    assert decision == RouteDecision.base()


def test_multi_er_read_rejected(world):
    world.delegate(world.accounts[:1])
    world.delegate(world.accounts[1:2])
    decision, accts = world.cluster.read(world.accounts[:2])
    assert decision.label() == "Reject(multi-er-read)" and accts == {}


def test_force_settle_releases_then_runs_on_base(world):
    er = world.delegate(world.accounts[:1])
    world.add(world.accounts[0], 5)
    world.cluster.advance(10)
    metas = [AccountMeta(world.accounts[0], True), AccountMeta(world.accounts[1], True)]
    receipt = world.cluster.send_instruction(PAYER, COUNTER_PROGRAM, metas, counter_ix(COUNTER_ADD, 1))
    assert receipt.decision.label() == "ForceSettleThenBase"
    world.cluster.advance(400)
    assert world.cluster.submissions[receipt.tx_id].status == "ok"
    assert world.value(world.accounts[0]) == 6
    assert world.cluster.dlp.record_for(world.accounts[0]) is None
    assert world.cluster.dlp.sessions[er].commits[-1].verified


def test_mixed_writable_rejected_under_reject_policy():
    w = CounterWorld(policy="reject")
    w.delegate(w.accounts[:1])
    metas = [AccountMeta(w.accounts[0], True), AccountMeta(w.accounts[1], True)]
    receipt = w.cluster.send_instruction(PAYER, COUNTER_PROGRAM, metas, counter_ix(COUNTER_ADD, 1))
    assert receipt.status == "rejected:mixed-writable"
    assert w.cluster.dlp.record_for(w.accounts[0]) is not None


def test_misroute_is_rerouted_once(world):
    world.delegate(world.accounts[:1])
    world.cluster.undelegate(COUNTER_PROGRAM, world.accounts[0])
    router = world.cluster.router
    router.table()
    router._table = {world.accounts[0]: "er-1"}  # stale cache
    receipt = world.add(world.accounts[0], 2)
    assert receipt.rerouted and receipt.layer == "base"
    world.cluster.advance(400)
    assert world.cluster.submissions[receipt.tx_id].status == "ok"


def test_subscription_streams_at_rollup_cadence(world):
    er = world.delegate(world.accounts[:1])
    sub = world.cluster.router.subscribe([world.accounts[0]])
    for _ in range(5):
        world.add(world.accounts[0])
        world.cluster.advance(10)
    updates = sub.poll()
    assert [u.source for u in updates] == [er] * 5
    assert [u.timestamp_ms for u in updates] == [10, 20, 30, 40, 50]


def test_subscription_rehomes_on_termination(world):
    er = world.delegate(world.accounts[:1], lifetime_ms=500, commit_frequency_ms=500)
    sub = world.cluster.router.subscribe([world.accounts[0]])
    world.add(world.accounts[0])
    world.cluster.advance(500)
    world.add(world.accounts[0])
    world.cluster.advance(400)
    kinds = [(u.source, u.kind) for u in sub.poll()]
    assert kinds == [(er, "write"), (er, "commit"), ("base", "write")]


def test_unsubscribe_stops_updates(world):
    sub = world.cluster.router.subscribe([world.accounts[0]])
    assert world.cluster.router.unsubscribe(sub.id)
    world.add(world.accounts[0])
    world.cluster.advance(400)
    assert sub.poll() == [] and not sub.active


homes = st.sampled_from(["e1", "e2", None])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(homes, st.booleans()), max_size=6), st.sampled_from(["force-settle", "reject"]))
def test_decisions_are_pure(cells, policy):
    addrs = [Address.from_label(f"pure/{i}") for i in range(len(cells))]
    table = {a: h for a, (h, _) in zip(addrs, cells) if h}
    metas = [AccountMeta(a, w) for a, (_, w) in zip(addrs, cells)]
    snapshot = copy.deepcopy(table)
    first = (decide_read(addrs, table), decide_send(metas, None, table, RouterPolicy(policy)))
    second = (decide_read(addrs, table), decide_send(metas, None, table, RouterPolicy(policy)))
    assert first == second and table == snapshot
    oracle_cells = tuple((h or "base", w) for h, w in cells)
    assert first[0].label() == expected_read(oracle_cells)
    assert first[1].label() == expected_send(oracle_cells, policy)


def test_routing_is_deterministic_across_clusters():
    def trace():
        w = CounterWorld()
        w.delegate(w.accounts[:2])
        for i in range(9):
            w.add(w.accounts[i % 3], i, reads=[w.accounts[(i + 2) % 3]])
        return w.cluster.router.trace_lines()

    assert trace() == trace()
