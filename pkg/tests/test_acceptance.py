"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line with its measured numbers
(visible in ``pytest -v`` output), then asserts. ``python3 tests/test_acceptance.py``
runs the same checks without pytest.
"""

import copy
import io
import random
import sys
import time
from pathlib import Path

from ephemera.catalog import default_registry
from ephemera.chain import BaseChain, SimClock
from ephemera.cli import EXIT_OK, main as cli_main
from ephemera.delegation import DelegationProgram, ERConfig
from ephemera.ecs.derived import DERIVED_ENERGY, read_derived
from ephemera.ecs.schema import split_component
from ephemera.ecs.systems import CHEST, ENERGY, POSITION
from ephemera.errors import LifetimeNotExpired
from ephemera.execution import AccountMeta, execute_sequential, execute_transactions, program_account
from ephemera.programs import (
    COUNTER_ADD,
    COUNTER_ADD_THEN_FAIL,
    COUNTER_PROGRAM,
    counter_ix,
    counter_value,
)
from ephemera.rollup import FraudSpec
from ephemera.router import RouterPolicy, decision_table
from ephemera.sim import ScenarioRun, bundled_scenarios, load_scenario, report
from ephemera.verification import archive_and_replay

import oracles
from conftest import PAYER, STRANGER, CounterWorld, counter_account
from workloads import make_chain, random_workload


def verdict(n: int, ok: bool, detail: str) -> None:
    print(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}", file=sys.stdout, flush=True)
    assert ok, detail


def _encodings(ledger):
    return {a: acct.encode() for a, acct in ledger.accounts.items()}


def _counter(ledger, addr):
    return counter_value(ledger.get_account(addr).data)


# -- 1. routing table --------------------------------------------------------------


def check_routing_table():
    start = time.perf_counter()
    cells = mismatches = 0
    for policy in ("force-settle", "reject"):
        for shape, read, send in decision_table(RouterPolicy(policy)):
            cells += 1
            if read.label() != oracles.expected_read(shape) or send.label() != oracles.expected_send(shape, policy):
                mismatches += 1
    elapsed = time.perf_counter() - start
    ok = cells == 2 * 259 and mismatches == 0 and elapsed < 5.0
    return ok, f"{cells - mismatches}/{cells} cells match under both policies in {elapsed:.2f} s (limit 5 s)"


# -- 2. scheduler equivalence ------------------------------------------------------


def check_scheduler_equivalence(n_workloads=1000):
    start = time.perf_counter()
    bad = []
    for seed in range(n_workloads):
        chain_a, accounts, payers = make_chain(seed, n_accounts=50)
        chain_b = copy.deepcopy(chain_a)
        txs, _ = random_workload(seed, chain_a, accounts, payers, n=200)
        ra = execute_transactions(txs, chain_a)
        rb = execute_sequential(txs, chain_b)
        if ra != rb or _encodings(chain_a) != _encodings(chain_b):
            bad.append(seed)
    elapsed = time.perf_counter() - start
    ok = not bad and elapsed < 30.0
    return ok, (
        f"{n_workloads - len(bad)}/{n_workloads} workloads x 200 txs byte-identical "
        f"in {elapsed:.1f} s (limit 30 s)" + (f"; first mismatch seed {bad[0]}" if bad else "")
    )


# -- sessions shared by 3 and 4 ----------------------------------------------------


def random_session(seed, *, fraud_at=None, fraud_spec=None, allow_release=True):
    """A randomized counter session on a 10 ms-block rollup, run to completion.

    ``fraud_at`` corrupts the commit with that index. Returns the world and the
    session's rollup id.
    """
    rng = random.Random(seed)
    w = CounterWorld(n=rng.randint(1, 4))
    outside = counter_account(f"acc/outside/{seed}", rng.randrange(100))
    w.cluster.base.upsert_account(outside)
    w.pre_delegation = {a: w.cluster.base.get_account(a).encode() for a in w.accounts}
    freq = rng.choice((50, 100, 200, 250))
    lifetime = freq * rng.randint(2, 6)
    er = w.delegate(lifetime_ms=lifetime, commit_frequency_ms=freq)
    rollup = w.cluster.rollup(er)
    if fraud_at is not None:
        produce = rollup.produce_commit

        def corrupting_commit(*args, **kw):
            if len(rollup.commits) == fraud_at:
                rollup.inject_fraud(fraud_spec)
            return produce(*args, **kw)

        rollup.produce_commit = corrupting_commit
    released = False
    t = 0
    while rollup.alive:
        for _ in range(rng.randint(0, 3)):
            target = rng.choice(w.accounts)
            reads = [outside.address] if rng.random() < 0.3 else []
            op = COUNTER_ADD_THEN_FAIL if rng.random() < 0.1 else COUNTER_ADD
            w.cluster.send_instruction(
                PAYER, COUNTER_PROGRAM, [AccountMeta(target, True)] + [AccountMeta(a, False) for a in reads],
                counter_ix(op, rng.randrange(1 << 16)),
            )
        if allow_release and not released and len(w.accounts) > 1 and rng.random() < 0.01:
            w.cluster.undelegate(COUNTER_PROGRAM, w.accounts[-1])
            released = True
        t += 10
        w.cluster.advance_to(t)
    w.cluster.advance(400)  # let base-layer fallbacks land
    return w, er


def _archive_text(world):
    buf = io.StringIO()
    world.cluster.archive.write(buf)
    return buf.getvalue()


# -- 3. settlement equivalence -----------------------------------------------------


def check_settlement_equivalence(tmp_dir, n_sessions=100):
    programs = default_registry()
    bad, commits, verify_fail = [], 0, []
    for seed in range(n_sessions):
        w, er = random_session(seed)
        text = _archive_text(w)
        result = archive_and_replay(io.StringIO(text), programs)[er]
        session = w.cluster.dlp.sessions[er]
        archived = {c.commit_id: c.states for c in w.cluster.archive.sessions[er].commits}
        commits += len(session.commits)
        exact = (
            result.ok
            and len(result.verdicts) == len(session.commits)
            and all(archived[c.commit_id] == c.account_states and c.verified for c in session.commits)
        )
        # the replayed final state reproduces the final commit byte for byte
        final = session.commits[-1].account_states
        exact = exact and all(result.final_states.get(a) == enc for a, enc in final.items())
        if not exact:
            bad.append(seed)
        path = Path(tmp_dir) / f"honest-{seed}.jsonl"
        path.write_text(text)
        if cli_main(["verify", str(path)]) != EXIT_OK:
            verify_fail.append(seed)
    ok = not bad and not verify_fail
    return ok, (
        f"{n_sessions - len(bad)}/{n_sessions} sessions ({commits} commits) replay exactly; "
        f"verify exit 0 on {n_sessions - len(verify_fail)}/{n_sessions} archives"
    )


# -- 4. fraud soundness and liveness -----------------------------------------------


def _fraud_trial(seed):
    honest, er = random_session(seed, allow_release=False)
    n_commits = len(honest.cluster.dlp.sessions[er].commits)
    rng = random.Random(10_000 + seed)
    k = rng.randrange(n_commits)
    w, er = random_session(seed, fraud_at=k, fraud_spec=FraudSpec.random(rng), allow_release=False)
    session = w.cluster.dlp.sessions[er]
    fraud = [c for c in session.commits if c.reverted]
    detected = (
        len(w.cluster.verifier.verdicts) == k + 1
        and not w.cluster.verifier.verdicts[-1].verified
        and fraud
        and fraud[0].commit_id == session.commits[k].commit_id
    )
    if k == 0:
        expect = w.pre_delegation
    else:
        expect = session.commits[k - 1].account_states
    reverted = all(w.cluster.base.get_account(a).encode() == expect[a] for a in w.accounts)
    unlocked = all(w.cluster.base.get_account(a).delegated_to is None for a in w.accounts)
    receipts = [w.add(a, 1) for a in w.accounts]
    w.cluster.advance(400)
    writes_ok = all(w.cluster.submissions[r.tx_id].status == "ok" and r.layer == "base" for r in receipts)
    return bool(detected), reverted, unlocked and writes_ok


def check_fraud(n_trials=200, n_honest=1000):
    detected = reverted = unlocked = 0
    for seed in range(n_trials):
        d, r, u = _fraud_trial(seed)
        detected += d
        reverted += r
        unlocked += u
    false_pos = 0
    for seed in range(n_honest):
        w, _ = random_session(100_000 + seed)
        false_pos += w.cluster.verifier.fraud_count
    ok = detected == reverted == unlocked == n_trials and false_pos == 0
    return ok, (
        f"detected {detected}/{n_trials}, reverted {reverted}/{n_trials}, unlocked+base write {unlocked}/{n_trials}; "
        f"false positives {false_pos} over {n_honest} honest sessions"
    )


# -- 5. no indefinite lock ---------------------------------------------------------


def check_no_indefinite_lock(n_trials=2000):
    rng = random.Random(5)
    wrong = 0
    for _ in range(n_trials):
        clock = SimClock()
        base = BaseChain(default_registry(), clock)
        for r in base.programs:
            base.store(program_account(r))
        acct = counter_account("lock/target")
        base.upsert_account(acct)
        dlp = DelegationProgram(base, clock)
        start = rng.randrange(0, 10_000)
        lifetime = rng.randint(100, 60_000)
        clock.advance_to(start)
        dlp.delegate(COUNTER_PROGRAM, [acct.address], ERConfig(lifetime_ms=lifetime, commit_frequency_ms=lifetime, block_time_ms=10))
        # probe both sides of the boundary, including the exact edges
        early = rng.choice((start, start + lifetime - 1, start + rng.randrange(lifetime)))
        late = rng.choice((start + lifetime, start + lifetime + rng.randrange(60_000)))
        clock.advance_to(early)
        try:
            dlp.undelegate(STRANGER, acct.address)
            wrong += 1
        except LifetimeNotExpired:
            pass
        clock.advance_to(late)
        try:
            dlp.undelegate(STRANGER, acct.address)
        except LifetimeNotExpired:
            wrong += 1
        if base.get_account(acct.address).delegated_to is not None:
            wrong += 1
    # same rule through a full cluster whose rollup has stopped responding
    stuck = 0
    for i in range(50):
        lifetime = rng.randint(100, 60_000)
        w = CounterWorld(n=1)
        w.delegate(lifetime_ms=lifetime, commit_frequency_ms=lifetime)
        w.cluster.provisioner.paused = True
        w.cluster.advance_to(lifetime - 1)
        try:
            w.cluster.undelegate(STRANGER, w.accounts[0])
            stuck += 1
        except LifetimeNotExpired:
            pass
        w.cluster.advance_to(lifetime)
        w.cluster.undelegate(STRANGER, w.accounts[0])
        r = w.add(w.accounts[0], 1)
        w.cluster.advance(400)
        if w.cluster.submissions[r.tx_id].status != "ok":
            stuck += 1
    ok = wrong == 0 and stuck == 0
    return ok, (
        f"{n_trials - wrong}/{n_trials} randomized lifetimes in [100 ms, 60 s] honour the boundary; "
        f"{50 - stuck}/50 unresponsive-rollup sessions unlocked by a stranger at expiry"
    )


# -- 6. Fig. 1 scenario ------------------------------------------------------------


def fig1_oracle(scenario):
    """Replays the scenario's scripted actions with plain integers."""
    pos = {}
    chest = {}
    for w in scenario.worlds:
        for e in w.entities:
            p = e.components.get("Position", {})
            pos[e.name] = [p.get("x", 0), p.get("y", 0), p.get("z", 0)]
            c = e.components.get("Chest", {})
            chest[e.name] = [c.get("amount", 0), c.get("opened", 0)]
    for act in scenario.workload:
        if act.action != "system":
            continue
        p, args = act.params, act.params["args"]
        for name in p["entities"]:
            if p["system"] == "movement":
                pos[name] = [pos[name][0] + args["dx"], pos[name][1] + args["dy"], pos[name][2] + args["dz"]]
            elif p["system"] == "reward" and pos[name][:2] == [args["target_x"], args["target_y"]]:
                chest[name] = [chest[name][0] + args["amount"], chest[name][1] + 1]
    return pos, chest


def check_fig1():
    scenario = load_scenario("fig1_reward")
    run = ScenarioRun(scenario)
    m = run.run()
    pos, chest = fig1_oracle(scenario)
    base = run.cluster.base
    got_chest, got_pos = {}, {}
    for name in pos:
        c = CHEST.decode(split_component(base.get_account(run.component(f"{name}.Chest")).data)[3])
        p = POSITION.decode(split_component(base.get_account(run.component(f"{name}.Position")).data)[3])
        got_chest[name] = [c["amount"], c["opened"]]
        got_pos[name] = [p["x"], p["y"], p["z"]]
    labels = [
        d for req, d in run.cluster.router.trace if req["op"] == "send" and req["tx"] not in run.setup_ids
    ]
    assert len(labels) == sum(a.action == "system" for a in scenario.workload)
    reward_routes = {d.label() for d in labels[-2:]}
    moves_on_er = all(d.label().startswith("ER(") for d in labels[:4])
    ok = (
        got_chest == chest
        and got_pos == pos
        and chest["alice"] == [7, 1]
        and reward_routes == {"BaseLayer"}
        and moves_on_er
        and m.fraud == 0
        and m.reconciles
    )
    return ok, (
        f"chest {got_chest} vs oracle {chest}; positions {got_pos}; "
        f"moves on ER={moves_on_er}, reward routed {sorted(reward_routes)}"
    )


# -- 7. throughput arithmetic ------------------------------------------------------


def check_throughput():
    run = ScenarioRun(load_scenario("throughput"))
    m = run.run()
    er_subs = [s for s in run.cluster.submissions.values() if s.layer and s.layer != "base"]
    worst = max(s.latency_ms for s in er_subs)
    ok = m.er_included == 10_000 and len(er_subs) == 10_000 and m.rejected == 0 and worst <= 20
    return ok, f"{m.er_included} ER-included transactions (need exactly 10000), max latency {worst} ms (limit 20 ms)"


# -- 8. tick vs derived energy -------------------------------------------------------


def check_energy():
    scenario = load_scenario("energy")
    run = ScenarioRun(scenario)
    run.setup()
    for spec in scenario.rollups:
        run._launch(spec)
    c = run.cluster
    world_id, entity = run.entities["hero"]
    addr = run.component("hero.Energy")
    mismatches, checked = [], 0
    for t in range(0, scenario.duration_ms + 1, 30_000):
        c.advance_to(t)
        _, accts = c.read([addr])
        ticked = ENERGY.decode(split_component(accts[addr].data)[3])["value"]
        derived = read_derived(c, world_id, entity, DERIVED_ENERGY, t)["value"]
        closed = oracles.energy_closed_form(5, 1, 30_000, 0, t)
        checked += 1
        if not ticked == derived == closed:
            mismatches.append((t, ticked, derived, closed))
    at_90 = read_derived(c, world_id, entity, DERIVED_ENERGY, 90_000)["value"]
    ok = not mismatches and checked == 21 and at_90 == 8
    return ok, (
        f"tick == derived == closed form at {checked - len(mismatches)}/{checked} boundaries over 600 s; "
        f"derived(90 s, base 5) = {at_90}" + (f"; first mismatch {mismatches[0]}" if mismatches else "")
    )


# -- 9. determinism ----------------------------------------------------------------


def check_determinism():
    names = bundled_scenarios()
    same = 0
    for name in names:
        a = report(ScenarioRun(load_scenario(name)).run(), "jsonl")
        b = report(ScenarioRun(load_scenario(name)).run(), "jsonl")
        same += a == b
    return same == len(names), f"{same}/{len(names)} bundled scenarios produce byte-identical reports across two runs"


# -- pytest entry points -----------------------------------------------------------


def _report(capsys, n, result):
    ok, detail = result
    with capsys.disabled():
        verdict(n, ok, detail)


def test_criterion_1_routing_table(capsys):
    _report(capsys, 1, check_routing_table())


def test_criterion_2_scheduler_equivalence(capsys):
    _report(capsys, 2, check_scheduler_equivalence())


def test_criterion_3_settlement_equivalence(capsys, tmp_path):
    _report(capsys, 3, check_settlement_equivalence(tmp_path))


def test_criterion_4_fraud_soundness_and_liveness(capsys):
    _report(capsys, 4, check_fraud())


def test_criterion_5_no_indefinite_lock(capsys):
    _report(capsys, 5, check_no_indefinite_lock())


def test_criterion_6_fig1_scenario(capsys):
    _report(capsys, 6, check_fig1())


def test_criterion_7_throughput(capsys):
    _report(capsys, 7, check_throughput())


def test_criterion_8_tick_vs_derived_energy(capsys):
    _report(capsys, 8, check_energy())


def test_criterion_9_determinism(capsys):
    _report(capsys, 9, check_determinism())


if __name__ == "__main__":
    import tempfile

    checks = [
        check_routing_table,
        check_scheduler_equivalence,
        lambda: check_settlement_equivalence(tempfile.mkdtemp()),
        check_fraud,
        check_no_indefinite_lock,
        check_fig1,
        check_throughput,
        check_energy,
        check_determinism,
    ]
    failed = 0
    for n, check in enumerate(checks, 1):
        ok, detail = check()
        print(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        failed += not ok
    sys.exit(1 if failed else 0)
