import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ephemera.address import Address
from ephemera.cluster import Cluster
from ephemera.delegation import ERConfig
from ephemera.ecs.derived import DERIVED_ENERGY, read_derived
from ephemera.ecs.observe import Observer
from ephemera.ecs.registry import Registry, SystemRecord, discover, import_records
from ephemera.ecs.schema import HEADER_LEN, ComponentSchema, dump_schemas, parse_schemas
from ephemera.ecs.systems import CHEST, ENERGY_RULE, MOVEMENT, POSITION, REWARD, SystemDef
from ephemera.ecs.world import WORLD_PROGRAM, World, component_address, world_address
from ephemera.errors import DuplicateComponent, SchemaError, UnknownEntity, UnknownProgram

import oracles

ADMIN = Address.from_label("test/ecs/admin")


class Game:
    """One world, two entities with Position and Chest, all on the base layer."""

    def __init__(self, world_id=7):
        self.cluster = c = Cluster()
        c.fund(ADMIN, 10**15)
        self.registry = Registry(c, ADMIN)
        self.registry.init()
        for schema in (POSITION, CHEST, ENERGY_RULE):
            self.registry.publish_schema(schema)
        for sd in (MOVEMENT, REWARD):
            self.registry.publish_system(SystemRecord.from_system(sd))
        self.world = World.create(c, world_id, ADMIN)
        self.entities = []
        for _ in range(2):
            e, _ = self.world.create_entity()
            self.world.attach_component(e, POSITION, {"x": 0, "y": 0, "z": 0})
            self.world.attach_component(e, CHEST, {})
            self.entities.append(e)
        c.advance(400)
        assert all(s.status == "ok" for s in c.submissions.values())

    def position(self, e):
        return self.world.read_component(e, POSITION)


@pytest.fixture
def game():
    return Game()


def test_entity_ids_sequential(game):
    assert game.entities == [0, 1]
    assert list(game.world.entities()) == [0, 1]
    fresh = World(game.cluster, game.world.world_id, ADMIN)
    assert fresh.next_entity_id() == 2


def test_attach_checks(game):
    with pytest.raises(DuplicateComponent):
        game.world.attach_component(0, POSITION)
    with pytest.raises(UnknownEntity):
        game.world.attach_component(5, POSITION)


def test_component_address_matches_oracle():
    sid = oracles.schema_id("Position", [("x", "i64", "tiles"), ("y", "i64", "tiles"), ("z", "i64", "tiles")])
    assert sid == POSITION.schema_id
    assert component_address(7, 1, POSITION) == oracles.pda(bytes(WORLD_PROGRAM), [7, 1, sid])
    assert world_address(7) == oracles.pda(bytes(WORLD_PROGRAM), ["world", 7])


def test_system_runs_on_base_then_on_rollup(game):
    c = game.cluster
    receipt = game.world.run_system(MOVEMENT, [0], {"dx": 2, "dy": 1, "dz": 0})
    assert receipt.layer == "base"
    c.advance(400)
    assert game.position(0) == {"x": 2, "y": 1, "z": 0}
    addrs = [component_address(7, e, s) for e in game.entities for s in (POSITION, CHEST)]
    er = c.delegate(WORLD_PROGRAM, addrs, ERConfig(lifetime_ms=2000, commit_frequency_ms=500, block_time_ms=10))
    receipt = game.world.run_system(MOVEMENT, [0], {"dx": 1, "dy": 1, "dz": 0})
    assert receipt.layer == er
    c.advance(10)
    receipt = game.world.run_system(REWARD, [0], {"target_x": 3, "target_y": 2, "amount": 7})
    miss = game.world.run_system(REWARD, [1], {"target_x": 3, "target_y": 2, "amount": 7})
    c.advance(10)
    assert c.submissions[receipt.tx_id].status == "ok"
    assert c.submissions[miss.tx_id].status == "failed:not-at-target"
    assert game.world.read_component(0, CHEST) == {"amount": 7, "opened": 1}
    c.settle(er)
    assert CHEST.decode(c.base.get_account(addrs[1]).data[HEADER_LEN:]) == {"amount": 7, "opened": 1}


def test_registry_publish_and_discover(game):
    schemas, records = game.registry.contents()
    assert [s.name for s in schemas] == ["Position", "Chest", "EnergyRule"]
    assert [r.name for r in records] == ["movement", "reward"]
    assert [r.name for r in game.registry.discover_systems(schema_ids=[CHEST.schema_id])] == ["reward"]
    assert [r.name for r in game.registry.discover_systems(name="move")] == ["movement"]
    game.registry.publish_system(SystemRecord.from_system(MOVEMENT, version=2))
    game.registry.publish_system(SystemRecord.from_system(MOVEMENT, version=2))
    game.cluster.advance(400)
    statuses = [s.status for s in list(game.cluster.submissions.values())[-2:]]
    assert statuses == ["ok", "failed:version-not-increasing"]
    assert [r.version for r in game.registry.discover_systems(name="movement")] == [2, 1]


def test_registry_rejects_unknown_program(game):
    ghost = SystemDef("ghost", (), (POSITION,), lambda rows, args, ctx: None)
    with pytest.raises(UnknownProgram):
        game.registry.publish_system(SystemRecord.from_system(ghost))


def test_discover_orders_by_name_then_newest():
    recs = [SystemRecord("b", 1, ADMIN), SystemRecord("a", 1, ADMIN), SystemRecord("a", 3, ADMIN)]
    assert [(r.name, r.version) for r in discover(recs)] == [("a", 3), ("a", 1), ("b", 1)]


def test_registry_export_round_trip(game):
    schemas, records = import_records(game.registry.export_records())
    assert (schemas, records) == game.registry.contents()


field_types = st.sampled_from(["i64", "u64", "f64", "bool", "bytes4"])
names = st.from_regex(r"[a-z][a-z0-9_]{0,8}", fullmatch=True)


def _value(t):
    return {
        "i64": st.integers(-(2**63), 2**63 - 1),
        "u64": st.integers(0, 2**64 - 1),
        "f64": st.floats(allow_nan=False),
        "bool": st.booleans(),
        "bytes4": st.binary(min_size=4, max_size=4),
    }[t]


@st.composite
def schema_and_values(draw):
    fs = draw(st.lists(st.tuples(names, field_types), min_size=1, max_size=6, unique_by=lambda f: f[0]))
    schema = ComponentSchema.of("S", *fs)
    values = {n: draw(_value(t)) for n, t in fs}
    return schema, values


@settings(max_examples=200, deadline=None)
@given(schema_and_values())
def test_schema_codec_round_trip(sv):
    schema, values = sv
    enc = schema.encode(values)
    assert len(enc) == schema.size
    assert schema.decode(enc) == values
    assert ComponentSchema.from_layout_bytes(schema.layout_bytes()) == schema


def test_schema_text_round_trip():
    text = "[Health]\nhp = u64 points\nalive = bool\n\n[Tag]\nid = bytes8\n"
    schemas = parse_schemas(text)
    assert parse_schemas(dump_schemas(schemas)) == schemas
    assert schemas[0].decode(schemas[0].encode({"hp": 3})) == {"hp": 3, "alive": False}
    with pytest.raises(SchemaError):
        parse_schemas("[A]\nx = i32\n")
    with pytest.raises(SchemaError):
        POSITION.encode({"x": 2**63})


def test_derived_energy(game):
    e = game.entities[0]
    game.world.attach_component(e, ENERGY_RULE, {"base": 5, "rate": 1, "period_ms": 30_000, "start_ms": 0})
    game.cluster.advance(400)
    before = dict(game.cluster.base.accounts)
    assert read_derived(game.cluster, 7, e, DERIVED_ENERGY, 90_000) == {"value": 8}
    for t in range(0, 600_001, 30_000):
        got = read_derived(game.cluster, 7, e, DERIVED_ENERGY, t)["value"]
        assert got == oracles.energy_closed_form(5, 1, 30_000, 0, t)
    assert game.cluster.base.accounts == before


def test_observer_decodes_updates(game):
    obs = Observer(game.cluster.router, 7, [POSITION])
    game.world.run_system(MOVEMENT, [1], {"dx": -1, "dy": 4, "dz": 2})
    game.cluster.advance(400)
    [upd] = obs.poll()
    assert (upd.entity, upd.schema, upd.new, upd.source) == (1, "Position", {"x": -1, "y": 4, "z": 2}, "base")
    assert upd.new == game.position(1)
    obs.close()
    game.world.run_system(MOVEMENT, [1], {"dx": 1, "dy": 0, "dz": 0})
    game.cluster.advance(400)
    assert obs.poll() == []


def test_schema_copies_after_first_use():
    import copy
    import pickle

    POSITION.encode({"x": 1, "y": 2, "z": 3})  # populates the cached struct
    assert copy.deepcopy(POSITION) is POSITION
    assert pickle.loads(pickle.dumps(POSITION)) == POSITION
