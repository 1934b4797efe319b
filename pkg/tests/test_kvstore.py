import random
from decimal import Decimal

import pytest
from hypothesis import given, settings, strategies as st

from slsm import Predicate, Statement
from slsm.bench.hopaudit import example_database, user_split_spec
from slsm.keys import encode_key, encode_prefix, encode_prefixed_key, prefix_end
from slsm.kvstore import Cluster, LockViolation, RoutingViolation, SplitRejected, dump_values, load_values


class AllowAll:
    def check(self, key, write):
        pass


OK = AllowAll()


def linear_route(cluster, key):
    hits = [r for r in cluster.ranges if r.start <= key and (r.end is None or key < r.end)]
    assert len(hits) == 1
    return hits[0].range_id, hits[0].leaseholder


def assert_partition(cluster):
    rs = cluster.ranges
    assert rs[0].start == b"" and rs[-1].end is None
    for a, b in zip(rs, rs[1:]):
        assert a.end == b.start and a.start < b.start
    for r in rs:
        assert r.leaseholder in r.replicas


def test_single_node_routes_everything_to_it():
    c = Cluster([4])
    for k in (b"", b"\x00", encode_key(51, (1001,)), b"\xff" * 20):
        assert c.route(k)[1] == 4


def test_user_range_leased_to_node1():
    # user table in its own range, leased to node 1, other ranges on node 2
    c = Cluster([1, 2, 3])
    c.split_range(prefix_end(encode_prefix(51)), 2)
    r2 = c.split_range(encode_prefix(51), 1)
    assert c.route(encode_key(51, (1001,))) == (r2, 1)
    assert c.leaseholder(encode_key(52, (1,))) == 2


def test_route_matches_linear_scan_10k():
    rng = random.Random(3)
    c = Cluster([1, 2, 3])
    for _ in range(60):
        c.split_range(encode_key(rng.randint(1, 9), (rng.randint(0, 5000),)), rng.choice(c.nodes))
    for r in rng.sample(c.ranges, 10):
        c.transfer_lease(r.range_id, rng.choice(c.nodes))
    assert_partition(c)
    for _ in range(10_000):
        k = encode_key(rng.randint(0, 10), (rng.randint(-10, 5010),))
        assert c.route(k) == linear_route(c, k)


def test_split_keeps_coverage_and_lease_transfer():
    c = Cluster([1, 2, 3])
    b = encode_key(51, (500,))
    rid = c.split_range(b)
    assert_partition(c)
    assert len(c.ranges) == 2
    assert c.split_range(b) == rid  # idempotent
    c.transfer_lease(rid, 3)
    for i in range(500, 1000, 37):
        assert c.route(encode_key(51, (i,))) == (rid, 3)
    assert c.leaseholder(encode_key(51, (499,))) == 1
    with pytest.raises(ValueError):
        c.transfer_lease(rid, 9)


def test_split_inside_prefix_group_rejected():
    c = Cluster([1, 2])
    with pytest.raises(SplitRejected):
        c.split_range(encode_prefixed_key(51, (1001,), 71))
    c.register_group_arity(60, 2)
    c.split_range(encode_key(60, (1, 2)))
    with pytest.raises(SplitRejected):
        c.split_range(encode_key(60, (1, 2, 3)))
    with pytest.raises(SplitRejected):
        c.split_range(b"\x00\x00")


def test_put_get_delete_scan():
    c = Cluster([1, 2])
    k = encode_key(51, (1,))
    assert c.put(1, k, (Decimal("1.50"), "x"), OK) is None
    assert c.get(1, k, OK) == (Decimal("1.50"), "x")
    assert c.scan(1, encode_prefix(52), prefix_end(encode_prefix(52)), OK) == []
    assert c.delete(1, k, OK) == (Decimal("1.50"), "x")
    assert c.get(1, k, OK) is None


def test_non_leaseholder_access_rejected():
    c = Cluster([1, 2])
    k = encode_key(51, (1,))
    with pytest.raises(RoutingViolation):
        c.get(2, k, OK)
    with pytest.raises(RoutingViolation):
        c.put(2, k, (1,), OK)
    mid = c.split_range(encode_key(51, (5,)), 2)
    assert mid
    with pytest.raises(RoutingViolation):
        c.scan(1, encode_key(51, (0,)), encode_key(51, (9,)), OK)  # crosses into node 2's range
    with pytest.raises(LockViolation):
        c.get(1, k, None)


def test_dump_load_round_trip():
    c = Cluster([1])
    c.bulk_load([(encode_key(5, (i,)), (i, f"v{i}", Decimal(i) / 4, None)) for i in range(20)])
    text = c.dump()
    d = Cluster([1])
    d.load(text)
    assert d.dump() == text and dict(d.data) == dict(c.data)
    vals = (1, "a\tb", Decimal("-0.10"), None)
    assert load_values(dump_values(vals)) == vals


def test_migrated_prefix_group_holds_one_rights_row():
    db = example_database(old_node=1)
    db.register_migration(user_split_spec("slsm_full"), new_leases=lambda i: 1)
    db.run(Statement.select("user_rights", Predicate.eq(id=1001)), gateway=2)
    old = encode_key(51, (1001,))
    group = list(db.cluster.keys_in(old, prefix_end(old)))
    rights = [k for k in group if k.startswith(encode_prefixed_key(51, (1001,), 71))]
    assert rights == [encode_prefixed_key(51, (1001,), 71)]
    # the user row itself is gone; only the split-out rows remain in the group
    assert old not in group
    assert {k[len(old) + 1:len(old) + 5] for k in group} == {b"\x00\x00\x00\x47", b"\x00\x00\x00\x48"}


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_colocation_survives_random_splits(data):
    rng = random.Random(data.draw(st.integers(0, 2 ** 32)))
    c = Cluster([1, 2, 3])
    c.register_group_arity(51, 1)
    ids = rng.sample(range(100_000), 1000)
    for _ in range(data.draw(st.integers(1, 40))):
        b = encode_key(51, (rng.randrange(100_000),))
        if rng.random() < 0.2:
            b = encode_prefixed_key(51, (rng.randrange(100_000),), 71)
        try:
            c.split_range(b, rng.choice(c.nodes))
        except SplitRejected:
            pass
        if rng.random() < 0.3:
            c.transfer_lease(rng.choice(c.ranges).range_id, rng.choice(c.nodes))
    assert_partition(c)
    for i in ids:
        assert c.route(encode_key(51, (i,))) == c.route(encode_prefixed_key(51, (i,), 71, (rng.randint(0, 9),)))
