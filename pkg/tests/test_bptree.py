import random
import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import OrderTree, packing_height, packing_internal_count, replay_trace
from persistkit.bptree import (
    MAX_BUCKET,
    MAX_KEYS,
    MIN_BUCKET,
    TREE_BUGS,
    RecoverableBPlusTree,
    arena_lengths,
    pack_sizes,
)
from persistkit.errors import (
    AlreadyInitialized,
    ConfigError,
    CorruptionError,
    DuplicateKeyError,
    KeyNotFound,
    NotInitialized,
    UnsupportedOperation,
)
from persistkit.region import Arena, Backend, create_region, layout_capacity, open_region
from persistkit.staging import Mode, payload_word

MODES = list(Mode)


def make_region(max_keys=4096, mode=Mode.PARTLY, backend=Backend.SIM, path=None):
    layout = arena_lengths(max_keys, mode)
    return create_region(path, layout_capacity(layout), backend, layout)


def make_tree(mode=Mode.PARTLY, max_keys=4096):
    r = make_region(max_keys, mode)
    return r, RecoverableBPlusTree.create(r, mode)


def content(tree):
    return {k: payload_word(v) for k, v in tree.items()}


def flushes(region, fn):
    before = region.line_flushes
    fn()
    return region.line_flushes - before


def test_init_and_double_init():
    r, tree = make_tree()
    assert tree.find(123) is None and len(tree) == 0
    with pytest.raises(AlreadyInitialized):
        RecoverableBPlusTree.create(r)


def test_init_crash_reopen_is_empty(tmp_path):
    path = tmp_path / "t.region"
    r = make_region(backend=Backend.FILE, path=path)
    RecoverableBPlusTree.create(r)
    r.close()
    again = open_region(path)
    tree = RecoverableBPlusTree.reconstruct(again)
    assert again.init_flag(Arena.TREE_HEADER)
    assert tree.root is None and tree.stats().height == 0
    again.close()


def test_uninitialized_reconstruct_raises():
    with pytest.raises(NotInitialized):
        RecoverableBPlusTree.reconstruct(make_region())


def test_insert_into_empty_tree_flushes_record_leaf_lines_and_header():
    r, tree = make_tree()
    r.trace = []
    assert flushes(r, lambda: tree.insert(5, 50)) == 4
    assert tree.root.is_leaf and tree.root.keys == [5]
    # one record line, leaf line 0 (count + first key) and line 2 (first link), header
    assert [e[1] for e in r.trace if e[0] == "f"] == [
        tree.root.links[0],
        tree.root.offset,
        tree.root.offset + 128,
        r.arena(Arena.TREE_HEADER).base,
    ]


def test_nineteen_sequential_inserts_split_once():
    _, tree = make_tree()
    for k in range(19):
        tree.insert(k, k)
    leaves = list(tree.leaves())
    assert [len(leaf.keys) for leaf in leaves] == [9, 10]
    assert tree.stats().height == 2


def test_duplicate_insert_rejected_without_flushes():
    r, tree = make_tree()
    tree.insert(1, 1)
    before = (r.line_flushes, r.fences)
    with pytest.raises(DuplicateKeyError):
        tree.insert(1, 2)
    assert (r.line_flushes, r.fences) == before
    assert content(tree) == {1: 1}


def test_keys_are_signed_64_bit():
    _, tree = make_tree()
    for k in (-(1 << 63), -1, 0, (1 << 63) - 1):
        tree.insert(k, 7)
    assert sorted(content(tree)) == [-(1 << 63), -1, 0, (1 << 63) - 1]
    with pytest.raises(ConfigError):
        tree.insert(1 << 63, 0)


def test_delete_last_key_empties_tree_and_flushes_header():
    r, tree = make_tree()
    tree.insert(3, 3)
    r.trace = []
    tree.delete(3)
    hdr = r.arena(Arena.TREE_HEADER).base
    assert [e[1] for e in r.trace if e[0] == "f"] == [hdr]
    assert tree.root is None and len(tree) == 0
    rec = RecoverableBPlusTree.reconstruct(r.simulate_crash())
    assert rec.root is None


def test_delete_absent_key_raises_without_flushes():
    r, tree = make_tree()
    tree.insert(1, 1)
    before = (r.line_flushes, r.fences)
    with pytest.raises(KeyNotFound):
        tree.delete(2)
    with pytest.raises(KeyNotFound):
        make_tree()[1].delete(2)
    assert (r.line_flushes, r.fences) == before


def _merge_setup(mode):
    r, tree = make_tree(mode)
    for k in range(19):
        tree.insert(k, k)
    return r, tree


@pytest.mark.parametrize("mode", MODES)
def test_delete_causing_merge_flushes_only_leaves_in_partly_modes(mode):
    r, tree = _merge_setup(mode)
    assert len(list(tree.leaves())) == 2
    r.trace = []
    tree.delete(0)
    assert len(list(tree.leaves())) == 1
    flushed = {e[1] for e in r.trace if e[0] == "f"}
    leaf_arena = r.arena(Arena.TREE_LEAVES)
    internal = r.arena(Arena.TREE_INTERNAL)
    hdr = r.arena(Arena.TREE_HEADER).base
    if mode is Mode.FULL:
        # the surviving leaf loses its parent link and the header loses its root
        assert hdr in flushed
    else:
        assert all(leaf_arena.base <= f < leaf_arena.end for f in flushed)
        assert not any(internal.base <= f < internal.end for f in flushed)
    assert content(tree) == {k: k for k in range(1, 19)}
    tree.check_structure()


def test_find_matches_sorted_array_over_10k_keys():
    _, tree = make_tree(max_keys=12000)
    rng = random.Random(4)
    keys = rng.sample(range(-(10**9), 10**9), 10_000)
    for k in keys:
        tree.insert(k, k * 3)
    ordered = sorted(keys)
    assert [k for k, _ in tree.items()] == ordered
    assert all(payload_word(tree.find(k)) == k * 3 for k in keys)
    for probe in rng.sample(range(-(10**9), 10**9), 500):
        assert (tree.find(probe) is not None) == (probe in set(keys))


def test_find_is_read_only():
    r, tree = make_tree()
    for k in range(50):
        tree.insert(k, k)
    before = (r.line_flushes, r.fences)
    for k in range(60):
        tree.find(k)
    assert (r.line_flushes, r.fences) == before
    tree.delete(7)
    assert tree.find(7) is None


@given(st.lists(st.integers(-(10**6), 10**6), unique=True, max_size=800))
def test_leaf_partition_matches_reference_tree(keys):
    _, tree = make_tree()
    ref = OrderTree(19)
    for k in keys:
        tree.insert(k, 0)
        ref.insert(k)
    assert [leaf.keys for leaf in tree.leaves()] == ref.leaf_partition()
    assert tree.stats().height == ref.height()
    tree.check_structure()


@pytest.mark.parametrize("mode", MODES)
@given(
    ops=st.lists(st.tuples(st.booleans(), st.integers(0, 400)), max_size=250),
    cut=st.integers(0, 250),
)
def test_recovery_at_op_boundary_matches_reference(mode, ops, cut):
    r, tree = make_tree(mode, 512)
    ref: dict[int, int] = {}
    snapshot = None
    for i, (ins, k) in enumerate(ops):
        if i == cut:
            snapshot = (r.simulate_crash(), dict(ref))
        if ins and k not in ref:
            tree.insert(k, k + 1)
            ref[k] = k + 1
        elif not ins and k in ref:
            tree.delete(k)
            del ref[k]
    if snapshot is None:
        snapshot = (r.simulate_crash(), dict(ref))
    crashed, expected = snapshot
    rec = RecoverableBPlusTree.reconstruct(crashed)
    rec.check_structure()
    assert content(rec) == expected
    assert all(payload_word(rec.find(k)) == v for k, v in expected.items())


def test_random_10k_trace_keeps_invariants_and_reconstructs():
    r, tree = make_tree(Mode.PARTLY, 8000)
    rng = random.Random(11)
    live: list[int] = []
    ref = {}
    for step in range(10_000):
        if live and rng.random() < 0.45:
            k = live.pop(rng.randrange(len(live)))
            tree.delete(k)
            del ref[k]
        else:
            k = rng.getrandbits(40)
            if k in ref:
                continue
            tree.insert(k, k)
            live.append(k)
            ref[k] = k
        if step % 1000 == 0:
            tree.check_structure()
    tree.check_structure()
    assert content(tree) == ref
    rec = RecoverableBPlusTree.reconstruct(r.simulate_crash())
    rec.check_structure()
    assert content(rec) == ref


def _ascending(n, mode=Mode.PARTLY):
    r, tree = make_tree(mode, n + 64)
    for k in range(n):
        tree.insert(k, k)
    return r, tree


def test_361_leaves_pack_into_19_plus_root():
    # ascending inserts leave 9 keys behind per split: 19 + 9 * 359 keys give 361 leaves
    r, tree = _ascending(19 + 9 * 359)
    assert len(list(tree.leaves())) == 361
    rec = RecoverableBPlusTree.reconstruct(r.simulate_crash(), 19)
    s = rec.stats()
    assert (s.n, s.internal_nodes, s.height, s.t) == (361, 20, 3, 19.0)
    assert len(rec.root.links) == 19
    rec.check_structure()


@pytest.mark.parametrize("n_keys", [1, 18, 19, 200, 1000, 3000])
@pytest.mark.parametrize("bucket", [MIN_BUCKET, 14, MAX_BUCKET])
def test_reconstruction_respects_bucket_size_and_invariants(n_keys, bucket):
    r, tree = _ascending(n_keys)
    leaves = len(list(tree.leaves()))
    rec = RecoverableBPlusTree.reconstruct(r.simulate_crash(), bucket)
    rec.check_structure()
    s = rec.stats()
    assert s.n == leaves
    if bucket == MAX_BUCKET:
        assert s.internal_nodes == packing_internal_count(leaves, bucket)
        assert s.height == packing_height(leaves, bucket)


@given(st.integers(1, 5000), st.integers(MIN_BUCKET, MAX_BUCKET))
def test_pack_sizes_cover_children_within_fanout(count, bucket):
    sizes = pack_sizes(count, bucket)
    assert sum(sizes) == count
    assert max(sizes) - min(sizes) <= 1
    if len(sizes) > 1:
        assert min(sizes) >= 10 and max(sizes) <= 19
    if bucket == MAX_BUCKET:
        assert len(sizes) == -(-count // bucket)


def test_bucket_size_out_of_range_rejected():
    r, _ = make_tree()
    for bad in (MIN_BUCKET - 1, MAX_BUCKET + 1):
        with pytest.raises(ConfigError):
            RecoverableBPlusTree.reconstruct(r, bad)


def test_stats_single_leaf():
    _, tree = make_tree()
    tree.insert(1, 1)
    s = tree.stats()
    assert (s.n, s.internal_nodes, s.height) == (1, 0, 1)
    assert s.reduction_factor == 1.0


def test_reconstruction_rejects_bad_leftmost_and_key_order():
    r, tree = _ascending(40)
    hdr = r.arena(Arena.TREE_HEADER).base
    crashed = r.simulate_crash()
    crashed.write(hdr, struct.pack("<Q", hdr + 8))
    crashed.flush(hdr, 8)
    crashed.fence()
    with pytest.raises(CorruptionError):
        RecoverableBPlusTree.reconstruct(crashed)

    crashed = r.simulate_crash()
    second = list(tree.leaves())[1]
    crashed.write(second.offset + 24, struct.pack("<q", -5))
    crashed.flush(second.offset + 24, 8)
    crashed.fence()
    with pytest.raises(CorruptionError, match="order"):
        RecoverableBPlusTree.reconstruct(crashed)


def test_full_mode_reconstruction_restores_persistent_internal_nodes():
    r, tree = _ascending(500, Mode.FULL)
    rec = RecoverableBPlusTree.reconstruct(r.simulate_crash())
    rec.check_structure()
    for node in rec._all_nodes():
        assert rec.region.read(node.offset, 256) == rec.image(node)


@given(st.lists(st.integers(0, 10**6), unique=True, min_size=1, max_size=400))
def test_partly_never_flushes_more_than_full(keys):
    counts = {}
    for mode in (Mode.PARTLY, Mode.FULL):
        r, tree = make_tree(mode, 512)
        r.reset_stats()
        for k in keys:
            tree.insert(k, k)
        for k in keys[::3]:
            tree.delete(k)
        counts[mode] = r.line_flushes
    assert counts[Mode.PARTLY] <= counts[Mode.FULL]
    if len(keys) > MAX_KEYS:
        assert counts[Mode.PARTLY] < counts[Mode.FULL]


def test_only_dirty_lines_are_flushed():
    r, tree = make_tree(Mode.FULL)
    r.trace = []
    r.reset_stats()
    rng = random.Random(2)
    keys = rng.sample(range(10**6), 600)
    for k in keys:
        tree.insert(k, k)
    for k in keys[:300]:
        tree.delete(k)
    replay = replay_trace(r.trace)
    assert replay.clean_line_flushes == 0
    assert replay.line_flushes == r.line_flushes


@pytest.mark.parametrize("bug", TREE_BUGS)
def test_volatile_bugs_do_not_reach_persistent_state(bug):
    for seed in range(15):
        r, tree = make_tree(Mode.PARTLY_CKPT)
        rng = random.Random(seed)
        for k in rng.sample(range(10**6), 120):
            tree.insert(k, k)
        before = content(tree)
        tree.inject_bug(bug, random.Random(seed))
        rec = RecoverableBPlusTree.reconstruct(r.simulate_crash())
        rec.check_structure()
        assert content(rec) == before


def test_bug_injection_requires_checkpoint_mode():
    _, tree = make_tree(Mode.FULL)
    tree.insert(1, 1)
    with pytest.raises(UnsupportedOperation):
        tree.inject_bug("SelfLoopNext", random.Random(0))
