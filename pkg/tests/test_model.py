import numpy as np
import pytest

from fedsplit import nn
from fedsplit.model import (
    MultiTaskModel,
    TaskSpec,
    joint_loss,
    load_model,
    merge_tasks,
    reconstruct,
    save_model,
    split_model,
)

FIVE = [TaskSpec(t, 2) for t in "abcde"]


def make_batch(gen, model, rows=6):
    targets = {t: gen.standard_normal((rows, model.arch.out_dim(t))) for t in model.tasks}
    return nn.Batch(gen.standard_normal((rows, model.arch.input_dim)), targets)


# ---------------------------------------------------------------------------
# merge_tasks


def test_merge_five_specs_one_trunk_five_heads():
    m = merge_tasks(FIVE, input_dim=4, hidden_dims=(6, 5), seed=1)
    assert m.tasks == ("a", "b", "c", "d", "e")
    assert len(m.heads) == 5
    assert m.trunk.names() == ("trunk.0.w", "trunk.0.b", "trunk.1.w", "trunk.1.b")


def test_merge_single_spec_is_identity_grouping():
    m = merge_tasks([TaskSpec("a", 3)], input_dim=4, hidden_dims=(6, 5), seed=1)
    assert m.tasks == ("a",)


def test_merge_same_seed_bit_identical():
    a = merge_tasks(FIVE, 4, (6, 5), seed=9)
    b = merge_tasks(FIVE, 4, (6, 5), seed=9)
    assert a.assemble().values.tobytes() == b.assemble().values.tobytes()
    c = merge_tasks(FIVE, 4, (6, 5), seed=10)
    assert a.assemble().values.tobytes() != c.assemble().values.tobytes()


def test_merge_duplicate_ids_rejected():
    with pytest.raises(ValueError, match="duplicate"):
        merge_tasks([TaskSpec("a", 2), TaskSpec("a", 2)], 4, (6, 5), seed=0)


def test_merge_init_within_glorot_bound_and_zero_bias():
    m = merge_tasks(FIVE, 4, (6, 5), seed=2)
    w = m.trunk.view("trunk.0.w")
    bound = np.sqrt(6.0 / (4 + 6))
    assert np.all(np.abs(w) <= bound)
    assert np.any(w != 0.0)
    assert np.all(m.trunk.view("trunk.0.b") == 0.0)


def test_merge_trunk_init_shared_across_task_subsets():
    merged = merge_tasks(FIVE, 4, (6, 5), seed=3)
    single = merge_tasks([FIVE[2]], 4, (6, 5), seed=3)
    assert merged.trunk.values.tobytes() == single.trunk.values.tobytes()
    assert merged.heads["c"].values.tobytes() == single.heads["c"].values.tobytes()


# ---------------------------------------------------------------------------
# joint_loss


def test_joint_loss_total_is_sum_of_per_task():
    gen = np.random.default_rng(0)
    m = merge_tasks([TaskSpec("a", 2), TaskSpec("b", 2)], 4, (6, 5), seed=1)
    losses, total = joint_loss(m, make_batch(gen, m))
    assert total == losses["a"] + losses["b"]


def test_joint_loss_single_task_total_equals_task_loss():
    gen = np.random.default_rng(1)
    m = merge_tasks([TaskSpec("a", 2)], 4, (6, 5), seed=1)
    losses, total = joint_loss(m, make_batch(gen, m))
    assert total == losses["a"]


def test_joint_loss_invariant_under_target_insertion_order():
    gen = np.random.default_rng(2)
    m = merge_tasks(FIVE, 4, (6, 5), seed=4)
    batch = make_batch(gen, m)
    _, total = joint_loss(m, batch)
    shuffled = nn.Batch(
        batch.inputs, {t: batch.targets[t] for t in reversed(sorted(batch.targets))}
    )
    _, total_shuffled = joint_loss(m, shuffled)
    assert total == total_shuffled  # bit-exact: summation runs in sorted task order


def test_joint_loss_missing_target_names_task():
    gen = np.random.default_rng(3)
    m = merge_tasks([TaskSpec("a", 2), TaskSpec("b", 2)], 4, (6, 5), seed=1)
    batch = make_batch(gen, m)
    del batch.targets["b"]
    with pytest.raises(ValueError, match="'b'"):
        joint_loss(m, batch)


# ---------------------------------------------------------------------------
# split_model / reconstruct


def test_split_two_blocks_head_counts():
    m = merge_tasks(FIVE, 4, (6, 5), seed=5)
    parts = split_model(m, [("a", "b"), ("c", "d", "e")])
    assert [p.tasks for p in parts] == [("a", "b"), ("c", "d", "e")]
    for p in parts:
        assert p.trunk.values.tobytes() == m.trunk.values.tobytes()


def test_split_into_singletons():
    m = merge_tasks(FIVE, 4, (6, 5), seed=5)
    parts = split_model(m, [(t,) for t in "abcde"])
    assert len(parts) == 5
    for p in parts:
        assert len(p.tasks) == 1
        assert p.trunk.values.tobytes() == m.trunk.values.tobytes()


def test_split_coarsest_partition_preserves_all_parameters():
    m = merge_tasks(FIVE, 4, (6, 5), seed=5)
    (whole,) = split_model(m, [tuple("abcde")])
    assert whole.assemble().values.tobytes() == m.assemble().values.tobytes()


def test_split_rejects_non_exhaustive_partition():
    m = merge_tasks(FIVE, 4, (6, 5), seed=5)
    with pytest.raises(ValueError, match="disjoint-and-exhaustive"):
        split_model(m, [("a", "b"), ("c", "d")])
    with pytest.raises(ValueError, match="disjoint-and-exhaustive"):
        split_model(m, [("a", "b"), ("b", "c", "d", "e")])


def test_split_isolation_mutating_one_split_leaves_others_alone():
    m = merge_tasks(FIVE, 4, (6, 5), seed=6)
    one, two = split_model(m, [("a", "b"), ("c", "d", "e")])
    before = two.trunk.values.copy()
    one.trunk.values[:] = 999.0
    np.testing.assert_array_equal(two.trunk.values, before)
    np.testing.assert_array_equal(m.trunk.values, before)  # parent untouched too


def test_reconstruct_round_trip_bit_exact():
    m = merge_tasks(FIVE, 4, (6, 5), seed=7)
    singles = reconstruct(split_model(m, [tuple("abcde")]))
    assert sorted(singles) == list("abcde")
    for t in "abcde":
        assert singles[t].heads[t].values.tobytes() == m.heads[t].values.tobytes()
        assert singles[t].trunk.values.tobytes() == m.trunk.values.tobytes()


def test_reconstruct_block_members_share_trunk_values():
    m = merge_tasks(FIVE, 4, (6, 5), seed=8)
    parts = split_model(m, [("a", "b"), ("c", "d", "e")])
    # train-like perturbation so the two split trunks differ
    parts[0].trunk.values[:] += 1.0
    singles = reconstruct(parts)
    assert singles["a"].trunk.values.tobytes() == singles["b"].trunk.values.tobytes()
    assert singles["c"].trunk.values.tobytes() == singles["d"].trunk.values.tobytes()
    assert singles["a"].trunk.values.tobytes() != singles["c"].trunk.values.tobytes()


def test_reconstruct_rejects_duplicate_tasks_across_splits():
    m = merge_tasks(FIVE, 4, (6, 5), seed=8)
    parts = split_model(m, [("a", "b"), ("c", "d", "e")])
    with pytest.raises(ValueError, match="'a'"):
        reconstruct([parts[0], parts[0]])


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_bit_exact(tmp_path):
    m = merge_tasks(FIVE, 4, (6, 5), seed=11)
    path = tmp_path / "model.npz"
    save_model(m, path)
    loaded = load_model(path)
    assert loaded.arch == m.arch
    assert loaded.assemble().values.tobytes() == m.assemble().values.tobytes()


def test_model_rejects_head_set_mismatch():
    m = merge_tasks([TaskSpec("a", 2), TaskSpec("b", 2)], 4, (6, 5), seed=1)
    heads = dict(m.heads)
    del heads["b"]
    with pytest.raises(ValueError, match="does not match"):
        MultiTaskModel(m.arch, m.trunk, heads)
