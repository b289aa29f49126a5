import numpy as np
import pytest

from learngene import autodiff as ad
from learngene import expansion as ex
from learngene import search
from learngene import vit
from learngene.expansion import Strategy


def stages_of(indices):
    return ex.split_into_stages(list(indices))


def seq(indices, depth, priority=None, strategy=Strategy.NEIGHBOR):
    plan = ex.plan_expansion(stages_of(indices), depth, strategy, priority)
    return tuple(plan.sequence)


def test_stage_split_reference_and_edges():
    assert stages_of([1, 4, 5, 7, 8]).stages == [[1], [4, 5], [7, 8]]
    assert stages_of([1, 2, 3]).stages == [[1, 2, 3]]
    assert stages_of([2, 5, 9]).stages == [[2], [5], [9]]
    with pytest.raises(ValueError):
        stages_of([])
    with pytest.raises(ValueError):
        stages_of([3, 3, 4])


def test_six_layer_priority_variants():
    assert seq([1, 4, 5, 7, 8], 6, priority=[0]) == (1, 1, 4, 5, 7, 8)
    assert seq([1, 4, 5, 7, 8], 6, priority=[1]) == (1, 4, 5, 5, 7, 8)
    assert seq([1, 4, 5, 7, 8], 6, priority=[2]) == (1, 4, 5, 7, 8, 8)


def test_seven_layer_priority_variants():
    assert seq([1, 4, 5, 7, 8], 7, priority=[1, 0]) == (1, 1, 4, 5, 5, 7, 8)
    assert seq([1, 4, 5, 7, 8], 7, priority=[2, 0]) == (1, 1, 4, 5, 7, 8, 8)
    assert seq([1, 4, 5, 7, 8], 7, priority=[2, 1]) == (1, 4, 5, 5, 7, 8, 8)


def test_round_robin_depth_15():
    got = seq([1, 4, 5, 7, 8], 15)  # default last->middle->first
    assert got == (1, 1, 1, 1, 4, 5, 5, 5, 5, 7, 8, 8, 8, 8, 8)


def test_cyclic_appends_in_original_order():
    plan = ex.plan_expansion(stages_of([7, 8]), 4, Strategy.CYCLIC)
    assert plan.sequence == [7, 8, 7, 8]
    plan = ex.plan_expansion(stages_of([7, 8]), 5, Strategy.CYCLIC)
    assert plan.sequence == [7, 8, 7, 8, 7]


def test_depth_below_count_rejected():
    with pytest.raises(ValueError):
        seq([1, 4, 5], 2)


def test_bad_priority_rejected():
    with pytest.raises(ValueError):
        seq([1, 4], 4, priority=[])
    with pytest.raises(ValueError):
        seq([1, 4], 4, priority=[0, 0])
    with pytest.raises(ValueError):
        seq([1, 4], 4, priority=[5])


def random_increasing(rng, max_len=8, max_val=16):
    n = int(rng.integers(1, max_len + 1))
    return sorted(rng.choice(np.arange(1, max_val + 1), size=n, replace=False).tolist())


def test_order_preservation_property():
    rng = np.random.default_rng(0)
    for _ in range(100):
        indices = random_increasing(rng)
        depth = len(indices) + int(rng.integers(0, 11))
        strategy = Strategy.NEIGHBOR if rng.random() < 0.5 else Strategy.CYCLIC
        plan = ex.plan_expansion(stages_of(indices), depth, strategy)
        seen = []
        for i in plan.sequence:
            if i not in seen:
                seen.append(i)
        assert seen == indices
        assert len(plan.sequence) == depth


def test_single_extra_goes_to_priority_head():
    rng = np.random.default_rng(1)
    for _ in range(50):
        indices = random_increasing(rng)
        stages = stages_of(indices)
        order = list(rng.permutation(len(stages.stages)))
        plan = ex.plan_expansion(stages, len(indices) + 1, Strategy.NEIGHBOR, order)
        target_stage = stages.stages[order[0]]
        # the duplicate is the final index of the first-priority stage
        dup = [i for i in plan.sequence]
        for i in indices:
            dup.remove(i)
        assert dup == [target_stage[-1]]


def test_neighbor_duplicates_only_stage_finals():
    rng = np.random.default_rng(2)
    for _ in range(50):
        indices = random_increasing(rng)
        stages = stages_of(indices)
        finals = {s[-1] for s in stages.stages}
        plan = ex.plan_expansion(stages, len(indices) + 6, Strategy.NEIGHBOR)
        extras = list(plan.sequence)
        for i in indices:
            extras.remove(i)
        assert set(extras) <= finals


def test_cyclic_can_reintroduce_nonfinal_indices():
    plan = ex.plan_expansion(stages_of([4, 5]), 4, Strategy.CYCLIC)
    extras = list(plan.sequence)
    for i in (4, 5):
        extras.remove(i)
    assert 4 in extras


def make_learngene(depth=4, seed=0):
    cfg = vit.desk_config(num_classes=3, depth=depth, num_tokens=6, input_dim=5,
                          embed_dim=16, num_heads=4)
    rng = np.random.default_rng(seed)
    indices = [1, 3, 4]
    blocks = [vit.EncoderBlock(cfg, rng) for _ in indices]
    return search.LearngeneLayers(indices=indices, blocks=blocks, source_config=cfg)


def test_instantiate_without_duplication_copies_bytes():
    lg = make_learngene()
    plan = ex.plan_expansion(ex.split_into_stages(lg.indices), 3)
    net = ex.instantiate_desnet(lg, plan, num_classes=3, seed=9)
    assert net.config.depth == 3
    for blk, src in zip(net.blocks, lg.blocks):
        for (_, a), (_, b) in zip(blk.named_parameters(), src.named_parameters()):
            assert a.data.tobytes() == b.data.tobytes()
            assert a.trainable


def test_duplicated_blocks_untied_and_diverge_after_one_step():
    lg = make_learngene()
    plan = ex.plan_expansion(ex.split_into_stages(lg.indices), 4)  # dup of idx 4
    net = ex.instantiate_desnet(lg, plan, num_classes=3, seed=10)
    b_last, b_prev = net.blocks[3], net.blocks[2]
    assert b_last.w_qkv.data.tobytes() == b_prev.w_qkv.data.tobytes()
    assert b_last.w_qkv is not b_prev.w_qkv

    rng = np.random.default_rng(11)
    x = rng.normal(size=(8, 6, 5)).astype(np.float32)
    labels = rng.integers(0, 3, size=8)
    opt = ad.SGD(net.parameters(), lr=0.1)
    with ad.Tape() as tape:
        loss = ad.cross_entropy(net.forward(x), labels)
    tape.backward(loss)
    opt.step()
    assert b_last.w_qkv.data.tobytes() != b_prev.w_qkv.data.tobytes()


def test_instantiate_deterministic():
    lg = make_learngene()
    plan = ex.plan_expansion(ex.split_into_stages(lg.indices), 5)
    a = ex.instantiate_desnet(lg, plan, num_classes=3, seed=12)
    b = ex.instantiate_desnet(lg, plan, num_classes=3, seed=12)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert pa.data.tobytes() == pb.data.tobytes()


def test_instantiate_rejects_foreign_indices():
    lg = make_learngene()
    plan = ex.ExpansionPlan(Strategy.NEIGHBOR, [0], 3, [1, 2, 3])  # 2 not extracted
    with pytest.raises(ValueError):
        ex.instantiate_desnet(lg, plan, num_classes=3, seed=0)
