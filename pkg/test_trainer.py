#!/usr/bin/env python3
"""
测试训练器：对齐、类别平衡、损失、Adam、检查点与训练循环
"""
import math
import sys
from pathlib import Path

import numpy as np
import pytest

# 添加项目路径
sys.path.insert(0, str(Path(__file__).parent))

from gbnet import tensor_core as tc
from gbnet.commonsense import assemble, compile_conditional_edges
from gbnet.config import RunConfig
from gbnet.errors import ConfigError, FormatError, NonFiniteError, ParameterError, ShapeError, UndefinedClassError
from gbnet.model import BridgeState, ModelParams
from gbnet.synth_data import generate_dataset, generate_world, sample_scene, triplet_counts
from gbnet.trainer import (
    AdamState, Alignment, ClassBalanceTable, Trainer, adam_step, align, class_balanced_weight, compute_loss,
    load_checkpoint, save_checkpoint, train,
)


def _toy(n_entity=3, n_predicate=2, feat_dim=4, n_scenes=8, seed=40):
    world = generate_world(seed, n_entity, n_predicate, feat_dim, 0.1)
    records = generate_dataset(world, n_scenes, seed=seed)
    commonsense = assemble(
        world.entity_labels, world.predicate_labels, [],
        compile_conditional_edges(triplet_counts(world, records)), world.embeddings,
    )
    return world, records, commonsense


def _config(**overrides):
    config = RunConfig()
    config.apply_overrides({
        "model.dim": 3, "model.hidden": 4, "model.steps": 2, "model.k_bridge": 10,
        "train.seed": 0, "train.validation_fraction": 0.0, **overrides,
    })
    config.validate()
    return config


# ========== 对齐 ==========

def test_align_identical_and_disjoint():
    gt = [((0.0, 0.0, 0.4, 0.4), 2), ((0.6, 0.6, 1.0, 1.0), 1)]
    result = align([(0.0, 0.0, 0.4, 0.4), (0.5, 0.0, 0.55, 0.05)], gt, [])
    assert result.entity_targets.tolist() == [2, 0]
    assert result.matches == {0: 0}


def test_align_low_overlap_is_background():
    """面积 1/4 的两个框交于 1/16，IoU = 1/7"""
    result = align([(0.0, 0.0, 0.5, 0.5)], [((0.25, 0.25, 0.75, 0.75), 3)], [])
    assert result.entity_targets.tolist() == [0]


def test_align_predicate_targets():
    gt = [((0.0, 0.0, 0.3, 0.3), 1), ((0.5, 0.5, 0.9, 0.9), 2)]
    result = align([box for box, _ in gt], gt, [(0, 2, 1), (0, 1, 1)])
    # (0,1) 取第一条真值谓词，(1,0) 无真值
    assert result.predicate_targets.tolist() == [2, 0]


def test_align_greedy_highest_iou_first():
    gt = [((0.0, 0.0, 0.4, 0.4), 1)]
    preds = [(0.0, 0.0, 0.38, 0.4), (0.0, 0.0, 0.4, 0.4)]
    assert align(preds, gt, []).entity_targets.tolist() == [0, 1]


# ========== 类别平衡 ==========

def test_class_balanced_weight_examples():
    assert class_balanced_weight(17, 0.0) == 1.0
    assert class_balanced_weight(1, 0.999) == pytest.approx(1.0)
    assert class_balanced_weight(1000, 0.999) == pytest.approx(1.5815e-3, rel=1e-3)
    with pytest.raises(UndefinedClassError):
        class_balanced_weight(0, 0.9)
    with pytest.raises(ParameterError):
        class_balanced_weight(3, 1.0)


def test_class_balanced_weight_monotone():
    rng = np.random.default_rng(1)
    for _ in range(100):
        beta = float(rng.uniform(0.01, 0.999))
        a, b = sorted(int(v) for v in rng.integers(1, 5000, size=2))
        assert class_balanced_weight(a, beta) >= class_balanced_weight(b, beta)


def test_balance_table_counts_background():
    _, records, commonsense = _toy()
    table = ClassBalanceTable.from_records(records, commonsense.n_predicate_classes, 0.99)
    pairs = sum(r.n_entities * (r.n_entities - 1) for r in records)
    labeled = sum(len({(s, o) for s, _, o in r.triplets}) for r in records)
    assert table.counts.sum() == pairs
    assert table.counts[0] == pairs - labeled
    absent = ClassBalanceTable([5, 0, 2], 0.9)
    assert absent.weight(1) == 1.0


# ========== 损失 ==========

def _bridges(entity_scores, predicate_scores):
    e, p = tc.constant(entity_scores), tc.constant(predicate_scores)
    return BridgeState(e, e, p, p, k=2)


def test_loss_examples():
    bridges = _bridges(np.array([[0.0, 1.0]]), np.array([[0.5, 0.5], [0.75, 0.25]]))
    alignment = Alignment(np.array([1]), np.array([0, 1]))
    table = ClassBalanceTable([4, 4], 0.0)
    table.weights = np.array([1.0, 0.5])
    loss = compute_loss(bridges, alignment, table)
    assert loss.item() == pytest.approx(2.0 * math.log(2.0))
    # 目标概率为 1 的实体节点贡献 0
    assert compute_loss(bridges, alignment, table, include_entities=False).item() == pytest.approx(loss.item())

    single = _bridges(np.zeros((0, 2)), np.array([[math.exp(-1.0), 1.0 - math.exp(-1.0)]]))
    alignment = Alignment(np.zeros(0, dtype=np.int64), np.array([0]))
    assert compute_loss(single, alignment, include_entities=False).item() == pytest.approx(1.0)


def test_loss_matches_plain_cross_entropy():
    rng = np.random.default_rng(3)
    entity = rng.dirichlet(np.ones(4), size=3)
    predicate = rng.dirichlet(np.ones(3), size=6)
    et, pt = rng.integers(0, 4, size=3), rng.integers(0, 3, size=6)
    expected = -np.log(entity[np.arange(3), et]).sum() - np.log(predicate[np.arange(6), pt]).sum()
    loss = compute_loss(_bridges(entity, predicate), Alignment(et, pt))
    assert loss.item() == pytest.approx(expected)

    order = rng.permutation(6)
    permuted = compute_loss(_bridges(entity, predicate[order]), Alignment(et, pt[order]))
    assert permuted.item() == pytest.approx(expected)


def test_loss_invariant_to_node_order():
    """同时打乱 SE 行与 SP 行（目标随之移动），损失不变"""
    rng = np.random.default_rng(12)
    for _ in range(100):
        n_se, n_sp = int(rng.integers(1, 6)), int(rng.integers(1, 12))
        n_ce, n_cp = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        entity = rng.dirichlet(np.ones(n_ce), size=n_se)
        predicate = rng.dirichlet(np.ones(n_cp), size=n_sp)
        et, pt = rng.integers(0, n_ce, size=n_se), rng.integers(0, n_cp, size=n_sp)
        table = ClassBalanceTable(rng.integers(1, 500, size=n_cp).tolist(), float(rng.uniform(0.0, 0.999)))
        expected = compute_loss(_bridges(entity, predicate), Alignment(et, pt), table).item()

        e_order, p_order = rng.permutation(n_se), rng.permutation(n_sp)
        shuffled = compute_loss(
            _bridges(entity[e_order], predicate[p_order]), Alignment(et[e_order], pt[p_order]), table,
        )
        assert shuffled.item() == pytest.approx(expected, rel=1e-12)


def test_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        compute_loss(_bridges(np.ones((1, 2)), np.ones((2, 2)) / 2), Alignment(np.array([0]), np.array([0])))


# ========== Adam ==========

def test_adam_first_step():
    w = tc.parameter(np.full((2, 3), 0.5))
    adam_step({"w": w}, {"w": np.ones((2, 3))}, AdamState(lr=1e-3))
    assert np.allclose(w.data, 0.5 - 1e-3, atol=1e-9)


def test_adam_zero_gradient():
    w = tc.parameter([[1.0, -2.0]])
    state = AdamState(lr=0.1, m={"w": np.array([[0.2, 0.2]])}, v={"w": np.array([[0.1, 0.1]])}, step=1)
    adam_step({"w": w}, {"w": np.zeros((1, 2))}, AdamState(lr=0.1))
    assert w.data.tolist() == [[1.0, -2.0]]
    adam_step({"w": w}, {}, state)
    assert state.step == 2
    assert np.allclose(state.m["w"], 0.18)
    assert np.allclose(state.v["w"], 0.0999)


def test_adam_descends_quadratic():
    w = tc.parameter([[1.0]])
    state = AdamState(lr=0.1)
    history = [1.0]
    for _ in range(20):
        adam_step({"w": w}, {"w": 2.0 * w.data}, state)
        history.append(abs(w.item()))
    assert all(b < a for a, b in zip(history[:6], history[1:6]))
    assert history[-1] < 0.5


# ========== 梯度 ==========

def test_model_gradients_match_finite_differences():
    """K_bridge ≥ 类别数时没有截断，解析梯度与中心差分一致"""
    world, _, commonsense = _toy()
    record = sample_scene(world, 3, seed=9, image_id="grad", relation_prob=1.0)
    trainer = Trainer(commonsense, _config(), feat_dim=4)
    trainer.balance_table = ClassBalanceTable([6, 3, 2], 0.9)
    assert tc.gradient_check(lambda: trainer.image_loss(record), trainer.params.parameters()) <= 1e-4


@pytest.mark.parametrize("task", ["sgcls", "predcls"])
def test_gradients_match_with_truncated_bridges(task):
    """K_bridge=2 小于 |CE|=5 与 |CP|=4，top-K 掩码在反向中视为常数"""
    world, records, commonsense = _toy(n_entity=4, n_predicate=3, seed=41)
    assert (commonsense.n_entity_classes, commonsense.n_predicate_classes) == (5, 4)
    trainer = Trainer(commonsense, _config(**{"model.k_bridge": 2, "train.task": task}), feat_dim=4)
    trainer.balance_table = ClassBalanceTable.from_records(records, commonsense.n_predicate_classes, 0.9)
    for seed in (9, 10, 11):
        record = sample_scene(world, 3, seed=seed, image_id=f"grad_{seed}", relation_prob=1.0)
        assert tc.gradient_check(lambda: trainer.image_loss(record), trainer.params.parameters()) <= 1e-4


def test_image_gradients_tag_non_finite(monkeypatch):
    _, records, commonsense = _toy()
    trainer = Trainer(commonsense, _config(), feat_dim=4)

    def broken(record):
        raise NonFiniteError("log(0)")

    monkeypatch.setattr(trainer, "image_loss", broken)
    with pytest.raises(NonFiniteError) as info:
        trainer.image_gradients(records[0])
    assert info.value.image_id == records[0].image_id


# ========== 检查点 ==========

def test_checkpoint_round_trip(tmp_path):
    _, _, commonsense = _toy()
    config = _config()
    params = ModelParams.create(config.model, commonsense, 4, seed=1)
    state = AdamState(step=3, m={"init.SE.W": np.ones((3, 4))}, v={"init.SE.W": np.full((3, 4), 2.0)})
    path = tmp_path / "ckpt.gbnet"
    save_checkpoint(params, state, path)

    fresh = ModelParams.create(config.model, commonsense, 4, seed=2)
    loaded, loaded_state = load_checkpoint(path, fresh)
    for name, value in params.snapshot().items():
        assert np.array_equal(loaded.named_tensors()[name].data, value.astype(np.float32).astype(np.float64))
    assert loaded_state.step == 3
    assert np.array_equal(loaded_state.v["init.SE.W"], np.full((3, 4), 2.0))


def test_checkpoint_round_trip_many_shapes(tmp_path):
    """100 组随机维度：f32 逐位还原，任意一个字节损坏都被拒绝"""
    _, _, commonsense = _toy()
    rng = np.random.default_rng(17)
    path = tmp_path / "ckpt.gbnet"
    for case in range(100):
        config = _config(**{
            "model.dim": int(rng.integers(1, 5)), "model.hidden": int(rng.integers(1, 5)),
            "model.use_knowledge": bool(case % 3),
        })
        params = ModelParams.create(config.model, commonsense, 4, seed=case)
        for tensor in params.parameters():
            tensor.data *= 10.0 ** int(rng.integers(-3, 4))
        save_checkpoint(params, None, path)

        loaded, _ = load_checkpoint(path, ModelParams.create(config.model, commonsense, 4, seed=case + 1000))
        for name, value in params.snapshot().items():
            assert np.array_equal(loaded.named_tensors()[name].data, value.astype(np.float32).astype(np.float64))

        blob = bytearray(path.read_bytes())
        blob[int(rng.integers(0, len(blob)))] ^= int(rng.integers(1, 256))
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_checkpoint(path, params)


def test_checkpoint_shape_mismatch_names_tensor(tmp_path):
    _, _, commonsense = _toy()
    path = tmp_path / "ckpt.gbnet"
    save_checkpoint(ModelParams.create(_config().model, commonsense, 4), None, path)
    other = ModelParams.create(_config(**{"model.dim": 5}).model, commonsense, 4)
    with pytest.raises(ShapeError) as info:
        load_checkpoint(path, other)
    assert "init.SE.W" in str(info.value)


# ========== 训练循环 ==========

def test_zero_learning_rate_keeps_params():
    _, records, commonsense = _toy()
    config = _config(**{"train.lr": 0.0, "train.epochs": 1, "train.batch_size": 4})
    trainer = Trainer(commonsense, config, feat_dim=4)
    before = trainer.params.snapshot()
    result = trainer.fit(records)
    assert len(result.loss_log) == 2
    for name, value in result.params.snapshot().items():
        assert np.array_equal(value, before[name])


def test_training_independent_of_threads():
    _, records, commonsense = _toy()
    runs = []
    for threads in (1, 3):
        config = _config(**{"train.lr": 1e-2, "train.batch_size": 3, "train.max_steps": 2, "train.threads": threads})
        runs.append(train(records, commonsense, config))
    assert runs[0].loss_log == runs[1].loss_log
    for name, value in runs[0].params.snapshot().items():
        assert np.array_equal(value, runs[1].params.snapshot()[name])


def test_validation_split_and_steps():
    _, records, commonsense = _toy()
    trainer = Trainer(commonsense, _config(**{"train.validation_fraction": 0.25, "train.max_steps": 3}), feat_dim=4)
    train_part, val_part = trainer.split(records)
    assert len(val_part) == 2 and len(train_part) == 6
    assert {r.image_id for r in train_part}.isdisjoint(r.image_id for r in val_part)
    assert trainer.planned_steps(len(train_part)) == 3
    result = trainer.fit(records)
    assert [epoch for epoch, _ in result.validation] == [1, 2, 3]
    assert 0.0 <= result.validation[0][1] <= 1.0


def test_train_stops_on_non_finite_loss(monkeypatch):
    _, records, commonsense = _toy()

    def broken(self, record):
        raise NonFiniteError("log(0)")

    monkeypatch.setattr(Trainer, "image_loss", broken)
    with pytest.raises(NonFiniteError) as info:
        train(records, commonsense, _config(**{"train.max_steps": 1, "train.batch_size": 2}))
    assert info.value.image_id in {r.image_id for r in records}


def test_trainer_rejects_zero_steps():
    _, records, commonsense = _toy()
    with pytest.raises(ConfigError):
        Trainer(commonsense, _config(**{"model.steps": 0}), feat_dim=4)
    with pytest.raises(ConfigError):
        train([], commonsense, _config())


@pytest.mark.slow
def test_single_image_overfits():
    world, _, commonsense = _toy()
    record = sample_scene(world, 3, seed=11, image_id="solo", relation_prob=1.0)
    config = _config(**{
        "model.dim": 8, "model.hidden": 0, "model.k_bridge": 3, "train.lr": 1e-2,
        "train.epochs": 500, "train.batch_size": 1,
    })
    result = train([record], commonsense, config)
    first, last = result.loss_log[0][1], result.loss_log[-1][1]
    assert len(result.loss_log) == 500
    assert last <= 0.1 * first
