#!/usr/bin/env python3
"""
测试 GB-Net 前向：状态初始化、消息传递、桥接细化与推理模式
"""
import sys
from pathlib import Path

import numpy as np
import pytest

# 添加项目路径
sys.path.insert(0, str(Path(__file__).parent))

from gbnet import tensor_core as tc
from gbnet.commonsense import assemble, compile_conditional_edges
from gbnet.config import ModelConfig
from gbnet.errors import ConfigError, InputError, ModeError
from gbnet.graph_core import (
    HAS_OBJECT, HAS_SUBJECT, OBJECT_OF, SUBJECT_OF, EdgeFamily, GraphBuilder, NodeKind, build_scene_skeleton,
)
from gbnet.model import (
    GRU_GATES, BridgeState, GRUCell, InferenceMode, ModelParams, NodeStates, SceneInputs, aggregate_messages,
    build_graph, build_scene_inputs, forward, gru_update, init_states, initial_bridges, message_round, one_hot,
    predict, refine_bridges, slot_layout,
)
from gbnet.synth_data import generate_dataset, generate_world, triplet_counts
from gbnet.utils import ordered_pairs, pair_index, union_features


@pytest.fixture(scope="module")
def toy():
    """4 实体类 / 3 谓词类的小世界及其常识图"""
    world = generate_world(30, 4, 3, 6, 0.1)
    records = generate_dataset(world, 8, seed=2)
    commonsense = assemble(
        world.entity_labels, world.predicate_labels, [],
        compile_conditional_edges(triplet_counts(world, records)), world.embeddings,
    )
    return world, records, commonsense


def _params(commonsense, feat_dim=6, **overrides):
    config = ModelConfig(**{"dim": 4, "steps": 2, "k_bridge": 2, **overrides})
    return ModelParams.create(config, commonsense, feat_dim, seed=5)


def _zero_biases(params):
    for name, tensor in params.named_tensors().items():
        if name.rsplit(".", 1)[1].startswith("b"):
            tensor.data[:] = 0.0


def _toy_inputs(n, feat_dim, n_classes, seed):
    rng = np.random.default_rng(seed)
    corners = rng.uniform(0.0, 0.5, size=(n, 2))
    boxes = np.hstack([corners, corners + rng.uniform(0.1, 0.4, size=(n, 2))])
    features = rng.normal(size=(n, feat_dim))
    dists = rng.dirichlet(np.ones(n_classes), size=n)
    return SceneInputs(boxes, features, dists, union_features(features, boxes))


def test_zero_inputs_keep_zero_states(toy):
    """零输入、零偏置：消息与 GRU 更新都保持零状态"""
    _, _, commonsense = toy
    params = _params(commonsense, use_knowledge=False, steps=3)
    _zero_biases(params)
    n = 3
    boxes = np.array([[0.1, 0.1, 0.3, 0.3], [0.4, 0.4, 0.6, 0.6], [0.7, 0.1, 0.9, 0.3]])
    inputs = SceneInputs(
        boxes=boxes,
        features=np.zeros((n, 6)),
        label_dists=np.full((n, commonsense.n_entity_classes), 1.0 / commonsense.n_entity_classes),
        union_features=np.zeros((n * (n - 1), 6 + 8)),
    )
    _, states = forward(build_graph(inputs), inputs, commonsense, params, InferenceMode.SGCLS)
    assert not states[NodeKind.SE].data.any()
    assert not states[NodeKind.SP].data.any()


def test_gru_zero_fixed_point(toy):
    _, _, commonsense = toy
    params = _params(commonsense)
    zero = tc.constant(np.zeros((4, 1)))
    assert not gru_update(zero, zero, params.gru[NodeKind.SE]).data.any()


def test_zero_steps_returns_detector_init(toy):
    _, records, commonsense = toy
    params = _params(commonsense, steps=0, k_bridge=commonsense.n_entity_classes)
    record = records[0]
    inputs = build_scene_inputs(record, InferenceMode.SGCLS)
    bridges, _ = forward(build_graph(inputs), inputs, commonsense, params, InferenceMode.SGCLS)
    assert np.array_equal(bridges.entity_weights.data, record.label_dists)
    assert bridges.predicate_weights.shape == (record.n_entities * (record.n_entities - 1), 4)
    assert not bridges.predicate_weights.data.any()


# ========== 单轮算子 ==========

def test_init_states_shapes(toy):
    _, records, commonsense = toy
    params = _params(commonsense)
    inputs = build_scene_inputs(records[0], InferenceMode.SGCLS)
    states = init_states(build_graph(inputs), inputs, commonsense, params)
    n = records[0].n_entities
    assert states[NodeKind.SE].shape == (n, 4)
    assert states[NodeKind.SP].shape == (n * (n - 1), 4)
    assert states[NodeKind.CE].shape == (commonsense.n_entity_classes, 4)
    assert states[NodeKind.CP].shape == (commonsense.n_predicate_classes, 4)


def test_message_round_keeps_shapes_and_needs_bridges(toy):
    _, records, commonsense = toy
    params = _params(commonsense)
    inputs = build_scene_inputs(records[1], InferenceMode.SGCLS)
    graph = build_graph(inputs)
    states = init_states(graph, inputs, commonsense, params)
    bridges = initial_bridges(graph, inputs, commonsense, params, InferenceMode.SGCLS)
    updated = message_round(graph, bridges, states, params, commonsense)
    for kind in params.kinds:
        assert updated[kind].shape == states[kind].shape
        assert not np.array_equal(updated[kind].data, states[kind].data)
    with pytest.raises(InputError):
        message_round(graph, None, states, params, commonsense)


def test_refine_bridges_rows(toy):
    _, records, commonsense = toy
    params = _params(commonsense, k_bridge=2)
    record = records[2]
    inputs = build_scene_inputs(record, InferenceMode.PREDCLS)
    graph = build_graph(inputs)
    states = init_states(graph, inputs, commonsense, params)

    refined = refine_bridges(states, params, InferenceMode.SGCLS)
    assert np.allclose(refined.entity_scores.data.sum(axis=1), 1.0, atol=1e-9)
    assert np.allclose(refined.predicate_scores.data.sum(axis=1), 1.0, atol=1e-9)
    assert ((refined.entity_weights.data > 0).sum(axis=1) <= 2).all()
    assert ((refined.predicate_weights.data > 0).sum(axis=1) <= 2).all()

    clamped = refine_bridges(states, params, InferenceMode.PREDCLS, record.gt_labels)
    assert np.array_equal(clamped.entity_weights.data, one_hot(record.gt_labels, commonsense.n_entity_classes))
    with pytest.raises(ModeError):
        refine_bridges(states, params, InferenceMode.PREDCLS)


def test_large_k_keeps_full_softmax_rows(toy):
    _, records, commonsense = toy
    params = _params(commonsense, k_bridge=10)
    inputs = build_scene_inputs(records[1], InferenceMode.SGCLS)
    bridges, _ = forward(build_graph(inputs), inputs, commonsense, params, InferenceMode.SGCLS)
    assert np.array_equal(bridges.entity_weights.data, bridges.entity_scores.data)
    assert np.array_equal(bridges.predicate_weights.data, bridges.predicate_scores.data)
    assert np.allclose(bridges.entity_weights.data.sum(axis=1), 1.0, atol=1e-9)


def test_bridge_rows_keep_top_k(toy):
    _, records, commonsense = toy
    params = _params(commonsense, k_bridge=2)
    bridges, inputs = predict(records[2], commonsense, params, InferenceMode.SGGEN)
    assert ((bridges.entity_weights > 0).sum(axis=1) == 2).all()
    assert ((bridges.predicate_weights > 0).sum(axis=1) == 2).all()
    assert bridges.entity_weights.shape == (inputs.n_entities, 5)


def test_predcls_clamps_entities(toy):
    _, records, commonsense = toy
    params = _params(commonsense)
    record = records[3]
    bridges, _ = predict(record, commonsense, params, InferenceMode.PREDCLS)
    assert np.array_equal(bridges.entity_weights, one_hot(record.gt_labels, commonsense.n_entity_classes))


def test_predcls_requires_labels(toy):
    _, records, commonsense = toy
    params = _params(commonsense)
    inputs = build_scene_inputs(records[0], InferenceMode.SGCLS)
    with pytest.raises(ModeError):
        forward(build_graph(inputs), inputs, commonsense, params, InferenceMode.PREDCLS)


def test_sgcls_uses_ground_truth_boxes(toy):
    _, records, _ = toy
    record = records[4]
    sgcls = build_scene_inputs(record, InferenceMode.SGCLS)
    sggen = build_scene_inputs(record, InferenceMode.SGGEN)
    assert np.array_equal(sgcls.boxes, record.gt_boxes)
    assert np.array_equal(sggen.boxes, record.boxes)
    assert sgcls.gt_labels is None
    assert build_scene_inputs(record, InferenceMode.PREDCLS).gt_labels is not None


def test_no_knowledge_variant(toy):
    _, records, commonsense = toy
    params = _params(commonsense, use_knowledge=False)
    names = list(params.named_tensors())
    assert "cls.SE.W1" in names and "cls.SP.W2" in names
    assert not any(name.startswith(("att.", "init.CE")) for name in names)

    record = records[5]
    bridges, _ = predict(record, commonsense, params, InferenceMode.SGCLS)
    n = record.n_entities
    assert bridges.entity_weights.shape == (n, commonsense.n_entity_classes)
    assert bridges.predicate_weights.shape == (len(ordered_pairs(n)), commonsense.n_predicate_classes)


def test_params_seeded_and_slots_ordered(toy):
    _, _, commonsense = toy
    a, b = _params(commonsense), _params(commonsense)
    assert all(np.array_equal(x, y) for x, y in zip(a.snapshot().values(), b.snapshot().values()))
    # 偏置同样随机初始化
    assert a.named_tensors()["init.SE.b"].data.all()
    assert a.named_tensors()["receive.CE.b1"].data.all()
    kinds = [NodeKind.SE, NodeKind.SP, NodeKind.CE, NodeKind.CP]
    layout = slot_layout(kinds, [t for kind in kinds for t in a.slots[kind]])
    assert layout == a.slots
    assert a.receive_heads[NodeKind.SE].in_dim == 4 * len(a.slots[NodeKind.SE])


def test_inference_mode_parse():
    assert InferenceMode.parse("PredCls") == InferenceMode.PREDCLS
    with pytest.raises(ConfigError):
        InferenceMode.parse("detect")


# ========== 结构性质 ==========

def test_entity_permutation_is_equivariant(toy):
    """打乱实体顺序：实体行随之置换，谓词行按 (主语, 宾语) 对应，CE 状态不变"""
    _, _, commonsense = toy
    params = _params(commonsense, k_bridge=2)
    inputs = _toy_inputs(4, 6, commonsense.n_entity_classes, seed=11)
    perm = np.array([2, 0, 3, 1])
    shuffled = SceneInputs(
        inputs.boxes[perm], inputs.features[perm], inputs.label_dists[perm],
        union_features(inputs.features[perm], inputs.boxes[perm]),
    )
    base, base_states = forward(build_graph(inputs), inputs, commonsense, params, InferenceMode.SGCLS)
    moved, moved_states = forward(build_graph(shuffled), shuffled, commonsense, params, InferenceMode.SGCLS)

    assert np.allclose(moved.entity_weights.data, base.entity_weights.data[perm], atol=1e-10)
    for a, b in ordered_pairs(4):
        assert np.allclose(
            moved.predicate_weights.data[pair_index(a, b, 4)],
            base.predicate_weights.data[pair_index(perm[a], perm[b], 4)],
            atol=1e-10,
        )
    assert np.allclose(moved_states[NodeKind.CE].data, base_states[NodeKind.CE].data, atol=1e-10)


def test_subject_and_object_are_distinct_slots(toy):
    _, _, commonsense = toy
    params = _params(commonsense, use_knowledge=False)
    slots = params.slots[NodeKind.SP]
    assert SUBJECT_OF in slots and OBJECT_OF in slots

    rng = np.random.default_rng(4)
    boxes = np.array([[0.1, 0.1, 0.4, 0.4], [0.5, 0.5, 0.9, 0.9]])
    shared = rng.normal(size=(1, 6 + 8))
    union = np.vstack([shared, shared])
    dists = np.full((2, commonsense.n_entity_classes), 1.0 / commonsense.n_entity_classes)

    def pair_states(features):
        inputs = SceneInputs(boxes, features, dists, union)
        graph = build_graph(inputs)
        return message_round(graph, None, init_states(graph, inputs, commonsense, params), params)[NodeKind.SP].data

    same = np.repeat(rng.normal(size=(1, 6)), 2, axis=0)
    rows = pair_states(same)
    assert np.allclose(rows[0], rows[1], atol=1e-12)

    # (0,1) 与 (1,0) 只差主宾互换
    rows = pair_states(rng.normal(size=(2, 6)))
    assert not np.allclose(rows[0], rows[1], atol=1e-6)


def test_zeroed_slot_matches_removed_edge_type(toy):
    """接收头中某槽的列置零，等价于图中删除该类型的全部边"""
    _, _, commonsense = toy
    full = _params(commonsense, use_knowledge=False)
    cut = _params(commonsense, use_knowledge=False)
    index = cut.slots[NodeKind.SE].index(HAS_OBJECT)
    cut.receive_heads[NodeKind.SE].W1.data[:, 4 * index:4 * (index + 1)] = 0.0

    inputs = _toy_inputs(3, 6, commonsense.n_entity_classes, seed=3)
    graph = build_graph(inputs)
    builder = GraphBuilder()
    se_ids = [builder.add_node(NodeKind.SE, box=box) for box in inputs.boxes]
    for subj in se_ids:
        for obj in se_ids:
            if subj != obj:
                sp = builder.add_node(NodeKind.SP, subj_id=subj, obj_id=obj)
                builder.add_edge(subj, sp, SUBJECT_OF)
                builder.add_edge(obj, sp, OBJECT_OF)
                builder.add_edge(sp, subj, HAS_SUBJECT)
    pruned = builder.build()

    zeroed = message_round(graph, None, init_states(graph, inputs, commonsense, cut), cut)
    removed = message_round(pruned, None, init_states(pruned, inputs, commonsense, full), full)
    untouched = message_round(graph, None, init_states(graph, inputs, commonsense, full), full)
    for kind in (NodeKind.SE, NodeKind.SP):
        assert np.allclose(zeroed[kind].data, removed[kind].data, atol=1e-12)
    assert not np.allclose(untouched[NodeKind.SE].data, removed[NodeKind.SE].data, atol=1e-9)


def test_single_step_forward_equals_composed_operators(toy):
    _, records, commonsense = toy
    params = _params(commonsense, steps=1)
    inputs = build_scene_inputs(records[1], InferenceMode.SGCLS)
    graph = build_graph(inputs)
    bridges, states = forward(graph, inputs, commonsense, params, InferenceMode.SGCLS)

    manual_states = init_states(graph, inputs, commonsense, params)
    manual = initial_bridges(graph, inputs, commonsense, params, InferenceMode.SGCLS)
    manual_states = message_round(graph, manual, manual_states, params, commonsense)
    manual = refine_bridges(manual_states, params, InferenceMode.SGCLS, inputs.gt_labels)

    assert np.array_equal(bridges.entity_weights.data, manual.entity_weights.data)
    assert np.array_equal(bridges.predicate_scores.data, manual.predicate_scores.data)
    assert np.array_equal(bridges.predicate_weights.data, manual.predicate_weights.data)
    for kind in params.kinds:
        assert np.array_equal(states[kind].data, manual_states[kind].data)


def test_bridge_slots_are_linear_in_weights(toy):
    _, records, commonsense = toy
    params = _params(commonsense)
    inputs = build_scene_inputs(records[0], InferenceMode.SGCLS)
    graph = build_graph(inputs)
    states = init_states(graph, inputs, commonsense, params)
    n_se, n_sp = graph.count(NodeKind.SE), graph.count(NodeKind.SP)
    rng = np.random.default_rng(8)
    e1, e2 = rng.uniform(size=(2, n_se, commonsense.n_entity_classes))
    p1, p2 = rng.uniform(size=(2, n_sp, commonsense.n_predicate_classes))

    def aggregate(entity, predicate):
        bridges = BridgeState(tc.constant(entity), tc.constant(entity), tc.constant(predicate),
                              tc.constant(predicate), k=2)
        return aggregate_messages(graph, bridges, states, params, commonsense)

    first, second = aggregate(e1, p1), aggregate(e2, p2)
    summed, scaled = aggregate(e1 + e2, p1 + p2), aggregate(2.5 * e1, 2.5 * p1)
    checked = 0
    for kind in params.kinds:
        for index, etype in enumerate(params.slots[kind]):
            if etype.family != EdgeFamily.BRIDGE:
                continue
            cols = slice(4 * index, 4 * (index + 1))
            expected = first[kind].data[:, cols] + second[kind].data[:, cols]
            assert np.allclose(summed[kind].data[:, cols], expected, atol=1e-10)
            assert np.allclose(scaled[kind].data[:, cols], 2.5 * first[kind].data[:, cols], atol=1e-10)
            checked += 1
    assert checked == 4


# ========== GRU 与手算示例 ==========

def _gate_cell(gates):
    return GRUCell(*(tc.parameter(gates[name].copy()) for name in GRU_GATES))


def test_gru_matches_direct_formula():
    rng = np.random.default_rng(21)

    def sigma(v):
        return 1.0 / (1.0 + np.exp(-v))

    for _ in range(20):
        gates = {name: rng.normal(size=(3, 3)) for name in GRU_GATES}
        x, m = rng.normal(size=(3, 1)), rng.normal(size=(3, 1))
        z = sigma(gates["W_z"] @ m + gates["U_z"] @ x)
        r = sigma(gates["W_r"] @ m + gates["U_r"] @ x)
        h = np.tanh(gates["W_h"] @ m + gates["U_h"] @ (r * x))
        expected = (1.0 - z) * x + z * h
        result = gru_update(tc.constant(x), tc.constant(m), _gate_cell(gates)).data
        assert np.allclose(result, expected, atol=1e-12)


def test_gru_saturated_gates():
    rng = np.random.default_rng(22)
    x, m = rng.normal(size=(3, 1)), np.ones((3, 1))
    gates = {name: np.zeros((3, 3)) for name in GRU_GATES}
    gates["W_h"] = rng.normal(size=(3, 3))

    # 更新门关闭：保持原状态
    gates["W_z"] = np.full((3, 3), -50.0)
    kept = gru_update(tc.constant(x), tc.constant(m), _gate_cell(gates)).data
    assert np.allclose(kept, x, atol=1e-12)

    # 更新门全开：取候选状态
    gates["W_z"] = np.full((3, 3), 50.0)
    replaced = gru_update(tc.constant(x), tc.constant(m), _gate_cell(gates)).data
    assert np.allclose(replaced, np.tanh(gates["W_h"] @ m), atol=1e-12)
    assert (np.abs(replaced) < 1.0).all()

    gates = {name: rng.normal(size=(3, 3)) for name in GRU_GATES}
    x = rng.normal(size=(3, 1)) * 5.0
    huge = gru_update(tc.constant(x), tc.constant(np.full((3, 1), 1e6)), _gate_cell(gates)).data
    assert np.isfinite(huge).all()
    assert (np.abs(huge) <= np.maximum(np.abs(x), 1.0) + 1e-12).all()


def test_message_round_hand_computed(toy):
    """d=1 的两实体场景，逐边手算一轮消息"""
    _, _, commonsense = toy
    config = ModelConfig(dim=1, hidden=1, steps=1, k_bridge=2, use_knowledge=False)
    params = ModelParams.create(config, commonsense, 6, seed=0)
    assert params.slots[NodeKind.SE] == [HAS_OBJECT, HAS_SUBJECT]
    assert params.slots[NodeKind.SP] == [OBJECT_OF, SUBJECT_OF]

    # φ_send 为恒等（输入非负），φ_receive 为槽加权和，GRU 的 z = r = 0.5、h = tanh(m)
    values = {name: np.zeros(t.shape) for name, t in params.named_tensors().items()}
    for k in ("SE", "SP"):
        for name in (f"send.{k}.W1", f"send.{k}.W2", f"receive.{k}.W2", f"gru.{k}.W_h"):
            values[name] = np.ones((1, 1))
    values["receive.SE.W1"] = np.array([[2.0, 1.0]])
    values["receive.SP.W1"] = np.array([[1.0, 3.0]])
    params.load_arrays(values)

    graph = build_scene_skeleton([([0.1, 0.1, 0.4, 0.4], 0), ([0.5, 0.5, 0.9, 0.9], 1)])
    states = NodeStates({
        NodeKind.SE: tc.constant(np.array([[1.0], [2.0]])),
        NodeKind.SP: tc.constant(np.array([[0.5], [0.25]])),
    })
    updated = message_round(graph, None, states, params)

    # SE0: 宾语 of SP(1,0)=0.25, 主语 of SP(0,1)=0.5 -> 2*0.25 + 0.5
    # SP(0,1): 宾语 SE1=2, 主语 SE0=1 -> 2 + 3*1
    expected_se = [0.5 + 0.5 * np.tanh(1.0), 1.0 + 0.5 * np.tanh(1.25)]
    expected_sp = [0.25 + 0.5 * np.tanh(5.0), 0.125 + 0.5 * np.tanh(7.0)]
    assert np.allclose(updated[NodeKind.SE].data.ravel(), expected_se, atol=1e-12)
    assert np.allclose(updated[NodeKind.SP].data.ravel(), expected_sp, atol=1e-12)
