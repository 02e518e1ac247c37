"""
GB-Net 模型 - 节点状态初始化、T 轮类型化消息传递、GRU 更新与桥接边细化

场景图 (SE/SP) 与常识图 (CE/CP) 通过桥接边相连；每一轮先沿所有边类型
传递消息并用 GRU 更新节点状态，再由注意力头重新计算桥接权重。
最终的桥接权重即实体/谓词的分类得分。
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import tensor_core as tc
from .commonsense import CommonsenseGraph
from .config import ModelConfig
from .errors import ConfigError, InputError, ModeError, ShapeError
from .graph_core import (
    BRIDGE_EDGE_TYPES, ENTITY_CLASSIFIED_TO, ENTITY_HAS_INSTANCE, KIND_ORDER, PREDICATE_CLASSIFIED_TO,
    PREDICATE_HAS_INSTANCE, SCENE_EDGE_TYPES, BridgeSet, EdgeFamily, EdgeType, HeteroGraph, NodeKind,
    build_scene_skeleton, init_entity_bridges, topk_row_mask,
)
from .synth_data import SceneRecord
from .tensor_core import LinearHead, MLPHead, Tensor
from .utils import GEOMETRY_DIM, union_features

logger = logging.getLogger(__name__)

SCENE_KINDS = (NodeKind.SE, NodeKind.SP)
GRU_GATES = ("W_z", "U_z", "W_r", "U_r", "W_h", "U_h")


class InferenceMode(Enum):
    """三种评测任务对应的推理模式"""
    SGGEN = "sggen"
    SGCLS = "sgcls"
    PREDCLS = "predcls"

    @classmethod
    def parse(cls, name: str) -> "InferenceMode":
        try:
            return cls(name.lower())
        except ValueError:
            raise ConfigError(f"未知任务: {name}（可选 sggen/sgcls/predcls）") from None


@dataclass
class SceneInputs:
    """
    单张图像的模型输入

    Attributes:
        boxes: n x 4，SE 节点的边界框
        features: n x feat_dim，视觉特征 v_j
        label_dists: n x |CE|，检测器类别分布 p_j
        union_features: n(n-1) x (feat_dim + 8)，联合特征 u_j
        gt_labels: PredCls 使用的真值类别
    """
    boxes: np.ndarray
    features: np.ndarray
    label_dists: np.ndarray
    union_features: np.ndarray
    gt_labels: Optional[np.ndarray] = None

    @property
    def n_entities(self) -> int:
        return int(self.boxes.shape[0])


def build_scene_inputs(record: SceneRecord, mode: InferenceMode) -> SceneInputs:
    """
    按推理模式组装输入

    SGGen 使用检测框及其联合特征；SGCls/PredCls 直接用真值框构建 SE 节点，
    联合特征按真值框重新合成；PredCls 额外携带真值类别。
    """
    if mode == InferenceMode.SGGEN:
        boxes = record.boxes
        union = record.union_features
    else:
        boxes = record.gt_boxes
        union = union_features(record.features, record.gt_boxes)
    return SceneInputs(
        boxes=np.asarray(boxes, dtype=np.float64),
        features=np.asarray(record.features, dtype=np.float64),
        label_dists=np.asarray(record.label_dists, dtype=np.float64),
        union_features=np.asarray(union, dtype=np.float64),
        gt_labels=np.asarray(record.gt_labels) if mode == InferenceMode.PREDCLS else None,
    )


def build_graph(inputs: SceneInputs) -> HeteroGraph:
    """由输入框构建场景骨架（不含常识部分）"""
    return build_scene_skeleton([(box, index) for index, box in enumerate(inputs.boxes)])


# ========== 参数 ==========

@dataclass
class GRUCell:
    """GRU 更新门/重置门/候选状态的六个 d x d 矩阵"""
    W_z: Tensor
    U_z: Tensor
    W_r: Tensor
    U_r: Tensor
    W_h: Tensor
    U_h: Tensor

    def __call__(self, x: Tensor, m: Tensor) -> Tensor:
        """批量更新：x、m 的每一行是一个节点"""
        z = tc.sigmoid(tc.add(tc.matmul_nt(m, self.W_z), tc.matmul_nt(x, self.U_z)))
        r = tc.sigmoid(tc.add(tc.matmul_nt(m, self.W_r), tc.matmul_nt(x, self.U_r)))
        h = tc.tanh(tc.add(tc.matmul_nt(m, self.W_h), tc.matmul_nt(tc.mul(r, x), self.U_h)))
        keep = tc.sub(tc.constant(np.ones(z.shape)), z)
        return tc.add(tc.mul(keep, x), tc.mul(z, h))

    def parameters(self) -> List[Tensor]:
        return [getattr(self, name) for name in GRU_GATES]


def gru_update(x: Tensor, m: Tensor, cell: GRUCell) -> Tensor:
    """
    单个节点的 GRU 更新

    z = σ(W_z m + U_z x), r = σ(W_r m + U_r x),
    h = tanh(W_h m + U_h (r ⊙ x)), x' = (1 - z) ⊙ x + z ⊙ h

    Args:
        x: 当前状态（列向量）
        m: 接收到的消息（列向量）
        cell: GRU 参数

    Returns:
        新状态（列向量）
    """
    if x.shape != m.shape or x.cols != 1:
        raise ShapeError(f"gru_update 需要同形状的列向量: x={x.shape}, m={m.shape}")
    return tc.transpose(cell(tc.transpose(x), tc.transpose(m)))


def slot_layout(kinds: Sequence[NodeKind], edge_types: Sequence[EdgeType]) -> Dict[NodeKind, List[EdgeType]]:
    """
    接收槽布局：每个目标类型的入边类型，按源类型 (SE,SP,CE,CP) 再按边类型名排序
    """
    layout = {}
    for kind in kinds:
        incoming = [t for t in set(edge_types) if t.dst_kind == kind and t.src_kind in kinds]
        layout[kind] = sorted(incoming, key=lambda t: (KIND_ORDER.index(t.src_kind), t.name))
    return layout


class ModelParams:
    """
    全部可训练参数

    每类节点共享一组头：φ_init（线性）、φ_send / φ_receive / φ_att（单隐层 MLP）
    以及 GRU；无常识消融时 SE/SP 各有一个分类头。
    """

    def __init__(
        self,
        config: ModelConfig,
        init_heads: Dict[NodeKind, LinearHead],
        send_heads: Dict[NodeKind, MLPHead],
        receive_heads: Dict[NodeKind, MLPHead],
        att_heads: Dict[NodeKind, MLPHead],
        gru: Dict[NodeKind, GRUCell],
        slots: Dict[NodeKind, List[EdgeType]],
        classifiers: Optional[Dict[NodeKind, MLPHead]] = None,
    ):
        self.config = config
        self.init_heads = init_heads
        self.send_heads = send_heads
        self.receive_heads = receive_heads
        self.att_heads = att_heads
        self.gru = gru
        self.slots = slots
        self.classifiers = classifiers or {}

    @property
    def kinds(self) -> List[NodeKind]:
        return [kind for kind in KIND_ORDER if kind in self.init_heads]

    @classmethod
    def create(
        cls,
        config: ModelConfig,
        commonsense: CommonsenseGraph,
        feat_dim: int,
        seed: int = 0,
    ) -> "ModelParams":
        """
        随机初始化（权重与偏置均 ~ N(0, init_scale²)）

        Args:
            config: 模型配置
            commonsense: 常识图，决定类别数、词向量维度和常识边类型
            feat_dim: 视觉特征维度
            seed: 随机种子
        """
        rng = np.random.default_rng(seed)
        d, hidden, scale = config.dim, config.hidden_dim, config.init_scale

        def matrix(rows: int, cols: int, name: str) -> Tensor:
            return tc.parameter(rng.normal(scale=scale, size=(rows, cols)), name=name)

        def bias(cols: int, name: str) -> Tensor:
            return tc.parameter(rng.normal(scale=scale, size=(1, cols)), name=name)

        def mlp(in_dim: int, out_dim: int, prefix: str) -> MLPHead:
            return MLPHead(
                matrix(hidden, in_dim, f"{prefix}.W1"), bias(hidden, f"{prefix}.b1"),
                matrix(out_dim, hidden, f"{prefix}.W2"), bias(out_dim, f"{prefix}.b2"),
            )

        if config.use_knowledge:
            kinds = list(KIND_ORDER)
            edge_types = list(SCENE_EDGE_TYPES) + list(BRIDGE_EDGE_TYPES) + commonsense.graph.edge_types()
        else:
            kinds = list(SCENE_KINDS)
            edge_types = list(SCENE_EDGE_TYPES)
        slots = slot_layout(kinds, edge_types)

        input_dims = {
            NodeKind.SE: feat_dim,
            NodeKind.SP: feat_dim + GEOMETRY_DIM,
            NodeKind.CE: commonsense.embedding_dim,
            NodeKind.CP: commonsense.embedding_dim,
        }
        init_heads, send_heads, receive_heads, att_heads, gru = {}, {}, {}, {}, {}
        for kind in kinds:
            k = kind.value
            if not slots[kind]:
                raise ConfigError(f"{k} 节点没有任何入边类型")
            init_heads[kind] = LinearHead(matrix(d, input_dims[kind], f"init.{k}.W"), bias(d, f"init.{k}.b"))
            send_heads[kind] = mlp(d, d, f"send.{k}")
            receive_heads[kind] = mlp(d * len(slots[kind]), d, f"receive.{k}")
            if config.use_knowledge:
                att_heads[kind] = mlp(d, d, f"att.{k}")
            gru[kind] = GRUCell(*(matrix(d, d, f"gru.{k}.{gate}") for gate in GRU_GATES))

        classifiers = {}
        if not config.use_knowledge:
            classifiers[NodeKind.SE] = mlp(d, commonsense.n_entity_classes, "cls.SE")
            classifiers[NodeKind.SP] = mlp(d, commonsense.n_predicate_classes, "cls.SP")

        params = cls(config, init_heads, send_heads, receive_heads, att_heads, gru, slots, classifiers)
        logger.info(
            f"模型参数初始化: d={d}, hidden={hidden}, T={config.steps}, K_bridge={config.k_bridge}, "
            f"knowledge={config.use_knowledge}, 张量 {len(params.named_tensors())} 个, "
            f"标量 {sum(t.data.size for t in params.parameters())} 个"
        )
        return params

    def named_tensors(self) -> "OrderedDict[str, Tensor]":
        """按固定顺序列出全部参数（检查点的张量表顺序）"""
        named: "OrderedDict[str, Tensor]" = OrderedDict()
        for kind in self.kinds:
            k = kind.value
            named[f"init.{k}.W"] = self.init_heads[kind].W
            named[f"init.{k}.b"] = self.init_heads[kind].b
            for group, heads in (("send", self.send_heads), ("receive", self.receive_heads), ("att", self.att_heads)):
                if kind in heads:
                    for name, tensor in zip(("W1", "b1", "W2", "b2"), heads[kind].parameters()):
                        named[f"{group}.{k}.{name}"] = tensor
            for gate, tensor in zip(GRU_GATES, self.gru[kind].parameters()):
                named[f"gru.{k}.{gate}"] = tensor
        for kind, head in self.classifiers.items():
            for name, tensor in zip(("W1", "b1", "W2", "b2"), head.parameters()):
                named[f"cls.{kind.value}.{name}"] = tensor
        return named

    def parameters(self) -> List[Tensor]:
        return list(self.named_tensors().values())

    def snapshot(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, t.data.copy()) for name, t in self.named_tensors().items())

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        """
        从命名数组载入参数

        Raises:
            ShapeError: 缺少张量或形状不符（错误信息包含张量名）
        """
        for name, tensor in self.named_tensors().items():
            if name not in arrays:
                raise ShapeError(f"检查点缺少张量 {name}")
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise ShapeError(f"张量 {name} 形状不符: 检查点 {value.shape}, 模型 {tensor.shape}")
            tensor.data = value.copy()
            tensor.grad = None


# ========== 前向计算 ==========

@dataclass
class NodeStates:
    """各类节点的状态矩阵（行按同类节点的 id 顺序）"""
    by_kind: Dict[NodeKind, Tensor]

    def __getitem__(self, kind: NodeKind) -> Tensor:
        return self.by_kind[kind]

    def state_of(self, graph: HeteroGraph, node_id: int) -> np.ndarray:
        node = graph.node(node_id)
        return self.by_kind[node.kind].data[graph.local_index(node_id)]


@dataclass
class BridgeState:
    """
    模型内部的桥接边

    scores 为稀疏化前的 softmax 行（损失使用），weights 为 top-K 稀疏化后的行（消息与输出使用）
    """
    entity_scores: Tensor
    entity_weights: Tensor
    predicate_scores: Tensor
    predicate_weights: Tensor
    k: int

    @classmethod
    def from_bridge_set(cls, bridges: BridgeSet, entity_scores: Optional[np.ndarray] = None) -> "BridgeState":
        return cls(
            entity_scores=tc.constant(bridges.entity_weights if entity_scores is None else entity_scores),
            entity_weights=tc.constant(bridges.entity_weights),
            predicate_scores=tc.constant(bridges.predicate_weights),
            predicate_weights=tc.constant(bridges.predicate_weights),
            k=bridges.k,
        )

    def detach(self) -> BridgeSet:
        return BridgeSet(
            entity_weights=self.entity_weights.data.copy(),
            predicate_weights=self.predicate_weights.data.copy(),
            k=self.k,
        )


def one_hot(labels: Sequence[int], n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InputError(f"类别下标越界: {labels.tolist()} (类别数 {n_classes})")
    matrix = np.zeros((labels.size, n_classes))
    matrix[np.arange(labels.size), labels] = 1.0
    return matrix


def init_states(
    graph: HeteroGraph,
    inputs: SceneInputs,
    commonsense: CommonsenseGraph,
    params: ModelParams,
) -> NodeStates:
    """
    节点状态初始化：x = φ_init(输入)，SE 用 v_j，SP 用 u_j，CE/CP 用词向量
    """
    n_se, n_sp = graph.count(NodeKind.SE), graph.count(NodeKind.SP)
    if inputs.features.ndim != 2 or inputs.features.shape[0] != n_se:
        raise InputError(f"SE 特征缺失或行数不符: 需要 {n_se} 行, 实际 {inputs.features.shape}")
    if inputs.union_features.ndim != 2 or inputs.union_features.shape[0] != n_sp:
        raise InputError(f"SP 联合特征缺失或行数不符: 需要 {n_sp} 行, 实际 {inputs.union_features.shape}")

    sources = {
        NodeKind.SE: inputs.features,
        NodeKind.SP: inputs.union_features,
        NodeKind.CE: commonsense.entity_embeddings,
        NodeKind.CP: commonsense.predicate_embeddings,
    }
    states = {}
    for kind in params.kinds:
        head = params.init_heads[kind]
        source = sources[kind]
        if source.shape[0] and source.shape[1] != head.W.cols:
            raise ShapeError(f"{kind.value} 输入维度 {source.shape[1]} 与 φ_init {head.W.shape} 不符")
        states[kind] = head(tc.constant(source.reshape(source.shape[0], head.W.cols)))
    return NodeStates(states)


def _slot_adjacency(
    etype: EdgeType,
    graph: HeteroGraph,
    bridges: Optional[BridgeState],
    commonsense: Optional[CommonsenseGraph],
) -> Tensor:
    """某一入边类型的权重矩阵 (n_dst x n_src)"""
    if etype.family == EdgeFamily.SCENE:
        return tc.constant(graph.adjacency(etype))
    if etype.family == EdgeFamily.COMMONSENSE:
        return tc.constant(commonsense.graph.adjacency(etype))
    if bridges is None:
        raise InputError(f"边类型 {etype.name} 需要桥接权重")
    if etype == ENTITY_CLASSIFIED_TO:
        return tc.transpose(bridges.entity_weights)
    if etype == ENTITY_HAS_INSTANCE:
        return bridges.entity_weights
    if etype == PREDICATE_CLASSIFIED_TO:
        return tc.transpose(bridges.predicate_weights)
    if etype == PREDICATE_HAS_INSTANCE:
        return bridges.predicate_weights
    raise InputError(f"未知桥接边类型: {etype.name}")


def aggregate_messages(
    graph: HeteroGraph,
    bridges: Optional[BridgeState],
    states: NodeStates,
    params: ModelParams,
    commonsense: Optional[CommonsenseGraph] = None,
) -> Dict[NodeKind, Tensor]:
    """
    发送并聚合消息：每个槽 = Σ 边权重 · φ_send(源状态)，按布局拼接

    Returns:
        {目标类型: n x (d · 槽数) 的拼接聚合}
    """
    messages = {kind: params.send_heads[kind](states[kind]) for kind in params.kinds}
    aggregated = {}
    for kind in params.kinds:
        slots = [
            tc.matmul(_slot_adjacency(etype, graph, bridges, commonsense), messages[etype.src_kind])
            for etype in params.slots[kind]
        ]
        aggregated[kind] = tc.concat(slots, axis=1)
    return aggregated


def message_round(
    graph: HeteroGraph,
    bridges: Optional[BridgeState],
    states: NodeStates,
    params: ModelParams,
    commonsense: Optional[CommonsenseGraph] = None,
) -> NodeStates:
    """一轮消息传递：发送、按槽聚合、φ_receive，再用 GRU 更新状态"""
    aggregated = aggregate_messages(graph, bridges, states, params, commonsense)
    updated = {}
    for kind in params.kinds:
        head = params.receive_heads[kind]
        if aggregated[kind].cols != head.in_dim:
            raise ConfigError(
                f"{kind.value} 接收头输入宽度 {head.in_dim} 与槽布局宽度 {aggregated[kind].cols} 不符"
            )
        received = head(aggregated[kind])
        updated[kind] = params.gru[kind](states[kind], received)
    return NodeStates(updated)


def refine_bridges(
    states: NodeStates,
    params: ModelParams,
    mode: InferenceMode,
    gt_labels: Optional[Sequence[int]] = None,
) -> BridgeState:
    """
    由当前状态重新计算桥接

    a^EB 第 i 行 = softmax_j(φ^SE_att(x_i) · φ^CE_att(y_j))，a^PB 同理；
    每行只保留 top-K（并列取小下标），保留值不重新归一化。
    PredCls 模式下实体行被真值 one-hot 覆盖。

    Raises:
        ModeError: PredCls 缺少真值类别
    """
    k = params.config.k_bridge
    if params.config.use_knowledge:
        entity_logits = tc.matmul_nt(
            params.att_heads[NodeKind.SE](states[NodeKind.SE]),
            params.att_heads[NodeKind.CE](states[NodeKind.CE]),
        )
        predicate_logits = tc.matmul_nt(
            params.att_heads[NodeKind.SP](states[NodeKind.SP]),
            params.att_heads[NodeKind.CP](states[NodeKind.CP]),
        )
    else:
        entity_logits = params.classifiers[NodeKind.SE](states[NodeKind.SE])
        predicate_logits = params.classifiers[NodeKind.SP](states[NodeKind.SP])

    entity_scores = tc.row_softmax(entity_logits)
    predicate_scores = tc.row_softmax(predicate_logits)
    # top-K 视为固定掩码
    entity_weights = tc.mul(entity_scores, tc.constant(topk_row_mask(entity_scores.data, k)))
    predicate_weights = tc.mul(predicate_scores, tc.constant(topk_row_mask(predicate_scores.data, k)))

    if mode == InferenceMode.PREDCLS:
        if gt_labels is None:
            raise ModeError("PredCls 需要真值实体类别")
        if len(gt_labels) != entity_scores.rows:
            raise InputError(f"真值类别数 {len(gt_labels)} 与 SE 数 {entity_scores.rows} 不符")
        clamp = tc.constant(one_hot(gt_labels, entity_scores.cols))
        entity_scores = entity_weights = clamp

    return BridgeState(entity_scores, entity_weights, predicate_scores, predicate_weights, k)


def initial_bridges(
    graph: HeteroGraph,
    inputs: SceneInputs,
    commonsense: CommonsenseGraph,
    params: ModelParams,
    mode: InferenceMode,
) -> BridgeState:
    """由检测器分布（PredCls 为真值 one-hot）初始化实体桥接，谓词桥接为空"""
    n_ce = commonsense.n_entity_classes
    if mode == InferenceMode.PREDCLS:
        if inputs.gt_labels is None:
            raise ModeError("PredCls 需要真值实体类别")
        dists = one_hot(inputs.gt_labels, n_ce)
    else:
        dists = inputs.label_dists
    if dists.ndim != 2 or dists.shape != (graph.count(NodeKind.SE), n_ce):
        raise InputError(f"检测器分布形状 {dists.shape} 与 (|SE|, |CE|) = ({graph.count(NodeKind.SE)}, {n_ce}) 不符")
    bridges = init_entity_bridges(
        dists, params.config.k_bridge,
        predicate_shape=(graph.count(NodeKind.SP), commonsense.n_predicate_classes),
    )
    return BridgeState.from_bridge_set(bridges, entity_scores=dists)


def forward(
    graph: HeteroGraph,
    inputs: SceneInputs,
    commonsense: CommonsenseGraph,
    params: ModelParams,
    mode: InferenceMode,
    steps: Optional[int] = None,
) -> tuple[BridgeState, NodeStates]:
    """
    完整前向：初始化桥接与状态，重复 T 次 (message_round → refine_bridges)

    Args:
        graph: 场景骨架
        inputs: 模型输入
        commonsense: 常识图
        params: 参数
        mode: 推理模式
        steps: 覆盖配置中的 T

    Returns:
        (最终桥接, 最终节点状态)
    """
    steps = params.config.steps if steps is None else steps
    states = init_states(graph, inputs, commonsense, params)

    if not params.config.use_knowledge:
        for _ in range(steps):
            states = message_round(graph, None, states, params)
        return refine_bridges(states, params, mode, inputs.gt_labels), states

    bridges = initial_bridges(graph, inputs, commonsense, params, mode)
    for step in range(steps):
        states = message_round(graph, bridges, states, params, commonsense)
        bridges = refine_bridges(states, params, mode, inputs.gt_labels)
        logger.debug(f"消息传递第 {step + 1}/{steps} 轮完成")
    return bridges, states


def predict(record: SceneRecord, commonsense: CommonsenseGraph, params: ModelParams, mode: InferenceMode) -> tuple[BridgeSet, SceneInputs]:
    """推理一条记录（不记录磁带）"""
    inputs = build_scene_inputs(record, mode)
    graph = build_graph(inputs)
    bridges, _ = forward(graph, inputs, commonsense, params, mode)
    return bridges.detach(), inputs
