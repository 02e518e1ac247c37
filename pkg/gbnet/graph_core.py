"""
异构图数据模型 - 节点/边类型体系、场景骨架构建、初始桥接边

四类节点：SE(场景实体) / SP(场景谓词) / CE(常识实体) / CP(常识谓词)
三族边：scene / commonsense / bridge
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InputError, MalformedBoxError, ParameterError, SignatureError, UniquenessError
from .utils import Box, ensure_box

logger = logging.getLogger(__name__)

BACKGROUND_LABEL = "__background__"
BACKGROUND_INDEX = 0


class NodeKind(Enum):
    """节点类型"""
    SE = "SE"
    SP = "SP"
    CE = "CE"
    CP = "CP"


# 固定的类型顺序，用于接收槽拼接
KIND_ORDER: Tuple[NodeKind, ...] = (NodeKind.SE, NodeKind.SP, NodeKind.CE, NodeKind.CP)
COMMONSENSE_KINDS = (NodeKind.CE, NodeKind.CP)


class EdgeFamily(Enum):
    """边族"""
    SCENE = "scene"
    COMMONSENSE = "commonsense"
    BRIDGE = "bridge"


@dataclass(frozen=True)
class EdgeType:
    """边类型：名称 + 边族 + 端点类型签名"""
    name: str
    family: EdgeFamily = field(compare=False)
    src_kind: NodeKind = field(compare=False)
    dst_kind: NodeKind = field(compare=False)

    @property
    def key(self) -> Tuple[str, str, str]:
        return (self.name, self.src_kind.value, self.dst_kind.value)

    def __hash__(self) -> int:
        return hash(self.key)

    def __eq__(self, other) -> bool:
        return isinstance(other, EdgeType) and self.key == other.key

    def __lt__(self, other: "EdgeType") -> bool:
        return self.key < other.key


SUBJECT_OF = EdgeType("subjectOf", EdgeFamily.SCENE, NodeKind.SE, NodeKind.SP)
OBJECT_OF = EdgeType("objectOf", EdgeFamily.SCENE, NodeKind.SE, NodeKind.SP)
HAS_SUBJECT = EdgeType("hasSubject", EdgeFamily.SCENE, NodeKind.SP, NodeKind.SE)
HAS_OBJECT = EdgeType("hasObject", EdgeFamily.SCENE, NodeKind.SP, NodeKind.SE)
SCENE_EDGE_TYPES = (SUBJECT_OF, OBJECT_OF, HAS_SUBJECT, HAS_OBJECT)

ENTITY_CLASSIFIED_TO = EdgeType("entityClassifiedTo", EdgeFamily.BRIDGE, NodeKind.SE, NodeKind.CE)
ENTITY_HAS_INSTANCE = EdgeType("entityHasInstance", EdgeFamily.BRIDGE, NodeKind.CE, NodeKind.SE)
PREDICATE_CLASSIFIED_TO = EdgeType("predicateClassifiedTo", EdgeFamily.BRIDGE, NodeKind.SP, NodeKind.CP)
PREDICATE_HAS_INSTANCE = EdgeType("predicateHasInstance", EdgeFamily.BRIDGE, NodeKind.CP, NodeKind.SP)
BRIDGE_EDGE_TYPES = (ENTITY_CLASSIFIED_TO, ENTITY_HAS_INSTANCE, PREDICATE_CLASSIFIED_TO, PREDICATE_HAS_INSTANCE)


def commonsense_edge_type(name: str, src_kind: NodeKind, dst_kind: NodeKind) -> EdgeType:
    """
    创建常识边类型，端点必须是 CE/CP

    Raises:
        SignatureError: 端点类型不是常识节点
    """
    if src_kind not in COMMONSENSE_KINDS or dst_kind not in COMMONSENSE_KINDS:
        raise SignatureError(f"常识边 {name} 端点必须是 CE/CP: {src_kind.value}->{dst_kind.value}")
    return EdgeType(name, EdgeFamily.COMMONSENSE, src_kind, dst_kind)


@dataclass(frozen=True)
class Node:
    """图节点"""
    id: int
    kind: NodeKind
    box: Optional[Box] = None           # 仅 SE
    subj_id: Optional[int] = None       # 仅 SP
    obj_id: Optional[int] = None        # 仅 SP
    label: Optional[str] = None         # 仅 CE/CP
    feature_id: Optional[int] = None    # SE 对应的检测特征编号


@dataclass(frozen=True)
class Edge:
    """有向带权边"""
    src: int
    dst: int
    etype: EdgeType
    weight: float = 1.0


class HeteroGraph:
    """
    构建完成后不可变的异构图

    边同时按 etype 和 (etype, dst) 建索引，消息聚合时对每个节点线性扫描
    """

    def __init__(self, nodes: Sequence[Node], edges: Sequence[Edge]):
        self.nodes: Tuple[Node, ...] = tuple(nodes)
        self.edges: Tuple[Edge, ...] = tuple(edges)

        self._by_kind: Dict[NodeKind, List[Node]] = {kind: [] for kind in KIND_ORDER}
        self._local: Dict[int, int] = {}
        for node in self.nodes:
            bucket = self._by_kind[node.kind]
            self._local[node.id] = len(bucket)
            bucket.append(node)

        self._by_type: Dict[EdgeType, List[Edge]] = {}
        self._by_dst: Dict[Tuple[EdgeType, int], List[Edge]] = {}
        for edge in self.edges:
            self._by_type.setdefault(edge.etype, []).append(edge)
            self._by_dst.setdefault((edge.etype, edge.dst), []).append(edge)

        self._adjacency_cache: Dict[EdgeType, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def node(self, node_id: int) -> Node:
        return self.nodes[node_id]

    def nodes_of(self, kind: NodeKind) -> List[Node]:
        """按 id 顺序返回某类节点"""
        return list(self._by_kind[kind])

    def count(self, kind: NodeKind) -> int:
        return len(self._by_kind[kind])

    def local_index(self, node_id: int) -> int:
        """节点在同类节点中的位置"""
        return self._local[node_id]

    def labels(self, kind: NodeKind) -> List[str]:
        return [node.label for node in self._by_kind[kind]]

    def edge_types(self) -> List[EdgeType]:
        return sorted(self._by_type)

    def edges_of(self, etype: EdgeType) -> List[Edge]:
        return list(self._by_type.get(etype, []))

    def in_edges(self, etype: EdgeType, dst: int) -> List[Edge]:
        return list(self._by_dst.get((etype, dst), []))

    def sp_pairs(self) -> List[Tuple[int, int]]:
        """每个 SP 节点对应的 (主语局部下标, 宾语局部下标)"""
        return [
            (self._local[node.subj_id], self._local[node.obj_id])
            for node in self._by_kind[NodeKind.SP]
        ]

    def background_id(self, kind: NodeKind) -> Optional[int]:
        for node in self._by_kind[kind]:
            if node.label == BACKGROUND_LABEL:
                return node.id
        return None

    def adjacency(self, etype: EdgeType) -> np.ndarray:
        """
        某一边类型的稠密权重矩阵（局部坐标）

        Returns:
            (n_dst_kind, n_src_kind) 矩阵，A[dst, src] = 权重
        """
        cached = self._adjacency_cache.get(etype)
        if cached is not None:
            return cached
        matrix = np.zeros((self.count(etype.dst_kind), self.count(etype.src_kind)), dtype=np.float64)
        for edge in self._by_type.get(etype, []):
            matrix[self._local[edge.dst], self._local[edge.src]] += edge.weight
        matrix.setflags(write=False)
        self._adjacency_cache[etype] = matrix
        return matrix

    def commonsense_part(self) -> Tuple[List[Node], List[Edge]]:
        """仅保留 CE/CP 节点及常识边"""
        nodes = [n for n in self.nodes if n.kind in COMMONSENSE_KINDS]
        edges = [e for e in self.edges if e.etype.family == EdgeFamily.COMMONSENSE]
        return nodes, edges


class GraphBuilder:
    """异构图构建器（可变），build() 之后得到不可变的 HeteroGraph"""

    def __init__(self):
        self._nodes: List[Node] = []
        self._edges: List[Edge] = []
        self._edge_keys = set()
        self._labels: Dict[NodeKind, set] = {NodeKind.CE: set(), NodeKind.CP: set()}

    @property
    def next_id(self) -> int:
        return len(self._nodes)

    def add_node(
        self,
        kind: NodeKind,
        box: Optional[Sequence[float]] = None,
        subj_id: Optional[int] = None,
        obj_id: Optional[int] = None,
        label: Optional[str] = None,
        feature_id: Optional[int] = None,
    ) -> int:
        """
        追加节点并校验其类型约束

        Returns:
            新节点 id（按插入顺序稠密分配）
        """
        node_id = self.next_id
        if kind == NodeKind.SE:
            box = ensure_box(box, node_id)
        elif kind == NodeKind.SP:
            if subj_id is None or obj_id is None or subj_id == obj_id:
                raise InputError(f"SP 节点必须引用两个不同的 SE: {subj_id}, {obj_id}")
            for ref in (subj_id, obj_id):
                if ref >= len(self._nodes) or self._nodes[ref].kind != NodeKind.SE:
                    raise InputError(f"SP 节点引用的 {ref} 不是 SE 节点")
        else:
            if not label:
                raise InputError(f"{kind.value} 节点缺少标签")
            if label in self._labels[kind]:
                raise UniquenessError(f"{kind.value} 标签重复: {label}")
            self._labels[kind].add(label)

        self._nodes.append(Node(node_id, kind, box=box, subj_id=subj_id, obj_id=obj_id,
                                label=label, feature_id=feature_id))
        return node_id

    def add_edge(self, src: int, dst: int, etype: EdgeType, weight: float = 1.0) -> None:
        """追加边，校验端点存在、类型签名、权重有限且 (src,dst,etype) 唯一"""
        if not (0 <= src < len(self._nodes)) or not (0 <= dst < len(self._nodes)):
            raise InputError(f"边端点不存在: {src}->{dst} ({etype.name})")
        if self._nodes[src].kind != etype.src_kind or self._nodes[dst].kind != etype.dst_kind:
            raise SignatureError(
                f"边 {etype.name} 需要 {etype.src_kind.value}->{etype.dst_kind.value}，"
                f"实际 {self._nodes[src].kind.value}->{self._nodes[dst].kind.value}"
            )
        if not math.isfinite(weight):
            raise InputError(f"边权重非有限值: {src}->{dst} ({etype.name}) = {weight}")
        key = (src, dst, etype.key)
        if key in self._edge_keys:
            raise UniquenessError(f"重复边: {src}->{dst} ({etype.name})")
        self._edge_keys.add(key)
        self._edges.append(Edge(src, dst, etype, float(weight)))

    def extend(self, nodes: Iterable[Node], edges: Iterable[Edge]) -> None:
        """按原 id 顺序复制另一张图的节点和边"""
        for node in nodes:
            if node.id != self.next_id:
                raise InputError(f"复制节点时 id 不连续: 期望 {self.next_id}，实际 {node.id}")
            self.add_node(node.kind, box=node.box, subj_id=node.subj_id, obj_id=node.obj_id,
                          label=node.label, feature_id=node.feature_id)
        for edge in edges:
            self.add_edge(edge.src, edge.dst, edge.etype, edge.weight)

    def build(self) -> HeteroGraph:
        return HeteroGraph(self._nodes, self._edges)


@dataclass
class BridgeSet:
    """
    四族桥接边（以两张行矩阵表示，classifiedTo 与 hasInstance 共享权重）

    entity_weights: |SE| x |CE|，即 a^EB
    predicate_weights: |SP| x |CP|，即 a^PB
    """
    entity_weights: np.ndarray
    predicate_weights: np.ndarray
    k: int

    def entity_nonzeros(self) -> np.ndarray:
        return np.count_nonzero(self.entity_weights, axis=1)

    def predicate_nonzeros(self) -> np.ndarray:
        return np.count_nonzero(self.predicate_weights, axis=1)

    def validate(self) -> None:
        """每行非零数 ≤ K 且非负"""
        for name, rows in (("entity", self.entity_weights), ("predicate", self.predicate_weights)):
            if rows.size == 0:
                continue
            if np.any(rows < 0):
                raise InputError(f"{name} 桥接权重出现负数")
            if np.any(np.count_nonzero(rows, axis=1) > self.k):
                raise InputError(f"{name} 桥接行非零数超过 K={self.k}")

    def to_edges(self, graph: HeteroGraph) -> List[Edge]:
        """
        展开为 classifiedTo / hasInstance 边（双向同权重）

        Args:
            graph: 含 SE/SP/CE/CP 节点的完整图

        Returns:
            桥接边列表
        """
        edges: List[Edge] = []
        families = (
            (self.entity_weights, NodeKind.SE, NodeKind.CE, ENTITY_CLASSIFIED_TO, ENTITY_HAS_INSTANCE),
            (self.predicate_weights, NodeKind.SP, NodeKind.CP, PREDICATE_CLASSIFIED_TO, PREDICATE_HAS_INSTANCE),
        )
        for rows, scene_kind, class_kind, forward_type, reverse_type in families:
            scene_nodes = graph.nodes_of(scene_kind)
            class_nodes = graph.nodes_of(class_kind)
            for i, j in zip(*np.nonzero(rows)):
                weight = float(rows[i, j])
                edges.append(Edge(scene_nodes[i].id, class_nodes[j].id, forward_type, weight))
                edges.append(Edge(class_nodes[j].id, scene_nodes[i].id, reverse_type, weight))
        return edges


def topk_row_mask(values: np.ndarray, k: int) -> np.ndarray:
    """
    每行保留最大的 k 个位置（并列时取类别下标最小者）

    Returns:
        与 values 同形状的 0/1 掩码
    """
    mask = np.zeros_like(values, dtype=np.float64)
    if values.size == 0:
        return mask
    k = min(k, values.shape[1])
    # 稳定排序保证并列时下标小者在前
    order = np.argsort(-values, axis=1, kind="stable")[:, :k]
    np.put_along_axis(mask, order, 1.0, axis=1)
    return mask


def build_scene_skeleton(
    detections: Sequence[Tuple[Sequence[float], Optional[int]]],
    commonsense: Optional[HeteroGraph] = None,
) -> HeteroGraph:
    """
    由检测结果构建场景骨架

    每个检测生成一个 SE；每个有序对 (i, j), i != j 生成一个 SP，
    并以 subjectOf / objectOf / hasSubject / hasObject 四条权重为 1 的边相连。

    Args:
        detections: [(box, feature_id), ...]，box 为归一化 (x1, y1, x2, y2)
        commonsense: 常识图（可选），其节点和边先行复制，保证 CE/CP id 在前

    Returns:
        HeteroGraph

    Raises:
        MalformedBoxError: 边界框越界或退化
    """
    builder = GraphBuilder()
    if commonsense is not None:
        nodes, edges = commonsense.commonsense_part()
        builder.extend(nodes, edges)

    se_ids = []
    for index, (box, feature_id) in enumerate(detections):
        try:
            se_ids.append(builder.add_node(NodeKind.SE, box=box, feature_id=feature_id))
        except MalformedBoxError:
            raise MalformedBoxError(f"第 {index} 个检测的边界框无效: {box}") from None

    for subj in se_ids:
        for obj in se_ids:
            if subj == obj:
                continue
            sp = builder.add_node(NodeKind.SP, subj_id=subj, obj_id=obj)
            builder.add_edge(subj, sp, SUBJECT_OF)
            builder.add_edge(obj, sp, OBJECT_OF)
            builder.add_edge(sp, subj, HAS_SUBJECT)
            builder.add_edge(sp, obj, HAS_OBJECT)

    graph = builder.build()
    logger.debug(f"场景骨架: {len(se_ids)} 个 SE, {graph.count(NodeKind.SP)} 个 SP")
    return graph


def init_entity_bridges(
    label_dists: np.ndarray,
    k: int,
    predicate_shape: Tuple[int, int] = (0, 0),
) -> BridgeSet:
    """
    用检测器类别分布 p_j 初始化实体桥接

    每个 SE 连接其 top-K 类别（权重 p_j），hasInstance 反向边共享同一权重；
    谓词桥接初始为空。

    Args:
        label_dists: |SE| x |CE| 分布矩阵，每行和为 1
        k: K_bridge
        predicate_shape: 谓词桥接矩阵形状 (|SP|, |CP|)

    Returns:
        BridgeSet
    """
    dists = np.asarray(label_dists, dtype=np.float64)
    if dists.ndim != 2:
        raise InputError(f"类别分布必须是二维矩阵: shape={dists.shape}")
    if k < 1:
        raise ParameterError(f"K_bridge 必须 ≥ 1: {k}")
    if dists.shape[0] and not np.allclose(dists.sum(axis=1), 1.0, atol=1e-6, rtol=0.0):
        raise InputError("检测器类别分布的行和不为 1")
    if np.any(dists < 0):
        raise InputError("检测器类别分布出现负数")

    n_classes = dists.shape[1]
    if k > n_classes:
        logger.warning(f"K_bridge={k} 超过类别数 {n_classes}，截断为 {n_classes}")
        k = n_classes

    weights = dists * topk_row_mask(dists, k)
    return BridgeSet(
        entity_weights=weights,
        predicate_weights=np.zeros(predicate_shape, dtype=np.float64),
        k=k,
    )
