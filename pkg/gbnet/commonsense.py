"""
常识图编译器 - 由本体边、三元组计数统计和词向量组装固定的常识图 (N_CE, N_CP, E_C)

节点 id 确定：CE（背景在前，其余按标签排序）之后是 CP（同样规则）。
"""

import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    FormatError, InputError, MissingEmbeddingError, ParseError, SignatureError, UniquenessError,
)
from .graph_core import (
    BACKGROUND_LABEL, COMMONSENSE_KINDS, EdgeFamily, GraphBuilder, HeteroGraph, NodeKind,
    commonsense_edge_type,
)
from .tsv_parser import OntologyEdgeRecord, TripletKey
from .utils import deduplicate_records, format_float

logger = logging.getLogger(__name__)

GRAPH_MAGIC = "GBKG 1"

# 条件概率边：(名称, 条件变量类型, 被条件变量类型)，边从条件类别指向被条件类别
CONDITIONAL_FAMILIES = (
    ("subjectGivenPredicate", NodeKind.CP, NodeKind.CE),
    ("predicateGivenSubject", NodeKind.CE, NodeKind.CP),
    ("objectGivenPredicate", NodeKind.CP, NodeKind.CE),
    ("predicateGivenObject", NodeKind.CE, NodeKind.CP),
    ("subjectGivenObject", NodeKind.CE, NodeKind.CE),
    ("objectGivenSubject", NodeKind.CE, NodeKind.CE),
)


@dataclass(frozen=True)
class LabeledEdge:
    """端点类型已确定、尚未分配 id 的常识边"""
    src_label: str
    src_kind: NodeKind
    dst_label: str
    dst_kind: NodeKind
    relation: str
    weight: float


@dataclass
class CommonsenseGraph:
    """
    常识图

    Attributes:
        graph: 仅含 CE/CP 节点和常识边的 HeteroGraph
        entity_embeddings: |CE| x dim，局部顺序，背景为零向量
        predicate_embeddings: |CP| x dim
    """
    graph: HeteroGraph
    entity_embeddings: np.ndarray
    predicate_embeddings: np.ndarray

    @property
    def entity_labels(self) -> List[str]:
        return self.graph.labels(NodeKind.CE)

    @property
    def predicate_labels(self) -> List[str]:
        return self.graph.labels(NodeKind.CP)

    @property
    def n_entity_classes(self) -> int:
        return self.graph.count(NodeKind.CE)

    @property
    def n_predicate_classes(self) -> int:
        return self.graph.count(NodeKind.CP)

    @property
    def embedding_dim(self) -> int:
        return int(self.entity_embeddings.shape[1])

    def embeddings(self, kind: NodeKind) -> np.ndarray:
        return self.entity_embeddings if kind == NodeKind.CE else self.predicate_embeddings


def compile_conditional_edges(counts: Mapping[TripletKey, int]) -> List[LabeledEdge]:
    """
    由三元组计数编译六族条件概率边

    P(subj|pred), P(pred|subj), P(obj|pred), P(pred|obj), P(subj|obj), P(obj|subj)，
    每族从条件类别指向被条件类别，零概率不出边，不做平滑。

    Args:
        counts: {(subj, pred, obj): count}

    Returns:
        按 (relation, src, dst) 排序的 LabeledEdge 列表
    """
    total = sum(counts.values())
    if not counts or total <= 0:
        raise InputError("三元组计数为空，无法编译条件概率边")

    # 各族的 (条件类别, 被条件类别) 联合计数
    joint: Dict[str, Dict[Tuple[str, str], int]] = {name: defaultdict(int) for name, _, _ in CONDITIONAL_FAMILIES}
    for (subj, pred, obj), count in counts.items():
        if count <= 0:
            continue
        joint["subjectGivenPredicate"][(pred, subj)] += count
        joint["predicateGivenSubject"][(subj, pred)] += count
        joint["objectGivenPredicate"][(pred, obj)] += count
        joint["predicateGivenObject"][(obj, pred)] += count
        joint["subjectGivenObject"][(obj, subj)] += count
        joint["objectGivenSubject"][(subj, obj)] += count

    edges: List[LabeledEdge] = []
    for name, src_kind, dst_kind in CONDITIONAL_FAMILIES:
        marginal: Dict[str, int] = defaultdict(int)
        for (condition, _), count in joint[name].items():
            marginal[condition] += count
        for (condition, target), count in sorted(joint[name].items()):
            edges.append(LabeledEdge(condition, src_kind, target, dst_kind, name, count / marginal[condition]))

    logger.info(f"编译条件概率边: {len(edges)} 条（总计数 {total}）")
    return edges


def _resolve(label: str, entity_set: set, predicate_set: set) -> Tuple[str, NodeKind]:
    """标签 → (标签, 类型)；支持 CE:/CP: 前缀消歧"""
    if label.startswith("CE:"):
        return label[3:], NodeKind.CE
    if label.startswith("CP:"):
        return label[3:], NodeKind.CP
    in_entity, in_predicate = label in entity_set, label in predicate_set
    if in_entity and in_predicate:
        raise InputError(f"标签 {label} 同时是实体和谓词，请加 CE:/CP: 前缀")
    if in_entity:
        return label, NodeKind.CE
    if in_predicate:
        return label, NodeKind.CP
    raise InputError(f"未知标签: {label}")


def assemble(
    entity_labels: Sequence[str],
    predicate_labels: Sequence[str],
    ontology_edges: Iterable[OntologyEdgeRecord],
    conditional_edges: Iterable[LabeledEdge],
    embeddings: Mapping[str, np.ndarray],
) -> CommonsenseGraph:
    """
    组装常识图

    Args:
        entity_labels: 实体类别（不含背景）
        predicate_labels: 谓词类别（不含背景）
        ontology_edges: 本体边记录
        conditional_edges: compile_conditional_edges 的输出
        embeddings: {label: 向量}

    Returns:
        CommonsenseGraph，含 |entity|+1 个 CE 和 |predicate|+1 个 CP

    Raises:
        UniquenessError: 标签重复
        SignatureError: 边端点类型与边族签名不符
        MissingEmbeddingError: 标签缺少词向量
    """
    for kind, labels in ((NodeKind.CE, entity_labels), (NodeKind.CP, predicate_labels)):
        seen = set()
        for label in labels:
            if label == BACKGROUND_LABEL:
                raise InputError(f"{kind.value} 标签表不能包含背景标签 {BACKGROUND_LABEL}")
            if label in seen:
                raise UniquenessError(f"{kind.value} 标签重复: {label}")
            seen.add(label)

    dims = set()
    for label in list(entity_labels) + list(predicate_labels):
        if label not in embeddings:
            raise MissingEmbeddingError(label)
        dims.add(int(np.asarray(embeddings[label]).size))
    if len(dims) > 1:
        raise InputError(f"词向量维度不一致: {sorted(dims)}")
    dim = dims.pop() if dims else 0

    builder = GraphBuilder()
    ids: Dict[Tuple[NodeKind, str], int] = {}
    tables: Dict[NodeKind, List[np.ndarray]] = {NodeKind.CE: [], NodeKind.CP: []}
    for kind, labels in ((NodeKind.CE, entity_labels), (NodeKind.CP, predicate_labels)):
        for label in [BACKGROUND_LABEL] + sorted(labels):
            ids[(kind, label)] = builder.add_node(kind, label=label)
            vector = np.zeros(dim) if label == BACKGROUND_LABEL else np.asarray(embeddings[label], dtype=np.float64)
            tables[kind].append(vector.reshape(-1))

    entity_set, predicate_set = set(entity_labels), set(predicate_labels)
    labeled: List[LabeledEdge] = []
    for record in ontology_edges:
        try:
            src_label, src_kind = _resolve(record.src_label, entity_set, predicate_set)
            dst_label, dst_kind = _resolve(record.dst_label, entity_set, predicate_set)
        except InputError as e:
            raise InputError(f"本体边第 {record.line_no} 行: {e}") from None
        labeled.append(LabeledEdge(src_label, src_kind, dst_label, dst_kind, record.relation, record.weight))
    labeled.extend(conditional_edges)

    resolved = []
    for edge in labeled:
        for label, kind in ((edge.src_label, edge.src_kind), (edge.dst_label, edge.dst_kind)):
            if kind not in COMMONSENSE_KINDS:
                raise SignatureError(f"常识边 {edge.relation} 的端点 {label} 不是 CE/CP")
            if (kind, label) not in ids:
                raise SignatureError(f"常识边 {edge.relation} 的端点 {label} 不是 {kind.value} 节点")
        if not (0.0 <= edge.weight <= 1.0):
            raise InputError(f"常识边权重必须在 [0, 1] 内: {edge}")
        etype = commonsense_edge_type(edge.relation, edge.src_kind, edge.dst_kind)
        resolved.append({
            "src": ids[(edge.src_kind, edge.src_label)],
            "dst": ids[(edge.dst_kind, edge.dst_label)],
            "etype": etype,
            "weight": edge.weight,
        })

    unique = deduplicate_records(resolved, lambda r: (r["src"], r["dst"], r["etype"].key))
    if len(unique) < len(resolved):
        logger.warning(f"常识边去重: 丢弃 {len(resolved) - len(unique)} 条重复边")
    unique.sort(key=lambda r: (r["src"], r["dst"], r["etype"].key))
    for record in unique:
        builder.add_edge(record["src"], record["dst"], record["etype"], record["weight"])

    graph = builder.build()
    commonsense = CommonsenseGraph(
        graph=graph,
        entity_embeddings=np.vstack(tables[NodeKind.CE]) if dim else np.zeros((len(tables[NodeKind.CE]), 0)),
        predicate_embeddings=np.vstack(tables[NodeKind.CP]) if dim else np.zeros((len(tables[NodeKind.CP]), 0)),
    )
    logger.info(
        f"常识图组装完成: {commonsense.n_entity_classes} CE, {commonsense.n_predicate_classes} CP, "
        f"{len(graph.edges)} 条边"
    )
    return commonsense


def summarize(commonsense: CommonsenseGraph) -> Dict[str, int]:
    """按端点类型族 (CE->CE, CE->CP, CP->CE, CP->CP) 统计节点和边数量"""
    summary = {
        "CE": commonsense.n_entity_classes,
        "CP": commonsense.n_predicate_classes,
        "CE->CE": 0, "CE->CP": 0, "CP->CE": 0, "CP->CP": 0,
    }
    for edge in commonsense.graph.edges:
        key = f"{edge.etype.src_kind.value}->{edge.etype.dst_kind.value}"
        summary[key] += 1
    return summary


def edge_type_counts(commonsense: CommonsenseGraph) -> Dict[str, int]:
    """按边类型统计"""
    counts: Dict[str, int] = {}
    for etype in commonsense.graph.edge_types():
        counts[f"{etype.name}({etype.src_kind.value}->{etype.dst_kind.value})"] = len(commonsense.graph.edges_of(etype))
    return counts


# ========== GBKG 文件读写 ==========

def write_graph(commonsense: CommonsenseGraph, path: str | Path) -> None:
    """
    写出常识图文件

    格式:
        GBKG 1
        NODE id kind label
        EMBED id v1,...,vd
        EDGE src dst etype weight
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    graph = commonsense.graph
    lines = [GRAPH_MAGIC]
    for node in graph.nodes:
        lines.append(f"NODE {node.id} {node.kind.value} {node.label}")
    for node in graph.nodes:
        vector = commonsense.embeddings(node.kind)[graph.local_index(node.id)]
        lines.append(f"EMBED {node.id} {','.join(format_float(v) for v in vector)}")
    for edge in graph.edges:
        lines.append(f"EDGE {edge.src} {edge.dst} {edge.etype.name} {format_float(edge.weight)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"常识图已保存: {path}")


def read_graph(path: str | Path) -> CommonsenseGraph:
    """
    读取常识图文件

    Raises:
        FormatError: 文件头不符
        ParseError: 行格式错误（带行号）
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"常识图文件不存在: {path}")
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != GRAPH_MAGIC:
        raise FormatError(f"常识图文件头错误（需要 {GRAPH_MAGIC!r}）: {path}")

    builder = GraphBuilder()
    kinds: Dict[int, NodeKind] = {}
    vectors: Dict[int, np.ndarray] = {}
    pending_edges: List[Tuple[int, int, int, str, float]] = []

    for line_no, line in enumerate(lines[1:], 2):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        tag = parts[0]
        try:
            if tag == "NODE" and len(parts) == 4:
                node_id, kind = int(parts[1]), NodeKind(parts[2])
                if kind not in COMMONSENSE_KINDS:
                    raise ParseError(f"常识图只能包含 CE/CP 节点: {kind.value}", line_no=line_no, path=str(path))
                if node_id != builder.next_id:
                    raise ParseError(f"节点 id 不连续: {node_id}", line_no=line_no, path=str(path))
                builder.add_node(kind, label=parts[3])
                kinds[node_id] = kind
            elif tag == "EMBED" and len(parts) in (2, 3):
                values = parts[2].split(",") if len(parts) == 3 else []
                vectors[int(parts[1])] = np.array([float(v) for v in values], dtype=np.float64)
            elif tag == "EDGE" and len(parts) == 5:
                pending_edges.append((line_no, int(parts[1]), int(parts[2]), parts[3], float(parts[4])))
            else:
                raise ParseError(f"无法识别的行: {line!r}", line_no=line_no, path=str(path))
        except (ValueError, KeyError) as e:
            raise ParseError(f"字段格式错误: {e}", line_no=line_no, path=str(path)) from None

    for line_no, src, dst, name, weight in pending_edges:
        if src not in kinds or dst not in kinds:
            raise ParseError(f"边端点不存在: {src}->{dst}", line_no=line_no, path=str(path))
        builder.add_edge(src, dst, commonsense_edge_type(name, kinds[src], kinds[dst]), weight)

    graph = builder.build()
    tables = {}
    for kind in COMMONSENSE_KINDS:
        rows = []
        for node in graph.nodes_of(kind):
            if node.id not in vectors:
                raise MissingEmbeddingError(node.label)
            rows.append(vectors[node.id])
        dims = {row.size for row in rows}
        if len(dims) > 1:
            raise ParseError(f"{kind.value} 词向量维度不一致: {sorted(dims)}", path=str(path))
        tables[kind] = np.vstack(rows) if rows else np.zeros((0, 0))
    if tables[NodeKind.CE].shape[1] != tables[NodeKind.CP].shape[1]:
        raise ParseError("CE 与 CP 词向量维度不一致", path=str(path))

    logger.info(f"读取常识图 {path}: {len(graph.nodes)} 个节点, {len(graph.edges)} 条边")
    return CommonsenseGraph(graph, tables[NodeKind.CE], tables[NodeKind.CP])
