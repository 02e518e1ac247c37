"""
TSV 解析器 - 读取常识图的原始输入（标签表、本体边、三元组计数、词向量）

所有文件均为 UTF-8，空行和以 # 开头的行被忽略，错误携带行号。
"""

import logging
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Set, Tuple

import numpy as np

from .errors import ParseError, VocabularyError

logger = logging.getLogger(__name__)

# 本体关系词表：WordNet 的 SimilarTo + ConceptNet 的五种关系
ONTOLOGY_RELATIONS = ("SimilarTo", "PartOf", "RelatedTo", "IsA", "MannerOf", "UsedFor")

TripletKey = Tuple[str, str, str]


@dataclass(frozen=True)
class OntologyEdgeRecord:
    """一条本体边记录"""
    src_label: str
    relation: str
    dst_label: str
    weight: float = 1.0
    line_no: int = 0


class TSVReader:
    """逐行读取 TSV，跳过注释与空行"""

    def __init__(self, path: str | Path):
        """
        初始化读取器

        Args:
            path: 文件路径
        """
        self.path = Path(path)
        if not self.path.exists():
            raise FileNotFoundError(f"文件不存在: {self.path}")

    def rows(self, min_cols: int, max_cols: int) -> Iterator[Tuple[int, List[str]]]:
        """
        产出 (行号, 字段列表)

        Raises:
            ParseError: 列数不在 [min_cols, max_cols]
        """
        with open(self.path, "r", encoding="utf-8") as f:
            for line_no, raw in enumerate(f, 1):
                line = raw.rstrip("\n").rstrip("\r")
                if not line.strip() or line.lstrip().startswith("#"):
                    continue
                fields = [field.strip() for field in line.split("\t")]
                if not (min_cols <= len(fields) <= max_cols):
                    raise ParseError(
                        f"期望 {min_cols}-{max_cols} 列，实际 {len(fields)} 列",
                        line_no=line_no, path=str(self.path),
                    )
                if any(not field for field in fields[:min_cols]):
                    raise ParseError("存在空字段", line_no=line_no, path=str(self.path))
                yield line_no, fields

    def error(self, message: str, line_no: int) -> ParseError:
        return ParseError(message, line_no=line_no, path=str(self.path))


def _check_label(reader: TSVReader, label: str, line_no: int) -> str:
    if any(ch.isspace() for ch in label):
        raise reader.error(f"标签不能包含空白字符: {label!r}", line_no)
    return label


def load_label_list(path: str | Path) -> List[str]:
    """
    读取标签表（每行一个标签）

    Returns:
        标签列表（保持文件顺序）
    """
    reader = TSVReader(path)
    labels = [_check_label(reader, fields[0], line_no) for line_no, fields in reader.rows(1, 1)]
    logger.info(f"读取标签表 {reader.path}: {len(labels)} 个")
    return labels


def load_ontology_edges(
    path: str | Path,
    known_labels: Optional[Set[str]] = None,
) -> List[OntologyEdgeRecord]:
    """
    读取本体边 TSV：src<TAB>relation<TAB>dst[<TAB>weight]

    Args:
        path: 文件路径
        known_labels: 已知标签集合；给出时未知标签记录会按行号告警并跳过

    Returns:
        OntologyEdgeRecord 列表

    Raises:
        ParseError: 行格式错误 / 权重不在 (0, 1]
        VocabularyError: 关系名不在词表中
    """
    reader = TSVReader(path)
    records: List[OntologyEdgeRecord] = []
    unknown = 0
    relation_counter: Counter = Counter()

    for line_no, fields in reader.rows(3, 4):
        src, relation, dst = fields[0], fields[1], fields[2]
        if relation not in ONTOLOGY_RELATIONS:
            raise VocabularyError(
                f"未知关系 {relation!r}，可选: {', '.join(ONTOLOGY_RELATIONS)}",
                line_no=line_no, path=str(reader.path),
            )
        # 权重列缺失时默认为 1.0
        weight = 1.0
        if len(fields) == 4 and fields[3]:
            try:
                weight = float(fields[3])
            except ValueError:
                raise reader.error(f"权重不是数字: {fields[3]!r}", line_no) from None
            if not math.isfinite(weight) or not (0.0 < weight <= 1.0):
                raise reader.error(f"权重必须在 (0, 1] 内: {weight}", line_no)

        if known_labels is not None:
            missing = [label for label in (src, dst) if _strip_kind(label) not in known_labels]
            if missing:
                unknown += 1
                logger.warning(f"{reader.path}:{line_no} 未知标签 {', '.join(missing)}，跳过")
                continue

        records.append(OntologyEdgeRecord(
            _check_label(reader, src, line_no), relation, _check_label(reader, dst, line_no), weight, line_no,
        ))
        relation_counter[relation] += 1

    logger.info(
        f"读取本体边 {reader.path}: {len(records)} 条 "
        f"({', '.join(f'{k}={v}' for k, v in sorted(relation_counter.items()))})"
        + (f"，跳过未知标签 {unknown} 条" if unknown else "")
    )
    return records


def _strip_kind(label: str) -> str:
    """去掉可选的 CE:/CP: 前缀"""
    if label[:3] in ("CE:", "CP:"):
        return label[3:]
    return label


def load_triplet_counts(path: str | Path) -> Dict[TripletKey, int]:
    """
    读取三元组计数 TSV：subj<TAB>pred<TAB>obj<TAB>count

    Returns:
        {(subj, pred, obj): count}，重复行累加
    """
    reader = TSVReader(path)
    counts: Counter = Counter()
    for line_no, fields in reader.rows(4, 4):
        try:
            count = int(fields[3])
        except ValueError:
            raise reader.error(f"计数不是整数: {fields[3]!r}", line_no) from None
        if count < 0:
            raise reader.error(f"计数不能为负: {count}", line_no)
        key = tuple(_check_label(reader, label, line_no) for label in fields[:3])
        counts[key] += count
    logger.info(f"读取三元组计数 {reader.path}: {len(counts)} 种, 合计 {sum(counts.values())}")
    return dict(counts)


def load_embeddings(path: str | Path) -> Dict[str, np.ndarray]:
    """
    读取词向量表：label<TAB>v1,v2,...,vd

    Returns:
        {label: 向量}

    Raises:
        ParseError: 数值格式错误或维度不一致
    """
    reader = TSVReader(path)
    table: Dict[str, np.ndarray] = {}
    dim: Optional[int] = None
    for line_no, fields in reader.rows(2, 2):
        label = _check_label(reader, fields[0], line_no)
        try:
            vector = np.array([float(v) for v in fields[1].split(",")], dtype=np.float64)
        except ValueError:
            raise reader.error(f"词向量格式错误: {label}", line_no) from None
        if not np.all(np.isfinite(vector)):
            raise reader.error(f"词向量包含非有限值: {label}", line_no)
        if dim is None:
            dim = vector.size
        elif vector.size != dim:
            raise reader.error(f"词向量维度 {vector.size} 与首行 {dim} 不一致: {label}", line_no)
        if label in table:
            raise reader.error(f"词向量标签重复: {label}", line_no)
        table[label] = vector
    logger.info(f"读取词向量 {reader.path}: {len(table)} 个, 维度 {dim}")
    return table
