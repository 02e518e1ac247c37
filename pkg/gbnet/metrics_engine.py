"""
指标计算引擎 - 三元组排序抽取、图约束、IoU 匹配与 R@K / mR@K 汇总
"""

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InputError, ParameterError
from .graph_core import BACKGROUND_INDEX, BridgeSet
from .utils import Box, iou, ordered_pairs

logger = logging.getLogger(__name__)

MATCH_IOU = 0.5
BOX_TASKS = ("sggen",)


@dataclass(frozen=True)
class ScoredTriplet:
    """一条带置信度的预测三元组"""
    subject: int
    subject_class: int
    subject_box: Box
    predicate: int
    object: int
    object_class: int
    object_box: Box
    confidence: float

    @property
    def sort_key(self) -> Tuple[float, int, int, int]:
        return (-self.confidence, self.subject, self.object, self.predicate)


@dataclass(frozen=True)
class GTTriplet:
    """真值三元组"""
    subject: int
    subject_class: int
    subject_box: Box
    predicate: int
    object: int
    object_class: int
    object_box: Box


def gt_triplets(record) -> List[GTTriplet]:
    """从 SceneRecord 提取真值三元组"""
    result = []
    for subj, pred, obj in record.triplets:
        result.append(GTTriplet(
            subj, int(record.gt_labels[subj]), tuple(float(v) for v in record.gt_boxes[subj]),
            int(pred),
            obj, int(record.gt_labels[obj]), tuple(float(v) for v in record.gt_boxes[obj]),
        ))
    return result


def entity_predictions(
    entity_weights: np.ndarray,
    background: Optional[int] = BACKGROUND_INDEX,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    每个 SE 的类别（非背景列中的最大桥接权重，并列取小下标）及其得分

    Returns:
        (classes, scores)
    """
    weights = np.asarray(entity_weights, dtype=np.float64)
    n, n_classes = weights.shape
    candidates = weights.copy()
    if background is not None and n_classes > 1:
        candidates[:, background] = -np.inf
    classes = np.argmax(candidates, axis=1) if n else np.zeros(0, dtype=np.int64)
    scores = weights[np.arange(n), classes] if n else np.zeros(0)
    return classes.astype(np.int64), scores


def extract_topk(
    bridges: BridgeSet,
    boxes: Sequence[Sequence[float]],
    k: int,
    constrained: bool,
    entity_background: Optional[int] = BACKGROUND_INDEX,
    predicate_background: Optional[int] = BACKGROUND_INDEX,
) -> List[ScoredTriplet]:
    """
    抽取置信度最高的 K 个三元组

    置信度 = 主语得分 × 谓词得分 × 宾语得分；背景谓词与零置信度不输出；
    图约束模式下每个有序对只保留置信度最高的谓词；
    排序并列时依次按 (主语 id, 宾语 id, 谓词类别) 升序。

    Args:
        bridges: 模型输出的桥接权重
        boxes: SE 边界框（行顺序同 entity_weights）
        k: 保留个数
        constrained: 是否启用图约束
        entity_background / predicate_background: 背景类下标，None 表示无背景类

    Raises:
        ParameterError: K ≤ 0
    """
    if k <= 0:
        raise ParameterError(f"K 必须为正: {k}")
    n = len(boxes)
    pairs = ordered_pairs(n)
    predicate_weights = np.asarray(bridges.predicate_weights, dtype=np.float64)
    if bridges.entity_weights.shape[0] != n or predicate_weights.shape[0] != len(pairs):
        raise InputError(
            f"桥接矩阵与实体数不符: entity {bridges.entity_weights.shape}, "
            f"predicate {predicate_weights.shape}, n={n}"
        )
    classes, scores = entity_predictions(bridges.entity_weights, entity_background)
    box_tuples = [tuple(float(v) for v in box) for box in boxes]

    candidates: List[ScoredTriplet] = []
    for sp, (i, j) in enumerate(pairs):
        pair_best: Optional[ScoredTriplet] = None
        for c in range(predicate_weights.shape[1]):
            if predicate_background is not None and c == predicate_background:
                continue
            weight = predicate_weights[sp, c]
            if weight <= 0.0:
                continue
            confidence = float(scores[i] * weight * scores[j])
            if confidence <= 0.0:
                continue
            triplet = ScoredTriplet(
                i, int(classes[i]), box_tuples[i], c, j, int(classes[j]), box_tuples[j], confidence,
            )
            if not constrained:
                candidates.append(triplet)
            elif pair_best is None or triplet.sort_key < pair_best.sort_key:
                pair_best = triplet
        if constrained and pair_best is not None:
            candidates.append(pair_best)

    candidates.sort(key=lambda t: t.sort_key)
    return candidates[:k]


@dataclass
class ImageRecall:
    """单张图像的召回结果"""
    recall: float
    hits: Counter = field(default_factory=Counter)
    totals: Counter = field(default_factory=Counter)


def _matches(pred: ScoredTriplet, gt: GTTriplet, use_boxes: bool) -> bool:
    if (pred.subject_class, pred.predicate, pred.object_class) != (gt.subject_class, gt.predicate, gt.object_class):
        return False
    if use_boxes:
        return iou(pred.subject_box, gt.subject_box) >= MATCH_IOU and iou(pred.object_box, gt.object_box) >= MATCH_IOU
    return pred.subject == gt.subject and pred.object == gt.object


def match_and_recall(
    predictions: Sequence[ScoredTriplet],
    gts: Sequence[GTTriplet],
    k: int,
    task: str,
) -> ImageRecall:
    """
    按排名贪心匹配前 K 个预测与真值

    三个类别全部正确且两端框匹配（SGGen 为 IoU ≥ 0.5，其余任务为同一 SE）即命中；
    每个预测最多消耗一个真值，每个真值只能被消耗一次。

    Returns:
        ImageRecall，recall = 命中数 / 真值数
    """
    if not gts:
        raise InputError("match_and_recall 需要至少一个真值三元组")
    use_boxes = task in BOX_TASKS
    consumed = [False] * len(gts)
    hits: Counter = Counter()
    totals: Counter = Counter(gt.predicate for gt in gts)
    for pred in predictions[:k]:
        for index, gt in enumerate(gts):
            if not consumed[index] and _matches(pred, gt, use_boxes):
                consumed[index] = True
                hits[gt.predicate] += 1
                break
    return ImageRecall(sum(consumed) / len(gts), hits, totals)


@dataclass
class AggregateRecall:
    recall: float
    mean_recall: float
    per_class: Dict[int, float]
    n_images: int


def aggregate(results: Sequence[ImageRecall]) -> AggregateRecall:
    """
    汇总：R 为逐图召回的平均；各类召回为跨图累计的命中/总数，mR 为有真值类别的平均
    """
    if not results:
        raise InputError("aggregate 需要至少一张图像的结果")
    hits: Counter = Counter()
    totals: Counter = Counter()
    for result in results:
        hits.update(result.hits)
        totals.update(result.totals)
    per_class = {c: hits[c] / totals[c] for c in sorted(totals) if totals[c] > 0}
    mean_recall = float(np.mean(list(per_class.values()))) if per_class else 0.0
    recall = float(np.mean([r.recall for r in results]))
    return AggregateRecall(recall, mean_recall, per_class, len(results))


@dataclass
class MetricEntry:
    task: str
    k: int
    constrained: bool
    recall: float
    mean_recall: float
    per_class: Dict[int, float]
    n_images: int


@dataclass
class MetricReport:
    """按 (任务, K, 图约束) 组织的指标表"""
    entries: List[MetricEntry] = field(default_factory=list)

    def get(self, task: str, k: int, constrained: bool = True) -> MetricEntry:
        for entry in self.entries:
            if (entry.task, entry.k, entry.constrained) == (task, k, constrained):
                return entry
        raise KeyError(f"没有指标: {task} K={k} constrained={constrained}")

    def lines(self) -> List[str]:
        """task<TAB>metric<TAB>K<TAB>constrained<TAB>value"""
        rows = []
        for e in self.entries:
            flag = "true" if e.constrained else "false"
            rows.append(f"{e.task}\tR\t{e.k}\t{flag}\t{e.recall:.6f}")
            rows.append(f"{e.task}\tmR\t{e.k}\t{flag}\t{e.mean_recall:.6f}")
        return rows


class MetricsEngine:
    """评测累加器：逐图加入预测，最后汇总成 MetricReport"""

    def __init__(self, ks: Iterable[int] = (20, 50, 100), constrained_modes: Iterable[bool] = (True, False)):
        """
        初始化评测器

        Args:
            ks: 评测的 K 列表
            constrained_modes: 图约束开关列表
        """
        self.ks = sorted(set(int(k) for k in ks))
        if not self.ks or self.ks[0] <= 0:
            raise ParameterError(f"K 列表必须为正整数: {self.ks}")
        self.constrained_modes = list(constrained_modes)
        self._results: Dict[Tuple[str, int, bool], List[ImageRecall]] = {}
        self._tasks: List[str] = []
        self.skipped = 0

    def add_image(
        self,
        task: str,
        bridges: BridgeSet,
        boxes: Sequence[Sequence[float]],
        gts: Sequence[GTTriplet],
    ) -> None:
        """加入一张图像的预测；没有真值三元组的图像不参与召回"""
        if task not in self._tasks:
            self._tasks.append(task)
        if not gts:
            self.skipped += 1
            return
        for constrained in self.constrained_modes:
            ranked = extract_topk(bridges, boxes, self.ks[-1], constrained)
            for k in self.ks:
                result = match_and_recall(ranked, gts, k, task)
                self._results.setdefault((task, k, constrained), []).append(result)

    def report(self) -> MetricReport:
        report = MetricReport()
        for task in self._tasks:
            for constrained in self.constrained_modes:
                for k in self.ks:
                    results = self._results.get((task, k, constrained), [])
                    if not results:
                        continue
                    agg = aggregate(results)
                    report.entries.append(MetricEntry(
                        task, k, constrained, agg.recall, agg.mean_recall, agg.per_class, agg.n_images,
                    ))
        if self.skipped:
            logger.info(f"评测跳过无真值三元组的图像 {self.skipped} 张")
        return report
