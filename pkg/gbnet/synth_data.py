"""
合成数据 - 桌面规模的玩具世界（原型特征 + 规则表）与场景采样

代替检测器 + 真实标注的数据管线：每个场景给出检测框、视觉特征、
检测器类别分布、联合特征以及真值三元组。
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InputError, ParameterError
from .graph_core import BACKGROUND_INDEX
from .utils import derive_seed, ordered_pairs, union_features, validate_box

logger = logging.getLogger(__name__)

SPATIAL_RELATIONS = ("left", "right", "above", "below")

# (subject class, object class, spatial relation) -> predicate class，类别为 1 起的局部下标
RuleKey = Tuple[int, int, str]
Triplet = Tuple[int, int, int]


@dataclass
class ToyWorld:
    """
    玩具世界

    Attributes:
        entity_labels: 实体类别名（已排序，第 i 个对应局部下标 i+1）
        predicate_labels: 谓词类别名（已排序）
        prototypes: 每个实体类别的原型特征（单位球面）
        rules: 规则表，覆盖所有 (主语类, 宾语类, 空间关系)
        embeddings: 标签 -> 词向量
    """
    seed: int
    entity_labels: List[str]
    predicate_labels: List[str]
    prototypes: np.ndarray
    rules: Dict[RuleKey, int]
    embeddings: Dict[str, np.ndarray]
    sigma: float
    zipf_s: float = 1.0

    @property
    def n_entity_classes(self) -> int:
        return len(self.entity_labels)

    @property
    def n_predicate_classes(self) -> int:
        return len(self.predicate_labels)

    @property
    def feat_dim(self) -> int:
        return int(self.prototypes.shape[1])

    @property
    def embedding_dim(self) -> int:
        return int(next(iter(self.embeddings.values())).size) if self.embeddings else 0

    def predicate_of(self, subj_class: int, obj_class: int, relation: str) -> int:
        return self.rules[(subj_class, obj_class, relation)]


@dataclass(eq=False)
class SceneRecord:
    """
    单张图像的记录

    类别均为常识图中的局部下标（0 为背景）；
    union_features 的行顺序与 ordered_pairs(n) 一致。
    """
    image_id: str
    boxes: np.ndarray
    gt_boxes: np.ndarray
    features: np.ndarray
    label_dists: np.ndarray
    gt_labels: np.ndarray
    union_features: np.ndarray
    triplets: List[Triplet] = field(default_factory=list)

    @property
    def n_entities(self) -> int:
        return int(self.boxes.shape[0])

    @property
    def feat_dim(self) -> int:
        return int(self.features.shape[1])

    def validate(self) -> None:
        """检查记录内部一致性"""
        n = self.n_entities
        if any(ch.isspace() for ch in self.image_id) or not self.image_id:
            raise InputError(f"图像 ID 不能为空或包含空白: {self.image_id!r}")
        for name, array, width in (
            ("boxes", self.boxes, 4), ("gt_boxes", self.gt_boxes, 4),
            ("features", self.features, None), ("label_dists", self.label_dists, None),
        ):
            if array.ndim != 2 or array.shape[0] != n or (width is not None and array.shape[1] != width):
                raise InputError(f"{self.image_id}: {name} 形状错误 {array.shape}")
        if self.gt_labels.shape != (n,):
            raise InputError(f"{self.image_id}: gt_labels 形状错误 {self.gt_labels.shape}")
        if self.union_features.shape[0] != n * (n - 1):
            raise InputError(f"{self.image_id}: union_features 行数应为 {n * (n - 1)}")
        for box in list(self.boxes) + list(self.gt_boxes):
            if not validate_box(box):
                raise InputError(f"{self.image_id}: 边界框无效 {tuple(box)}")
        if n and not np.allclose(self.label_dists.sum(axis=1), 1.0, atol=1e-6, rtol=0.0):
            raise InputError(f"{self.image_id}: 检测器分布的行和不为 1")
        for subj, pred, obj in self.triplets:
            if not (0 <= subj < n and 0 <= obj < n) or subj == obj or pred <= BACKGROUND_INDEX:
                raise InputError(f"{self.image_id}: 三元组无效 ({subj}, {pred}, {obj})")

    def __eq__(self, other) -> bool:
        if not isinstance(other, SceneRecord):
            return NotImplemented
        arrays = ("boxes", "gt_boxes", "features", "label_dists", "gt_labels", "union_features")
        return (
            self.image_id == other.image_id
            and all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
            and list(self.triplets) == list(other.triplets)
        )


def zipf_masses(n: int, s: float = 1.0) -> np.ndarray:
    """Zipf 分布质量 1/k^s，归一化"""
    if n < 1:
        raise ParameterError(f"Zipf 类别数必须 ≥ 1: {n}")
    raw = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** s
    return raw / raw.sum()


def _largest_remainder(masses: np.ndarray, total: int) -> np.ndarray:
    """按质量把 total 个名额分配给各类（最大余数法），每类至少 1 个"""
    quotas = masses * total
    counts = np.floor(quotas).astype(int)
    remainder = total - counts.sum()
    order = np.argsort(-(quotas - counts), kind="stable")
    counts[order[:remainder]] += 1
    # 尾部类别至少拿到一个名额
    for index in np.nonzero(counts == 0)[0]:
        donor = int(np.argmax(counts))
        counts[donor] -= 1
        counts[index] += 1
    return counts


def spatial_relation(subj_box: Sequence[float], obj_box: Sequence[float]) -> str:
    """宾语相对主语的主方向（图像坐标 y 向下）"""
    dx = (obj_box[0] + obj_box[2]) / 2.0 - (subj_box[0] + subj_box[2]) / 2.0
    dy = (obj_box[1] + obj_box[3]) / 2.0 - (subj_box[1] + subj_box[3]) / 2.0
    if abs(dx) >= abs(dy):
        return "right" if dx > 0 else "left"
    return "below" if dy > 0 else "above"


def generate_world(
    seed: int,
    n_entity_classes: int,
    n_pred_classes: int,
    feat_dim: int,
    sigma: float,
    embedding_dim: Optional[int] = None,
    zipf_s: float = 1.0,
) -> ToyWorld:
    """
    生成玩具世界（完全由 seed 决定）

    Args:
        seed: 随机种子
        n_entity_classes: 实体类别数（不含背景）
        n_pred_classes: 谓词类别数（不含背景）
        feat_dim: 视觉特征维度
        sigma: 场景特征噪声标准差
        embedding_dim: 词向量维度，默认等于 feat_dim
        zipf_s: 谓词频率的 Zipf 指数

    Returns:
        ToyWorld
    """
    if n_entity_classes < 2 or n_pred_classes < 2:
        raise ParameterError(f"类别数必须 ≥ 2: entity={n_entity_classes}, predicate={n_pred_classes}")
    if sigma < 0:
        raise ParameterError(f"噪声标准差不能为负: {sigma}")
    if feat_dim < 1:
        raise ParameterError(f"特征维度必须 ≥ 1: {feat_dim}")
    embedding_dim = embedding_dim or feat_dim

    rng = np.random.default_rng(seed)
    prototypes = rng.normal(size=(n_entity_classes, feat_dim))
    prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)

    width = max(2, len(str(max(n_entity_classes, n_pred_classes) - 1)))
    entity_labels = [f"entity_{i:0{width}d}" for i in range(n_entity_classes)]
    predicate_labels = [f"predicate_{i:0{width}d}" for i in range(n_pred_classes)]

    keys: List[RuleKey] = [
        (s, o, relation)
        for s in range(1, n_entity_classes + 1)
        for o in range(1, n_entity_classes + 1)
        for relation in SPATIAL_RELATIONS
    ]
    counts = _largest_remainder(zipf_masses(n_pred_classes, zipf_s), len(keys))
    assignment = np.repeat(np.arange(1, n_pred_classes + 1), counts)
    rng.shuffle(assignment)
    rules = {key: int(pred) for key, pred in zip(keys, assignment)}

    embeddings: Dict[str, np.ndarray] = {}
    for label in entity_labels + predicate_labels:
        vector = rng.normal(size=embedding_dim)
        embeddings[label] = vector / np.linalg.norm(vector)

    logger.info(
        f"生成玩具世界: seed={seed}, {n_entity_classes} 实体类, {n_pred_classes} 谓词类, "
        f"{len(rules)} 条规则, 规则分配 {counts.tolist()}"
    )
    return ToyWorld(seed, entity_labels, predicate_labels, prototypes, rules, embeddings, float(sigma), zipf_s)


def _sample_box(rng: np.random.Generator) -> np.ndarray:
    w, h = rng.uniform(0.1, 0.3, size=2)
    cx = rng.uniform(w / 2.0, 1.0 - w / 2.0)
    cy = rng.uniform(h / 2.0, 1.0 - h / 2.0)
    return np.clip(np.array([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]), 0.0, 1.0)


def _jitter_box(rng: np.random.Generator, box: np.ndarray, scale: float = 0.02) -> np.ndarray:
    """模拟检测框误差；抖动后无效则退回真值框"""
    jittered = np.clip(box + rng.normal(scale=scale, size=4), 0.0, 1.0)
    return jittered if validate_box(jittered) else box.copy()


def detector_distribution(world: ToyWorld, features: np.ndarray) -> np.ndarray:
    """
    模拟检测器：对到各原型的负欧氏距离做 softmax，第 0 列（背景）为 0

    Returns:
        n x (n_entity_classes + 1)
    """
    distances = np.linalg.norm(features[:, None, :] - world.prototypes[None, :, :], axis=2)
    logits = -distances
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    dists = np.zeros((features.shape[0], world.n_entity_classes + 1))
    dists[:, 1:] = e / e.sum(axis=1, keepdims=True)
    return dists


def sample_scene(
    world: ToyWorld,
    n_entities: int,
    seed: int,
    image_id: Optional[str] = None,
    relation_prob: float = 0.5,
) -> SceneRecord:
    """
    采样一个场景

    Args:
        world: 玩具世界
        n_entities: 实体数，2 ≤ n ≤ 20
        seed: 场景种子
        image_id: 图像 ID（默认 "scene_<seed>"）
        relation_prob: 每个有序对带真值谓词的概率

    Returns:
        SceneRecord
    """
    if not (2 <= n_entities <= 20):
        raise ParameterError(f"场景实体数必须在 [2, 20] 内: {n_entities}")
    rng = np.random.default_rng(seed)

    gt_labels = rng.integers(1, world.n_entity_classes + 1, size=n_entities)
    gt_boxes = np.vstack([_sample_box(rng) for _ in range(n_entities)])
    boxes = np.vstack([_jitter_box(rng, box) for box in gt_boxes])
    noise = rng.normal(size=(n_entities, world.feat_dim))
    features = world.prototypes[gt_labels - 1] + world.sigma * noise

    triplets: List[Triplet] = []
    for i, j in ordered_pairs(n_entities):
        if rng.random() < relation_prob:
            relation = spatial_relation(gt_boxes[i], gt_boxes[j])
            triplets.append((i, world.predicate_of(int(gt_labels[i]), int(gt_labels[j]), relation), j))

    return SceneRecord(
        image_id=image_id or f"scene_{seed}",
        boxes=boxes,
        gt_boxes=gt_boxes,
        features=features,
        label_dists=detector_distribution(world, features),
        gt_labels=gt_labels.astype(np.int64),
        union_features=union_features(features, boxes),
        triplets=triplets,
    )


def generate_dataset(
    world: ToyWorld,
    n_scenes: int,
    seed: int,
    min_entities: int = 3,
    max_entities: int = 5,
    prefix: str = "img",
    threads: int = 1,
) -> List[SceneRecord]:
    """
    批量生成场景，每个场景的种子由 (seed, image_id) 派生，结果与线程数无关

    Returns:
        按 image_id 顺序排列的记录
    """
    if not (2 <= min_entities <= max_entities <= 20):
        raise ParameterError(f"实体数范围无效: [{min_entities}, {max_entities}]")
    width = max(4, len(str(n_scenes)))
    image_ids = [f"{prefix}_{i:0{width}d}" for i in range(n_scenes)]
    span = max_entities - min_entities + 1

    def build(image_id: str) -> SceneRecord:
        n = min_entities + derive_seed(seed, f"{image_id}/size") % span
        return sample_scene(world, n, derive_seed(seed, image_id), image_id=image_id)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        records = list(executor.map(build, image_ids))
    logger.info(f"生成 {len(records)} 个场景 ({prefix}), 三元组 {sum(len(r.triplets) for r in records)} 个")
    return records


def predicate_histogram(world: ToyWorld, records: Sequence[SceneRecord]) -> np.ndarray:
    """真值谓词的类别频率（下标 0 为背景，恒为 0）"""
    counts = np.zeros(world.n_predicate_classes + 1)
    for record in records:
        for _, pred, _ in record.triplets:
            counts[pred] += 1
    return counts


def triplet_counts(world: ToyWorld, records: Sequence[SceneRecord]) -> Dict[Tuple[str, str, str], int]:
    """按类别名统计 (主语, 谓词, 宾语) 出现次数"""
    counts: Dict[Tuple[str, str, str], int] = {}
    for record in records:
        for subj, pred, obj in record.triplets:
            key = (
                world.entity_labels[int(record.gt_labels[subj]) - 1],
                world.predicate_labels[pred - 1],
                world.entity_labels[int(record.gt_labels[obj]) - 1],
            )
            counts[key] = counts.get(key, 0) + 1
    return counts


def write_commonsense_sources(
    world: ToyWorld,
    records: Sequence[SceneRecord],
    out_dir: str | Path,
    similarity_threshold: float = 0.3,
    relatedness_threshold: float = 0.5,
) -> Dict[str, Path]:
    """
    写出编译常识图所需的 TSV 源文件

    - SimilarTo：原型余弦相似度超过阈值的实体类对（双向，权重为相似度）
    - RelatedTo：规则主语集合 Jaccard 相似度超过阈值的谓词类对
    - 三元组计数来自 records

    Returns:
        {名称: 路径}
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "entities": out_dir / "entities.txt",
        "predicates": out_dir / "predicates.txt",
        "ontology": out_dir / "ontology.tsv",
        "triplet_counts": out_dir / "triplet_counts.tsv",
        "embeddings": out_dir / "embeddings.tsv",
    }
    paths["entities"].write_text("\n".join(world.entity_labels) + "\n", encoding="utf-8")
    paths["predicates"].write_text("\n".join(world.predicate_labels) + "\n", encoding="utf-8")

    lines = ["# src\trelation\tdst\tweight"]
    cosine = world.prototypes @ world.prototypes.T
    for a in range(world.n_entity_classes):
        for b in range(world.n_entity_classes):
            if a != b and cosine[a, b] > similarity_threshold:
                lines.append(
                    f"{world.entity_labels[a]}\tSimilarTo\t{world.entity_labels[b]}\t{min(1.0, float(cosine[a, b]))!r}"
                )

    subjects: Dict[int, set] = {p: set() for p in range(1, world.n_predicate_classes + 1)}
    for (subj, _, _), pred in world.rules.items():
        subjects[pred].add(subj)
    for p in range(1, world.n_predicate_classes + 1):
        for q in range(1, world.n_predicate_classes + 1):
            if p == q:
                continue
            union = subjects[p] | subjects[q]
            jaccard = len(subjects[p] & subjects[q]) / len(union) if union else 0.0
            if jaccard >= relatedness_threshold:
                lines.append(
                    f"{world.predicate_labels[p - 1]}\tRelatedTo\t{world.predicate_labels[q - 1]}\t{jaccard!r}"
                )
    paths["ontology"].write_text("\n".join(lines) + "\n", encoding="utf-8")

    counts = triplet_counts(world, records)
    paths["triplet_counts"].write_text(
        "".join(f"{s}\t{p}\t{o}\t{c}\n" for (s, p, o), c in sorted(counts.items())),
        encoding="utf-8",
    )
    paths["embeddings"].write_text(
        "".join(
            f"{label}\t{','.join(repr(float(v)) for v in world.embeddings[label])}\n"
            for label in world.entity_labels + world.predicate_labels
        ),
        encoding="utf-8",
    )
    logger.info(f"常识源文件已写出: {out_dir} (本体边 {len(lines) - 1} 条, 三元组 {len(counts)} 种)")
    return paths


def bayes_predicate(world: ToyWorld, record: SceneRecord, subj: int, obj: int) -> int:
    """已知真值类别和框时的规则预测（玩具任务可解性的参照）"""
    relation = spatial_relation(record.gt_boxes[subj], record.gt_boxes[obj])
    return world.predicate_of(int(record.gt_labels[subj]), int(record.gt_labels[obj]), relation)


def scene_sizes(records: Sequence[SceneRecord]) -> Tuple[int, int]:
    """记录集合的最小/最大实体数"""
    sizes = [r.n_entities for r in records]
    return (min(sizes), max(sizes)) if sizes else (0, 0)


def expected_rule_share(world: ToyWorld) -> np.ndarray:
    """规则表中各谓词占比（下标 0 对应谓词类 1）"""
    counts = np.bincount(list(world.rules.values()), minlength=world.n_predicate_classes + 1)[1:]
    return counts / max(1, counts.sum())


