"""
训练器 - 输出与真值对齐、类别平衡损失、Adam 优化与检查点

每个批次内的逐图梯度可并行计算，按 image_id 顺序归约，保证结果与线程数无关。
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import tensor_core as tc
from .commonsense import CommonsenseGraph
from .config import RunConfig
from .data_store import load_tensors, save_tensors
from .errors import ConfigError, NonFiniteError, ParameterError, ShapeError, UndefinedClassError
from .graph_core import BACKGROUND_INDEX
from .metrics_engine import MetricsEngine, gt_triplets
from .model import (
    BridgeState, InferenceMode, ModelParams, build_graph, build_scene_inputs, forward, one_hot, predict,
)
from .synth_data import SceneRecord
from .tensor_core import Tape, Tensor, backprop
from .utils import derive_seed, iou, ordered_pairs

logger = logging.getLogger(__name__)

LossRow = Tuple[int, float, float]


# ========== 对齐 ==========

@dataclass
class Alignment:
    """
    每个 SE / SP 的训练目标

    Attributes:
        entity_targets: |SE| 个 CE 局部下标（未匹配为背景 0）
        predicate_targets: |SP| 个 CP 局部下标（无真值谓词为背景 0）
        matches: SE 下标 -> 真值实体下标
    """
    entity_targets: np.ndarray
    predicate_targets: np.ndarray
    matches: Dict[int, int] = field(default_factory=dict)


def align(
    pred_boxes: Sequence[Sequence[float]],
    gt_entities: Sequence[Tuple[Sequence[float], int]],
    gt_triplets: Sequence[Tuple[int, int, int]],
    iou_threshold: float = 0.5,
) -> Alignment:
    """
    IoU 贪心对齐：全部 (SE, 真值) 对按 IoU 降序（并列按下标）依次匹配，双方各用一次

    SP 的目标由其两端对齐到的真值实体决定：真值中存在 (主语, p, 宾语) 则为 p（取首条），
    否则为背景谓词。

    Args:
        pred_boxes: SE 框
        gt_entities: [(真值框, 真值类别), ...]
        gt_triplets: [(主语下标, 谓词类别, 宾语下标), ...]，下标指向 gt_entities
        iou_threshold: 最小 IoU
    """
    n = len(pred_boxes)
    candidates = []
    for i, box in enumerate(pred_boxes):
        for g, (gt_box, _) in enumerate(gt_entities):
            overlap = iou(box, gt_box)
            if overlap >= iou_threshold:
                candidates.append((-overlap, i, g))
    candidates.sort()

    matches: Dict[int, int] = {}
    used = set()
    for _, i, g in candidates:
        if i in matches or g in used:
            continue
        matches[i] = g
        used.add(g)

    entity_targets = np.full(n, BACKGROUND_INDEX, dtype=np.int64)
    for i, g in matches.items():
        entity_targets[i] = int(gt_entities[g][1])

    relation_of: Dict[Tuple[int, int], int] = {}
    for subj, pred, obj in gt_triplets:
        relation_of.setdefault((subj, obj), int(pred))
    predicate_targets = np.full(n * (n - 1), BACKGROUND_INDEX, dtype=np.int64)
    for sp, (i, j) in enumerate(ordered_pairs(n)):
        if i in matches and j in matches:
            predicate_targets[sp] = relation_of.get((matches[i], matches[j]), BACKGROUND_INDEX)
    return Alignment(entity_targets, predicate_targets, matches)


# ========== 类别平衡 ==========

def class_balanced_weight(n_j: int, beta: float) -> float:
    """
    有效样本数权重 (1 - β) / (1 - β^n_j)

    Raises:
        UndefinedClassError: n_j = 0
        ParameterError: β 不在 [0, 1)
    """
    if n_j <= 0:
        raise UndefinedClassError(f"类别频次为 {n_j}，类别平衡权重无定义")
    if not (0.0 <= beta < 1.0):
        raise ParameterError(f"β 必须在 [0, 1) 内: {beta}")
    if beta == 0.0:
        return 1.0
    return (1.0 - beta) / (1.0 - beta ** n_j)


class ClassBalanceTable:
    """谓词类别权重表（未出现的类别权重为 1）"""

    def __init__(self, counts: Sequence[int], beta: float):
        self.beta = beta
        self.counts = np.asarray(counts, dtype=np.int64)
        self.weights = np.array(
            [class_balanced_weight(int(n), beta) if n > 0 else 1.0 for n in self.counts],
            dtype=np.float64,
        )

    def weight(self, class_index: int) -> float:
        return float(self.weights[class_index])

    @classmethod
    def from_records(
        cls,
        records: Sequence[SceneRecord],
        n_predicate_classes: int,
        beta: float,
    ) -> "ClassBalanceTable":
        """
        按训练目标统计谓词频次：有真值谓词的有序对计入该类，其余有序对计入背景
        """
        counts = np.zeros(n_predicate_classes, dtype=np.int64)
        for record in records:
            n = record.n_entities
            labeled = {}
            for subj, pred, obj in record.triplets:
                labeled.setdefault((subj, obj), pred)
            for pred in labeled.values():
                counts[pred] += 1
            counts[BACKGROUND_INDEX] += n * (n - 1) - len(labeled)
        table = cls(counts, beta)
        logger.info(f"类别平衡表 (β={beta}): 频次 {counts.tolist()}")
        return table


# ========== 损失 ==========

def _picked(scores: Tensor, targets: np.ndarray) -> Tensor:
    """每行目标类别的得分 (n x 1)"""
    return tc.sum(tc.mul(scores, tc.constant(one_hot(targets, scores.cols))), axis=1)


def compute_loss(
    bridges: BridgeState,
    alignment: Alignment,
    balance_table: Optional[ClassBalanceTable] = None,
    include_entities: bool = True,
) -> Tensor:
    """
    节点级交叉熵之和

    谓词节点贡献 -w_j · log a^PB_ij（未启用平衡时 w_j = 1），实体节点贡献 -log a^EB_ij；
    使用稀疏化之前的 softmax 行。

    Args:
        bridges: 前向输出
        alignment: 训练目标
        balance_table: 类别平衡表，None 表示普通交叉熵
        include_entities: 是否计入实体项（PredCls 中实体被真值钳制，不计入）

    Returns:
        1x1 标量损失
    """
    targets = alignment.predicate_targets
    if bridges.predicate_scores.rows != len(targets):
        raise ShapeError(f"谓词目标数 {len(targets)} 与 SP 数 {bridges.predicate_scores.rows} 不符")
    weights = (
        balance_table.weights[targets] if balance_table is not None else np.ones(len(targets))
    ).reshape(-1, 1)
    log_p = tc.log(_picked(bridges.predicate_scores, targets))
    loss = tc.scale(tc.sum(tc.mul(log_p, tc.constant(weights))), -1.0)

    if include_entities:
        entity_targets = alignment.entity_targets
        if bridges.entity_scores.rows != len(entity_targets):
            raise ShapeError(f"实体目标数 {len(entity_targets)} 与 SE 数 {bridges.entity_scores.rows} 不符")
        entity_loss = tc.scale(tc.sum(tc.log(_picked(bridges.entity_scores, entity_targets))), -1.0)
        loss = tc.add(loss, entity_loss)
    return loss


# ========== Adam ==========

@dataclass
class AdamState:
    """Adam 的一阶/二阶矩与步数"""
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def to_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {f"adam.m.{name}": value for name, value in self.m.items()}
        arrays.update({f"adam.v.{name}": value for name, value in self.v.items()})
        arrays["adam.step"] = np.array([[float(self.step)]])
        return arrays

    def load_arrays(self, arrays: Mapping[str, np.ndarray], shapes: Mapping[str, Tuple[int, ...]]) -> None:
        """载入检查点中的 Adam 状态（检查点不含时保持初始状态）"""
        if "adam.step" not in arrays:
            return
        self.step = int(round(float(np.asarray(arrays["adam.step"]).reshape(-1)[0])))
        for prefix, table in (("adam.m.", self.m), ("adam.v.", self.v)):
            table.clear()
            for name, shape in shapes.items():
                key = prefix + name
                if key not in arrays:
                    continue
                value = np.asarray(arrays[key], dtype=np.float64)
                if value.shape != tuple(shape):
                    raise ShapeError(f"张量 {key} 形状不符: 检查点 {value.shape}, 模型 {tuple(shape)}")
                table[name] = value.copy()


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """带偏差校正的 Adam 更新（原地修改参数）"""
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param.data)
        m = state.m.get(name, np.zeros_like(param.data))
        v = state.v.get(name, np.zeros_like(param.data))
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.m[name], state.v[name] = m, v
        m_hat = m / correction1
        v_hat = v / correction2
        param.data = param.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        param.grad = None


# ========== 检查点 ==========

def save_checkpoint(params: ModelParams, state: Optional[AdamState], path: str | Path) -> None:
    """参数 + Adam 状态写入 GBNET1 检查点（32 位浮点）"""
    arrays: Dict[str, np.ndarray] = dict(params.snapshot())
    if state is not None:
        arrays.update(state.to_arrays())
    save_tensors(arrays, path)


def load_checkpoint(
    path: str | Path,
    params: ModelParams,
    state: Optional[AdamState] = None,
) -> Tuple[ModelParams, AdamState]:
    """
    读取检查点到给定结构的参数中

    Raises:
        FormatError: 文件损坏
        ShapeError: 配置与检查点形状不符（错误信息包含张量名）
    """
    arrays = load_tensors(path)
    params.load_arrays(arrays)
    state = state or AdamState()
    state.load_arrays(arrays, {name: t.shape for name, t in params.named_tensors().items()})
    return params, state


# ========== 训练循环 ==========

@dataclass
class TrainResult:
    params: ModelParams
    state: AdamState
    loss_log: List[LossRow] = field(default_factory=list)
    validation: List[Tuple[int, float]] = field(default_factory=list)


class Trainer:
    """监督训练：前向（完整 T 步展开）→ 损失 → 反向 → Adam"""

    def __init__(
        self,
        commonsense: CommonsenseGraph,
        config: RunConfig,
        params: Optional[ModelParams] = None,
        state: Optional[AdamState] = None,
        feat_dim: Optional[int] = None,
    ):
        """
        初始化训练器

        Args:
            commonsense: 常识图
            config: 运行配置
            params: 已有参数（续训）；None 时按 seed 随机初始化
            state: 已有 Adam 状态
            feat_dim: 视觉特征维度（params 为 None 时必需）
        """
        t = config.train
        if config.model.steps < 1:
            raise ConfigError("训练需要 model.steps (T) ≥ 1")
        self.commonsense = commonsense
        self.config = config
        self.mode = InferenceMode.parse(t.task)
        if params is None:
            if feat_dim is None:
                raise ConfigError("初始化参数需要 feat_dim")
            params = ModelParams.create(config.model, commonsense, feat_dim, seed=t.seed)
        self.params = params
        self.state = state or AdamState(lr=t.lr, beta1=t.beta1, beta2=t.beta2, eps=t.eps)
        self.state.lr, self.state.beta1, self.state.beta2, self.state.eps = t.lr, t.beta1, t.beta2, t.eps
        self.balance_table: Optional[ClassBalanceTable] = None
        self._names = {id(tensor): name for name, tensor in params.named_tensors().items()}

    def image_loss(self, record: SceneRecord) -> Tensor:
        """单张图像的损失（在调用方的磁带上记录）"""
        inputs = build_scene_inputs(record, self.mode)
        graph = build_graph(inputs)
        alignment = align(
            inputs.boxes,
            list(zip(record.gt_boxes, record.gt_labels)),
            record.triplets,
            self.config.train.iou_threshold,
        )
        bridges, _ = forward(graph, inputs, self.commonsense, self.params, self.mode)
        return compute_loss(
            bridges, alignment, self.balance_table,
            include_entities=self.mode != InferenceMode.PREDCLS,
        )

    def image_gradients(self, record: SceneRecord) -> Tuple[float, Dict[str, np.ndarray]]:
        """
        计算单张图像的损失与梯度（不写入参数的 grad 槽，可并行调用）

        Raises:
            NonFiniteError: 损失或梯度出现非有限值（附带 image_id）
        """
        try:
            with Tape() as tape:
                loss = self.image_loss(record)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteError(f"损失非有限: {value}")
            if not loss.requires_grad:
                return value, {}
            grads = backprop(loss, tape=tape, accumulate=False)
        except NonFiniteError as e:
            if e.image_id is not None:
                raise
            raise NonFiniteError(str(e), image_id=record.image_id) from None
        return value, {self._names[id(tensor)]: grad for tensor, grad in grads.items() if id(tensor) in self._names}

    def validate(self, records: Sequence[SceneRecord], k: int = 50) -> float:
        """验证集上的 PredCls R@K（图约束）"""
        engine = MetricsEngine(ks=[k], constrained_modes=[True])
        for record in records:
            bridges, inputs = predict(record, self.commonsense, self.params, InferenceMode.PREDCLS)
            engine.add_image("predcls", bridges, inputs.boxes, gt_triplets(record))
        report = engine.report()
        return report.entries[0].recall if report.entries else 0.0

    def split(self, records: Sequence[SceneRecord]) -> Tuple[List[SceneRecord], List[SceneRecord]]:
        """按 seed 随机划出验证集，两部分都保持原顺序"""
        fraction = self.config.train.validation_fraction
        n_val = int(round(len(records) * fraction)) if len(records) > 1 else 0
        if n_val == 0:
            return list(records), []
        order = np.random.default_rng(derive_seed(self.config.train.seed, "validation")).permutation(len(records))
        held_out = set(order[:n_val].tolist())
        train = [r for i, r in enumerate(records) if i not in held_out]
        val = [r for i, r in enumerate(records) if i in held_out]
        return train, val

    def planned_steps(self, n_train: int) -> int:
        t = self.config.train
        steps = t.epochs * math.ceil(n_train / t.batch_size) if n_train else 0
        return min(steps, t.max_steps) if t.max_steps else steps

    def fit(
        self,
        records: Sequence[SceneRecord],
        on_step: Optional[Callable[[int, float], None]] = None,
    ) -> TrainResult:
        """
        训练主循环

        Args:
            records: 训练记录（含验证部分）
            on_step: 每个优化步后的回调 (step, loss)

        Returns:
            TrainResult
        """
        t = self.config.train
        train_records, val_records = self.split(records)
        if not train_records:
            raise ConfigError("训练集为空")
        if t.balance_beta > 0.0:
            self.balance_table = ClassBalanceTable.from_records(
                train_records, self.commonsense.n_predicate_classes, t.balance_beta,
            )
        named = self.params.named_tensors()
        result = TrainResult(self.params, self.state)
        total_steps = self.planned_steps(len(train_records))
        logger.info(
            f"开始训练: 训练 {len(train_records)} 张, 验证 {len(val_records)} 张, 计划 {total_steps} 步, "
            f"任务 {self.mode.value}, lr={t.lr}, β={t.balance_beta}, 线程 {t.threads}"
        )

        step = 0
        with ThreadPoolExecutor(max_workers=t.threads) as executor:
            for epoch in range(t.epochs):
                order = np.random.default_rng(derive_seed(t.seed, f"epoch/{epoch}")).permutation(len(train_records))
                for start in range(0, len(order), t.batch_size):
                    if step >= total_steps:
                        break
                    batch = sorted((train_records[i] for i in order[start:start + t.batch_size]),
                                   key=lambda r: r.image_id)
                    outputs = list(executor.map(self.image_gradients, batch))

                    # 按 image_id 顺序归约
                    batch_loss = 0.0
                    grads: Dict[str, np.ndarray] = {}
                    for loss_value, image_grads in outputs:
                        batch_loss += loss_value
                        for name, grad in image_grads.items():
                            grads[name] = grads[name] + grad if name in grads else grad.copy()
                    scale = 1.0 / len(batch)
                    batch_loss *= scale
                    for name in grads:
                        grads[name] *= scale

                    adam_step(named, grads, self.state)
                    step += 1
                    result.loss_log.append((step, batch_loss, self.state.lr))
                    logger.debug(f"[epoch {epoch + 1}] step {step}: loss={batch_loss:.6f}")
                    if on_step is not None:
                        on_step(step, batch_loss)

                if val_records:
                    recall = self.validate(val_records)
                    result.validation.append((epoch + 1, recall))
                    logger.info(f"epoch {epoch + 1}/{t.epochs}: 验证 PredCls R@50 = {recall:.4f}")
                if step >= total_steps:
                    break

        if result.loss_log:
            logger.info(
                f"训练完成: {step} 步, 首步损失 {result.loss_log[0][1]:.4f}, 末步损失 {result.loss_log[-1][1]:.4f}"
            )
        return result


def train(
    dataset: Sequence[SceneRecord],
    commonsense: CommonsenseGraph,
    config: RunConfig,
    params: Optional[ModelParams] = None,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """训练入口：按配置初始化参数并运行 Trainer.fit"""
    if not dataset:
        raise ConfigError("数据集为空")
    trainer = Trainer(commonsense, config, params=params, feat_dim=dataset[0].feat_dim)
    return trainer.fit(dataset, on_step=on_step)
