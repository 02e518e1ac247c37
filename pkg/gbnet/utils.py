"""
工具函数模块 - 提供共享的工具函数
"""

import hashlib
import math
from typing import Callable, Dict, Hashable, List, Sequence, Tuple

import numpy as np

from .errors import MalformedBoxError

Box = Tuple[float, float, float, float]


def validate_box(box: Sequence[float]) -> bool:
    """
    验证归一化边界框格式

    Args:
        box: (x1, y1, x2, y2)

    Returns:
        是否有效
    """
    if box is None or len(box) != 4:
        return False
    x1, y1, x2, y2 = (float(v) for v in box)
    if not all(math.isfinite(v) for v in (x1, y1, x2, y2)):
        return False
    if not all(0.0 <= v <= 1.0 for v in (x1, y1, x2, y2)):
        return False
    # 必须有正面积
    return x2 > x1 and y2 > y1


def ensure_box(box: Sequence[float], index: int = -1) -> Box:
    """校验并返回元组形式的边界框，无效时抛出 MalformedBoxError"""
    if not validate_box(box):
        raise MalformedBoxError(f"边界框无效 (#{index}): {tuple(box) if box is not None else None}")
    return tuple(float(v) for v in box)  # type: ignore[return-value]


def derive_seed(global_seed: int, item_id: str) -> int:
    """
    由全局种子和条目 ID 派生子种子

    使用 blake2b 而非内置 hash()，保证跨进程稳定

    Args:
        global_seed: 全局随机种子
        item_id: 图像 ID 等字符串

    Returns:
        64 位无符号整数种子
    """
    digest = hashlib.blake2b(f"{global_seed}:{item_id}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def deduplicate_records(
    records: List[Dict],
    key_extractor: Callable[[Dict], Hashable]
) -> List[Dict]:
    """
    通用去重函数，保留首次出现的记录并维持原顺序

    Args:
        records: 原始记录列表
        key_extractor: 键提取函数，接收记录返回唯一键

    Returns:
        去重后的记录列表
    """
    seen = set()
    unique = []

    for record in records:
        key = key_extractor(record)
        if key not in seen:
            seen.add(key)
            unique.append(record)

    return unique


def parse_int_list(text: str) -> List[int]:
    """解析 "50,100" 形式的整数列表"""
    return [int(part) for part in str(text).split(",") if part.strip()]


def format_float(value: float) -> str:
    """无损浮点数文本表示"""
    return repr(float(value))


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """
    两个边界框的交并比

    零面积框按约定返回 0
    """
    ax1, ay1, ax2, ay2 = (float(v) for v in a)
    bx1, by1, bx2, by2 = (float(v) for v in b)
    area_a = max(0.0, ax2 - ax1) * max(0.0, ay2 - ay1)
    area_b = max(0.0, bx2 - bx1) * max(0.0, by2 - by1)
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


GEOMETRY_DIM = 8


def pair_geometry(subj_box: Sequence[float], obj_box: Sequence[float]) -> np.ndarray:
    """
    有序框对的 8 维几何编码

    (宾语中心相对主语中心的 dx, dy, 主语宽高, 宾语宽高, IoU, 面积对数比)
    """
    sx1, sy1, sx2, sy2 = (float(v) for v in subj_box)
    ox1, oy1, ox2, oy2 = (float(v) for v in obj_box)
    sw, sh, ow, oh = sx2 - sx1, sy2 - sy1, ox2 - ox1, oy2 - oy1
    return np.array([
        (ox1 + ox2) / 2.0 - (sx1 + sx2) / 2.0,
        (oy1 + oy2) / 2.0 - (sy1 + sy2) / 2.0,
        sw, sh, ow, oh,
        iou(subj_box, obj_box),
        math.log((ow * oh) / (sw * sh)),
    ], dtype=np.float64)


def ordered_pairs(n: int) -> List[Tuple[int, int]]:
    """SP 节点顺序：主语在外层、宾语在内层，排除自身配对"""
    return [(i, j) for i in range(n) for j in range(n) if i != j]


def union_features(features: np.ndarray, boxes: Sequence[Sequence[float]]) -> np.ndarray:
    """
    合成每个有序对的联合特征：端点特征均值 + 几何编码

    Returns:
        n(n-1) x (feat_dim + 8) 矩阵
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    width = features.shape[1] + GEOMETRY_DIM if features.ndim == 2 else GEOMETRY_DIM
    rows = [
        np.concatenate([(features[i] + features[j]) / 2.0, pair_geometry(boxes[i], boxes[j])])
        for i, j in ordered_pairs(n)
    ]
    return np.vstack(rows) if rows else np.zeros((0, width))


def pair_index(subj: int, obj: int, n: int) -> int:
    """有序对 (subj, obj) 在 ordered_pairs(n) 中的位置"""
    if subj == obj or not (0 <= subj < n and 0 <= obj < n):
        raise ValueError(f"无效的有序对: ({subj}, {obj}), n={n}")
    return subj * (n - 1) + (obj if obj < subj else obj - 1)
