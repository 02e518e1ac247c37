"""
数据持久化 - 数据集 / 玩具世界 / 检查点 / 运行产物的文件读写

文件格式:
    数据集   GBDS 1 feat_dim=<d>，每行一张图像，字段以 TAB 分隔
    玩具世界 GBWORLD 1，TSV 正文
    检查点   GBNET1 魔数 + 张量表 + CRC32（二进制，小端）
"""

import logging
import struct
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import FormatError, ParseError
from .synth_data import SPATIAL_RELATIONS, SceneRecord, ToyWorld
from .utils import format_float

logger = logging.getLogger(__name__)

DATASET_MAGIC = "GBDS 1"
WORLD_MAGIC = "GBWORLD 1"
CHECKPOINT_MAGIC = b"GBNET1"

DATASET_FIELDS = (
    "image_id", "n", "n_classes", "boxes", "gt_boxes", "features",
    "label_dists", "gt_labels", "union_features", "triplets",
)
EMPTY = "-"


# ========== 数据集 ==========

def _floats(values: Iterable[float]) -> str:
    text = ",".join(format_float(v) for v in values)
    return text or EMPTY


def _parse_floats(text: str, expected: int, name: str, line_no: int, path: str) -> np.ndarray:
    if text == EMPTY:
        values = []
    else:
        try:
            values = [float(v) for v in text.split(",")]
        except ValueError:
            raise ParseError(f"字段 {name} 含非数字", line_no=line_no, path=path) from None
    if len(values) != expected:
        raise ParseError(f"字段 {name} 期望 {expected} 个值，实际 {len(values)} 个", line_no=line_no, path=path)
    return np.array(values, dtype=np.float64)


def format_record(record: SceneRecord) -> str:
    """把一条记录编码为一行文本"""
    triplets = ";".join(f"{s}:{p}:{o}" for s, p, o in record.triplets) or EMPTY
    fields = [
        record.image_id,
        str(record.n_entities),
        str(record.label_dists.shape[1]),
        _floats(record.boxes.reshape(-1)),
        _floats(record.gt_boxes.reshape(-1)),
        _floats(record.features.reshape(-1)),
        _floats(record.label_dists.reshape(-1)),
        ",".join(str(int(v)) for v in record.gt_labels) or EMPTY,
        _floats(record.union_features.reshape(-1)),
        triplets,
    ]
    return "\t".join(fields)


def parse_record(line: str, feat_dim: int, line_no: int, path: str = "<dataset>") -> SceneRecord:
    """
    解析数据集中的一行

    Raises:
        ParseError: 字段数、数值个数或格式不符（带行号）
    """
    fields = line.rstrip("\n").split("\t")
    if len(fields) != len(DATASET_FIELDS):
        raise ParseError(f"期望 {len(DATASET_FIELDS)} 个字段，实际 {len(fields)} 个", line_no=line_no, path=path)
    image_id = fields[0]
    try:
        n, n_classes = int(fields[1]), int(fields[2])
    except ValueError:
        raise ParseError("实体数或类别数不是整数", line_no=line_no, path=path) from None
    if n < 0 or n_classes < 1:
        raise ParseError(f"实体数或类别数越界: n={n}, classes={n_classes}", line_no=line_no, path=path)
    n_pairs = n * (n - 1)

    boxes = _parse_floats(fields[3], 4 * n, "boxes", line_no, path).reshape(n, 4)
    gt_boxes = _parse_floats(fields[4], 4 * n, "gt_boxes", line_no, path).reshape(n, 4)
    features = _parse_floats(fields[5], feat_dim * n, "features", line_no, path).reshape(n, feat_dim)
    dists = _parse_floats(fields[6], n_classes * n, "label_dists", line_no, path).reshape(n, n_classes)
    try:
        labels = [] if fields[7] == EMPTY else [int(v) for v in fields[7].split(",")]
    except ValueError:
        raise ParseError("gt_labels 含非整数", line_no=line_no, path=path) from None
    if len(labels) != n:
        raise ParseError(f"gt_labels 期望 {n} 个值，实际 {len(labels)} 个", line_no=line_no, path=path)
    union_width = feat_dim + 8
    union = _parse_floats(fields[8], union_width * n_pairs, "union_features", line_no, path)

    triplets: List[Tuple[int, int, int]] = []
    if fields[9] != EMPTY:
        for item in fields[9].split(";"):
            parts = item.split(":")
            if len(parts) != 3:
                raise ParseError(f"三元组格式错误: {item!r}", line_no=line_no, path=path)
            try:
                triplets.append((int(parts[0]), int(parts[1]), int(parts[2])))
            except ValueError:
                raise ParseError(f"三元组含非整数: {item!r}", line_no=line_no, path=path) from None

    record = SceneRecord(
        image_id=image_id,
        boxes=boxes,
        gt_boxes=gt_boxes,
        features=features,
        label_dists=dists,
        gt_labels=np.array(labels, dtype=np.int64),
        union_features=union.reshape(n_pairs, union_width),
        triplets=triplets,
    )
    try:
        record.validate()
    except Exception as e:
        raise ParseError(str(e), line_no=line_no, path=path) from None
    return record


def write_dataset(records: Sequence[SceneRecord], path: str | Path, feat_dim: Optional[int] = None) -> None:
    """
    写出数据集（空数据集只有文件头）

    Args:
        records: 场景记录
        path: 输出路径
        feat_dim: 特征维度；缺省时取首条记录
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if feat_dim is None:
        feat_dim = records[0].feat_dim if records else 0
    lines = [f"{DATASET_MAGIC} feat_dim={feat_dim}"]
    for record in records:
        if record.feat_dim != feat_dim:
            raise ParseError(f"记录 {record.image_id} 的特征维度 {record.feat_dim} 与文件头 {feat_dim} 不一致")
        lines.append(format_record(record))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"数据集已保存: {path} ({len(records)} 条)")


def read_dataset(path: str | Path) -> List[SceneRecord]:
    """
    读取数据集

    Raises:
        ParseError: 文件头或记录行格式错误
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"数据集文件不存在: {path}")
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise ParseError("数据集文件为空（缺少文件头）", line_no=1, path=str(path))
    header = lines[0].split()
    if len(header) != 3 or " ".join(header[:2]) != DATASET_MAGIC or not header[2].startswith("feat_dim="):
        raise ParseError(f"数据集文件头错误: {lines[0]!r}", line_no=1, path=str(path))
    try:
        feat_dim = int(header[2].split("=", 1)[1])
    except ValueError:
        raise ParseError(f"feat_dim 不是整数: {header[2]!r}", line_no=1, path=str(path)) from None

    records = []
    seen = set()
    for line_no, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        record = parse_record(line, feat_dim, line_no, str(path))
        if record.image_id in seen:
            raise ParseError(f"图像 ID 重复: {record.image_id}", line_no=line_no, path=str(path))
        seen.add(record.image_id)
        records.append(record)
    logger.info(f"读取数据集 {path}: {len(records)} 条, feat_dim={feat_dim}")
    return records


# ========== 玩具世界 ==========

def write_world(world: ToyWorld, path: str | Path) -> None:
    """写出 GBWORLD 文件（原型、规则、词向量）"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        WORLD_MAGIC,
        f"META\tseed\t{world.seed}",
        f"META\tsigma\t{format_float(world.sigma)}",
        f"META\tzipf_s\t{format_float(world.zipf_s)}",
    ]
    for label, proto in zip(world.entity_labels, world.prototypes):
        lines.append(f"ENTITY\t{label}\t{_floats(proto)}")
    for label in world.predicate_labels:
        lines.append(f"PREDICATE\t{label}")
    for (subj, obj, relation), pred in sorted(world.rules.items()):
        lines.append(
            f"RULE\t{world.entity_labels[subj - 1]}\t{world.entity_labels[obj - 1]}\t{relation}\t"
            f"{world.predicate_labels[pred - 1]}"
        )
    for label in world.entity_labels + world.predicate_labels:
        lines.append(f"EMBED\t{label}\t{_floats(world.embeddings[label])}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"玩具世界已保存: {path}")


def read_world(path: str | Path) -> ToyWorld:
    """读取 GBWORLD 文件"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"世界文件不存在: {path}")
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != WORLD_MAGIC:
        raise FormatError(f"世界文件头错误（需要 {WORLD_MAGIC!r}）: {path}")

    meta: Dict[str, str] = {}
    entities: List[Tuple[str, np.ndarray]] = []
    predicates: List[str] = []
    raw_rules: List[Tuple[int, List[str]]] = []
    embeddings: Dict[str, np.ndarray] = {}
    for line_no, line in enumerate(lines[1:], 2):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        tag = parts[0]
        try:
            if tag == "META" and len(parts) == 3:
                meta[parts[1]] = parts[2]
            elif tag == "ENTITY" and len(parts) == 3:
                entities.append((parts[1], np.array([float(v) for v in parts[2].split(",")])))
            elif tag == "PREDICATE" and len(parts) == 2:
                predicates.append(parts[1])
            elif tag == "RULE" and len(parts) == 5:
                raw_rules.append((line_no, parts[1:]))
            elif tag == "EMBED" and len(parts) == 3:
                embeddings[parts[1]] = np.array([float(v) for v in parts[2].split(",")])
            else:
                raise ParseError(f"无法识别的行: {line!r}", line_no=line_no, path=str(path))
        except ValueError:
            raise ParseError("数值格式错误", line_no=line_no, path=str(path)) from None

    entity_index = {label: i + 1 for i, (label, _) in enumerate(entities)}
    predicate_index = {label: i + 1 for i, label in enumerate(predicates)}
    rules = {}
    for line_no, (subj, obj, relation, pred) in raw_rules:
        if subj not in entity_index or obj not in entity_index or pred not in predicate_index:
            raise ParseError("规则引用了未声明的类别", line_no=line_no, path=str(path))
        if relation not in SPATIAL_RELATIONS:
            raise ParseError(f"未知空间关系: {relation}", line_no=line_no, path=str(path))
        rules[(entity_index[subj], entity_index[obj], relation)] = predicate_index[pred]

    try:
        world = ToyWorld(
            seed=int(meta["seed"]),
            entity_labels=[label for label, _ in entities],
            predicate_labels=predicates,
            prototypes=np.vstack([proto for _, proto in entities]),
            rules=rules,
            embeddings=embeddings,
            sigma=float(meta["sigma"]),
            zipf_s=float(meta.get("zipf_s", "1.0")),
        )
    except (KeyError, ValueError) as e:
        raise ParseError(f"世界文件缺少必要字段: {e}", path=str(path)) from None
    logger.info(f"读取玩具世界 {path}: {world.n_entity_classes} 实体类, {world.n_predicate_classes} 谓词类")
    return world


# ========== 检查点 ==========

def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    """
    编码命名张量表

    布局: GBNET1 | u32 数量 | (u16 名长, 名, u8 秩, u32 维度..., f32 数据)... | u32 CRC32(载荷)
    """
    payload = bytearray(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        array = np.asarray(value, dtype=np.float64)
        encoded = name.encode("utf-8")
        payload += struct.pack("<H", len(encoded)) + encoded
        payload += struct.pack("<B", array.ndim)
        payload += struct.pack(f"<{array.ndim}I", *array.shape)
        payload += np.ascontiguousarray(array, dtype="<f4").tobytes(order="C")
    return CHECKPOINT_MAGIC + bytes(payload) + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def decode_tensors(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    """
    解码命名张量表

    Raises:
        FormatError: 魔数错误、截断或 CRC 不符
    """
    if len(blob) < len(CHECKPOINT_MAGIC) + 8 or blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError("检查点魔数错误或文件过短")
    payload, (crc,) = blob[len(CHECKPOINT_MAGIC):-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise FormatError("检查点 CRC 校验失败（文件损坏或被截断）")

    offset = 0

    def take(size: int) -> bytes:
        nonlocal offset
        if offset + size > len(payload):
            raise FormatError("检查点被截断")
        chunk = payload[offset:offset + size]
        offset += size
        return chunk

    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    (count,) = struct.unpack("<I", take(4))
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("检查点张量名不是 UTF-8") from None
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float64)
        tensors[name] = data.reshape(shape)
    if offset != len(payload):
        raise FormatError(f"检查点尾部有 {len(payload) - offset} 字节多余数据")
    return tensors


def save_tensors(tensors: Mapping[str, np.ndarray], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensors(tensors))
    logger.info(f"检查点已保存: {path} ({len(tensors)} 个张量)")


def load_tensors(path: str | Path) -> "OrderedDict[str, np.ndarray]":
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"检查点文件不存在: {path}")
    tensors = decode_tensors(path.read_bytes())
    logger.info(f"读取检查点 {path}: {len(tensors)} 个张量")
    return tensors


# ========== 运行产物 ==========

class DataStore:
    """一次运行的输出目录管理器"""

    def __init__(self, out_dir: str | Path = "output"):
        """
        初始化输出目录

        Args:
            out_dir: 输出根目录
        """
        self.out_dir = Path(out_dir)

    def ensure(self) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        return self.out_dir

    def path(self, name: str) -> Path:
        return self.ensure() / name

    def write_text(self, name: str, text: str) -> Path:
        target = self.path(name)
        target.write_text(text, encoding="utf-8")
        logger.debug(f"写出 {target}")
        return target

    def write_loss_log(self, rows: Sequence[Tuple[int, float, float]], name: str = "loss_log.tsv") -> Path:
        """写出损失日志 TSV: step, loss, lr"""
        lines = ["step\tloss\tlr"] + [f"{step}\t{format_float(loss)}\t{format_float(lr)}" for step, loss, lr in rows]
        return self.write_text(name, "\n".join(lines) + "\n")

    def write_lines(self, name: str, lines: Sequence[str]) -> Path:
        return self.write_text(name, "".join(f"{line}\n" for line in lines))
