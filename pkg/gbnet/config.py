"""
运行配置 - 配置文件（TOML 的 key = value 子集）+ 命令行覆盖

优先级: 命令行参数 > 配置文件 > 环境变量 (GBNET_SEED) > 默认值
"""

import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

from .errors import ConfigError

logger = logging.getLogger(__name__)

TASKS = ("sggen", "sgcls", "predcls")


def default_seed() -> int:
    """GBNET_SEED 环境变量给出默认种子"""
    raw = os.getenv("GBNET_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"GBNET_SEED 不是整数: {raw!r}") from None


@dataclass
class PathsConfig:
    dataset: Optional[str] = None
    test_dataset: Optional[str] = None
    commonsense: Optional[str] = None
    checkpoint: Optional[str] = None
    world: Optional[str] = None
    out_dir: str = "output"


@dataclass
class ModelConfig:
    """模型维度：d、隐层宽度（0 表示 2d）、消息传递步数 T、K_bridge"""
    dim: int = 32
    hidden: int = 0
    steps: int = 3
    k_bridge: int = 5
    use_knowledge: bool = True
    init_scale: float = 0.1

    @property
    def hidden_dim(self) -> int:
        return self.hidden or 2 * self.dim


@dataclass
class TrainConfig:
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 8
    max_steps: int = 2000
    seed: int = field(default_factory=default_seed)
    balance_beta: float = 0.0
    task: str = "sgcls"
    iou_threshold: float = 0.5
    validation_fraction: float = 0.1
    threads: int = 1


@dataclass
class EvalConfig:
    ks: List[int] = field(default_factory=lambda: [20, 50, 100])
    constrained: str = "both"
    task: str = "all"

    def constraint_modes(self) -> List[bool]:
        return {"both": [True, False], "true": [True], "false": [False]}[self.constrained]

    def tasks(self) -> List[str]:
        return list(TASKS) if self.task == "all" else [self.task]


SECTIONS = {"paths": PathsConfig, "model": ModelConfig, "train": TrainConfig, "eval": EvalConfig}


@dataclass
class RunConfig:
    """一次运行的完整配置"""
    paths: PathsConfig = field(default_factory=PathsConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    # ---------- 加载 / 覆盖 ----------

    @classmethod
    def load(cls, path: Optional[str | Path] = None) -> "RunConfig":
        """
        从配置文件加载

        Args:
            path: 配置文件路径；None 时返回默认配置

        Raises:
            ConfigError: 语法错误或未知键
        """
        config = cls()
        if path is None:
            return config
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"配置文件不存在: {path}")
        try:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"配置文件语法错误 {path}: {e}") from None

        overrides: Dict[str, Any] = {}
        for section, values in data.items():
            if not isinstance(values, dict):
                raise ConfigError(f"配置键必须属于某个段 (paths/model/train/eval): {section}")
            for key, value in values.items():
                overrides[f"{section}.{key}"] = value
        config.apply_overrides(overrides)
        logger.info(f"已加载配置文件: {path}")
        return config

    def apply_overrides(self, overrides: Dict[str, Any]) -> None:
        """按 "section.key" 覆盖配置项，None 值忽略"""
        for dotted, value in overrides.items():
            if value is None:
                continue
            section, _, key = dotted.partition(".")
            if section not in SECTIONS:
                raise ConfigError(f"未知配置段: {section}")
            target = getattr(self, section)
            names = {f.name: f for f in fields(target)}
            if key not in names:
                raise ConfigError(f"未知配置项: {dotted}")
            setattr(target, key, _coerce(dotted, getattr(target, key), value))

    # ---------- 校验 ----------

    def validate(self, required_paths: Optional[List[str]] = None) -> None:
        """
        校验取值范围和输入路径

        Args:
            required_paths: 本次命令必须存在的 paths 字段名
        """
        m, t, e = self.model, self.train, self.eval
        if m.steps < 0:
            raise ConfigError(f"model.steps (T) 必须 ≥ 0: {m.steps}")
        if m.k_bridge < 1:
            raise ConfigError(f"model.k_bridge 必须 ≥ 1: {m.k_bridge}")
        if m.dim < 1 or m.hidden < 0:
            raise ConfigError(f"模型维度无效: dim={m.dim}, hidden={m.hidden}")
        if not (0.0 <= t.balance_beta < 1.0):
            raise ConfigError(f"train.balance_beta 必须在 [0, 1) 内: {t.balance_beta}")
        if t.lr < 0:
            raise ConfigError(f"train.lr 不能为负: {t.lr}")
        if not (0.0 <= t.beta1 < 1.0 and 0.0 <= t.beta2 < 1.0) or t.eps <= 0:
            raise ConfigError(f"Adam 参数无效: beta1={t.beta1}, beta2={t.beta2}, eps={t.eps}")
        if t.epochs < 1 or t.batch_size < 1 or t.max_steps < 0:
            raise ConfigError(f"训练轮次参数无效: epochs={t.epochs}, batch={t.batch_size}, max_steps={t.max_steps}")
        if t.threads < 1:
            raise ConfigError(f"线程数必须 ≥ 1: {t.threads}")
        if t.task not in TASKS:
            raise ConfigError(f"train.task 必须是 {'/'.join(TASKS)}: {t.task}")
        if not (0.0 <= t.validation_fraction < 1.0):
            raise ConfigError(f"train.validation_fraction 必须在 [0, 1) 内: {t.validation_fraction}")
        if not (0.0 < t.iou_threshold <= 1.0):
            raise ConfigError(f"train.iou_threshold 必须在 (0, 1] 内: {t.iou_threshold}")
        if not e.ks or any(k <= 0 for k in e.ks):
            raise ConfigError(f"eval.ks 必须是正整数列表: {e.ks}")
        if e.constrained not in ("both", "true", "false"):
            raise ConfigError(f"eval.constrained 必须是 both/true/false: {e.constrained}")
        if e.task != "all" and e.task not in TASKS:
            raise ConfigError(f"eval.task 必须是 all/{'/'.join(TASKS)}: {e.task}")

        for name in required_paths or []:
            value = getattr(self.paths, name)
            if not value:
                raise ConfigError(f"缺少路径配置: paths.{name}")
            if not Path(value).exists():
                raise ConfigError(f"路径不存在: paths.{name} = {value}")

    # ---------- 输出 ----------

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def to_toml(self) -> str:
        """序列化为可被 load() 读回的配置文本"""
        lines = []
        for section, values in self.to_dict().items():
            lines.append(f"[{section}]")
            for key, value in values.items():
                if value is None:
                    continue
                lines.append(f"{key} = {_toml_value(value)}")
            lines.append("")
        return "\n".join(lines)


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, list):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    escaped = str(value).replace("\\", "\\\\").replace('"', '\\"')
    return f'"{escaped}"'


def _coerce(name: str, current: Any, value: Any) -> Any:
    """把覆盖值转换为与当前值一致的类型"""
    try:
        if isinstance(current, bool):
            if isinstance(value, str):
                lowered = value.strip().lower()
                if lowered not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return lowered in ("true", "1", "yes")
            return bool(value)
        if isinstance(current, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, list):
            if isinstance(value, str):
                return [int(part) for part in value.split(",") if part.strip()]
            return [int(v) for v in value]
        if isinstance(value, bool):
            return "true" if value else "false"
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"配置项 {name} 的值无效: {value!r}") from None
