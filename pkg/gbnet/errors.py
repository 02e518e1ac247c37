"""
异常定义 - 所有模块共享的错误类型

每个异常携带 exit_code，CLI 边界据此返回退出码：
    2 = 用法/解析错误, 3 = 数据/形状错误, 4 = 数值错误
"""

from typing import Optional


class GBNetError(Exception):
    """GB-Net 错误基类"""

    exit_code = 1


# ========== 退出码 2：用法 / 解析 ==========

class ParseError(GBNetError):
    """文本文件解析失败（带行号）"""

    exit_code = 2

    def __init__(self, message: str, line_no: Optional[int] = None, path: Optional[str] = None):
        self.line_no = line_no
        self.path = path
        location = ""
        if path is not None:
            location += f"{path}"
        if line_no is not None:
            location += f":{line_no}" if location else f"第 {line_no} 行"
        super().__init__(f"{location}: {message}" if location else message)


class VocabularyError(ParseError):
    """关系名不在声明的词表中"""


class MissingEmbeddingError(GBNetError):
    """标签缺少词向量"""

    exit_code = 2

    def __init__(self, label: str):
        self.label = label
        super().__init__(f"标签缺少词向量: {label}")


class ConfigError(GBNetError):
    """配置无效"""

    exit_code = 2


class ParameterError(GBNetError):
    """函数参数越界"""

    exit_code = 2


# ========== 退出码 3：数据 / 形状 ==========

class ShapeError(GBNetError):
    """张量形状不匹配"""

    exit_code = 3


class MalformedBoxError(GBNetError):
    """边界框不在 [0,1] 内或退化"""

    exit_code = 3


class UniquenessError(GBNetError):
    """标签 / 边重复"""

    exit_code = 3


class SignatureError(GBNetError):
    """边端点类型与边类型签名不符"""

    exit_code = 3


class InputError(GBNetError):
    """模型输入缺失或不一致"""

    exit_code = 3


class ModeError(GBNetError):
    """推理模式所需的数据缺失"""

    exit_code = 3


class UndefinedClassError(GBNetError):
    """类别频次为 0，类别平衡权重无定义"""

    exit_code = 3


class FormatError(GBNetError):
    """二进制文件格式损坏（魔数 / 截断 / CRC）"""

    exit_code = 3


class TapeStateError(GBNetError):
    """没有活动的求导磁带"""

    exit_code = 3


# ========== 退出码 4：数值 ==========

class NonFiniteError(GBNetError):
    """出现 NaN / Inf"""

    exit_code = 4

    def __init__(self, message: str, image_id: Optional[str] = None):
        self.image_id = image_id
        if image_id is not None:
            message = f"{message} (图像: {image_id})"
        super().__init__(message)
