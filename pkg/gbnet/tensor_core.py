"""
最小稠密数值核心 - 秩 ≤ 2 的张量与反向模式自动求导

向量统一存为列向量 (rows, 1)。训练时所有运算记录在当前线程的 Tape 上，
backprop() 逆序回放一次后清空磁带。
"""

import logging
import threading
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import NonFiniteError, ShapeError, TapeStateError

logger = logging.getLogger(__name__)

DTYPE = np.float64

_state = threading.local()


def _tape_stack() -> List["Tape"]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = []
        _state.stack = stack
    return stack


def current_tape() -> Optional["Tape"]:
    """当前线程的活动磁带"""
    stack = _tape_stack()
    return stack[-1] if stack else None


def _check_finite(array: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"运算 {op} 产生了非有限值")


class Tensor:
    """
    稠密张量

    Attributes:
        data: (rows, cols) float64 数组
        grad: 累积梯度（与 data 同形状），参数在优化步之间显式清零
        requires_grad: 是否为可求导叶子或依赖可求导叶子
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_leaf")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, _leaf: bool = True):
        array = np.array(data, dtype=DTYPE)
        if array.ndim == 0:
            array = array.reshape(1, 1)
        elif array.ndim == 1:
            array = array.reshape(-1, 1)
        elif array.ndim > 2:
            raise ShapeError(f"张量秩必须 ≤ 2: shape={array.shape}")
        _check_finite(array, name or "tensor")
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._leaf = _leaf

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() 需要标量张量: shape={self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} requires_grad={self.requires_grad}>"

    def __add__(self, other): return add(self, as_tensor(other))
    def __radd__(self, other): return add(as_tensor(other), self)
    def __sub__(self, other): return sub(self, as_tensor(other))
    def __rsub__(self, other): return sub(as_tensor(other), self)
    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, as_tensor(other))
    def __rmul__(self, other): return self.__mul__(other)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, as_tensor(other))


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(value) -> Tensor:
    """不参与求导的常量张量"""
    return Tensor(value)


def parameter(value, name: Optional[str] = None) -> Tensor:
    """可训练参数（求导叶子）"""
    return Tensor(value, requires_grad=True, name=name)


@dataclass
class _Record:
    op: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tape:
    """
    单步训练的求导磁带：只追加，回放一次

    用法:
        with Tape() as tape:
            loss = ...
        backprop(loss, tape=tape)
    """

    def __init__(self):
        self.records: List[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, output: Tensor, inputs: Tuple[Tensor, ...], backward) -> None:
        self.records.append(_Record(op, output, inputs, backward))

    def clear(self) -> None:
        self.records.clear()


def _emit(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...], backward) -> Tensor:
    """构造运算输出；有活动磁带且输入需要梯度时记录反向函数"""
    _check_finite(data, op)
    tape = current_tape()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = tracked
    out.name = None
    out._leaf = False
    if tracked:
        tape.record(op, out, inputs, backward)
    return out


# ========== 基本运算 ==========

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """矩阵乘 a @ b"""
    if a.cols != b.rows:
        raise ShapeError(f"matmul 维度不匹配: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return _emit("matmul", A @ B, (a, b), backward)


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """a @ b.T，批量线性层使用"""
    if a.cols != b.cols:
        raise ShapeError(f"matmul_nt 维度不匹配: {a.shape} @ {b.shape}.T")
    A, B = a.data, b.data

    def backward(g):
        return g @ B, g.T @ A

    return _emit("matmul_nt", A @ B.T, (a, b), backward)


def matvec(w: Tensor, x: Tensor) -> Tensor:
    """矩阵乘列向量 W·x"""
    if x.cols != 1:
        raise ShapeError(f"matvec 需要列向量: x.shape={x.shape}")
    return matmul(w, x)


def transpose(a: Tensor) -> Tensor:
    def backward(g):
        return (g.T,)

    return _emit("transpose", a.data.T.copy(), (a,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """
    逐元素加法；b 可以是 (1, cols) 行向量，此时加到 a 的每一行
    """
    if a.shape == b.shape:
        def backward(g):
            return g, g
    elif b.rows == 1 and b.cols == a.cols:
        def backward(g):
            return g, g.sum(axis=0, keepdims=True)
    else:
        raise ShapeError(f"add 形状不匹配: {a.shape} + {b.shape}")
    return _emit("add", a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub 形状不匹配: {a.shape} - {b.shape}")

    def backward(g):
        return g, -g

    return _emit("sub", a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """逐元素乘法"""
    if a.shape != b.shape:
        raise ShapeError(f"mul 形状不匹配: {a.shape} * {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g * B, g * A

    return _emit("mul", A * B, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    def backward(g):
        return (g * factor,)

    return _emit("scale", a.data * factor, (a,), backward)


def relu(a: Tensor) -> Tensor:
    active = a.data > 0

    def backward(g):
        return (g * active,)

    return _emit("relu", np.where(active, a.data, 0.0), (a,), backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - y * y),)

    return _emit("tanh", y, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # 分段计算避免 exp 溢出
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * y * (1.0 - y),)

    return _emit("sigmoid", y, (a,), backward)


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise NonFiniteError("log 的输入必须为正")

    def backward(g):
        return (g / x,)

    return _emit("log", np.log(x), (a,), backward)


def row_softmax(a: Tensor) -> Tensor:
    """逐行 softmax（先减行最大值）"""
    if a.cols == 0:
        raise ShapeError("softmax 的输入不能为空")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _emit("row_softmax", y, (a,), backward)


def row_softmax_stable(logits: Tensor) -> Tensor:
    """
    对一个向量做数值稳定的 softmax

    Args:
        logits: 列向量 (n, 1) 或行向量 (1, n)

    Returns:
        与输入同形状的概率向量
    """
    if logits.data.size == 0:
        raise ShapeError("softmax 的输入不能为空")
    if logits.cols == 1 and logits.rows > 1:
        return transpose(row_softmax(transpose(logits)))
    return row_softmax(logits)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """沿列 (axis=1) 或行 (axis=0) 拼接"""
    if not tensors:
        raise ShapeError("concat 需要至少一个张量")
    other = 1 - axis
    base = tensors[0].shape[other]
    for t in tensors:
        if t.shape[other] != base:
            raise ShapeError(f"concat 形状不匹配: {[x.shape for x in tensors]}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _emit("concat", data, tuple(tensors), backward)


def sum(a: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    """求和：axis=None 得到 1x1 标量，axis=1 按行求和，axis=0 按列求和"""
    shape = a.shape
    if axis is None:
        data = np.array([[a.data.sum()]])

        def backward(g):
            return (np.full(shape, g[0, 0]),)
    elif axis in (0, 1):
        data = a.data.sum(axis=axis, keepdims=True)

        def backward(g):
            return (np.broadcast_to(g, shape).copy(),)
    else:
        raise ShapeError(f"sum 的 axis 只能是 None/0/1: {axis}")
    return _emit("sum", data, (a,), backward)


# ========== 反向传播 ==========

def backprop(loss: Tensor, tape: Optional[Tape] = None, accumulate: bool = True) -> Dict[Tensor, np.ndarray]:
    """
    逆序回放磁带，计算损失对每个被追踪参数的梯度

    Args:
        loss: 活动磁带上产生的 1x1 标量
        tape: 显式指定磁带；缺省为当前线程的活动磁带
        accumulate: True 时把梯度累加进参数的 grad 槽；False 时仅返回梯度映射

    Returns:
        {参数张量: 梯度数组}

    Raises:
        TapeStateError: 没有磁带或损失不在磁带上
    """
    tape = tape if tape is not None else current_tape()
    if tape is None:
        raise TapeStateError("backprop 需要活动的求导磁带")
    if loss.data.size != 1:
        raise ShapeError(f"backprop 需要标量损失: shape={loss.shape}")
    if not loss.requires_grad or not tape.records:
        raise TapeStateError("损失不是在活动磁带上计算得到的")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}

    for record in reversed(tape.records):
        g = grads.pop(id(record.output), None)
        if g is None:
            continue
        input_grads = record.backward(g)
        for tensor, tensor_grad in zip(record.inputs, input_grads):
            if tensor_grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + tensor_grad
            else:
                grads[key] = np.array(tensor_grad, dtype=DTYPE)
            if tensor._leaf:
                leaves[key] = tensor

    result: Dict[Tensor, np.ndarray] = {}
    for key, tensor in leaves.items():
        grad = grads.get(key)
        if grad is None:
            continue
        _check_finite(grad, f"grad({tensor.name})")
        result[tensor] = grad
        if accumulate:
            tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad

    tape.clear()
    return result


def gradient_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
) -> float:
    """
    中心差分梯度校验

    Args:
        loss_fn: 无参函数，返回标量损失（内部可调用任意已记录运算）
        params: 需要校验的参数
        h: 差分步长

    Returns:
        最大相对误差 |a - fd| / max(|a|, |fd|, 1e-6)
    """
    params = list(params)
    with Tape() as tape:
        loss = loss_fn()
    analytic = backprop(loss, tape=tape, accumulate=False)

    worst = 0.0
    for param in params:
        grad = analytic.get(param, np.zeros_like(param.data))
        flat = param.data.reshape(-1)
        grad_flat = grad.reshape(-1)
        for index in range(flat.size):
            original = flat[index]
            flat[index] = original + h
            plus = loss_fn().item()
            flat[index] = original - h
            minus = loss_fn().item()
            flat[index] = original
            fd = (plus - minus) / (2.0 * h)
            a = grad_flat[index]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
            worst = max(worst, rel)
    return worst


# ========== 网络头 ==========

@dataclass
class LinearHead:
    """线性投影 y = W x + b（φ_init）"""
    W: Tensor
    b: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul_nt(x, self.W), self.b)

    def parameters(self) -> List[Tensor]:
        return [self.W, self.b]


@dataclass
class MLPHead:
    """单隐层 ReLU 全连接网络（φ_send / φ_receive / φ_att）"""
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    @property
    def in_dim(self) -> int:
        return self.W1.cols

    @property
    def out_dim(self) -> int:
        return self.W2.rows

    def __call__(self, x: Tensor) -> Tensor:
        """批量计算，x 的每一行是一个输入"""
        if x.cols != self.in_dim:
            raise ShapeError(f"MLP 输入宽度 {x.cols} 与 W1 {self.W1.shape} 不匹配")
        hidden = relu(add(matmul_nt(x, self.W1), self.b1))
        return add(matmul_nt(hidden, self.W2), self.b2)

    def parameters(self) -> List[Tensor]:
        return [self.W1, self.b1, self.W2, self.b2]


def evaluate_mlp_head(head: MLPHead, x: Tensor) -> Tensor:
    """
    计算 W2·relu(W1·x + b1) + b2

    Args:
        head: MLP 头（b1/b2 为行向量）
        x: 列向量 (in, 1)，或按行堆叠的批量 (n, in)

    Returns:
        列向量 (out, 1) 或批量 (n, out)
    """
    if head.W2.cols != head.W1.rows or head.b1.shape != (1, head.W1.rows) or head.b2.shape != (1, head.W2.rows):
        raise ShapeError(
            f"MLP 参数形状不兼容: W1={head.W1.shape}, b1={head.b1.shape}, "
            f"W2={head.W2.shape}, b2={head.b2.shape}"
        )
    if x.cols == 1 and x.rows == head.in_dim:
        return transpose(head(transpose(x)))
    return head(x)
