"""
GB-Net 场景图生成

把场景图生成视为场景图（SE/SP）与常识图（CE/CP）之间桥接边的推断：
多轮异构消息传递交替更新节点状态与桥接权重，在合成数据上端到端训练，
并按 SGGen / SGCls / PredCls 协议评测 R@K 与 mR@K。
"""

__version__ = "0.1.0"
