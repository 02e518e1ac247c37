#!/usr/bin/env python3
"""
GB-Net 场景图生成 CLI 入口

用法:
    python gbnet_cli.py synth --out-dir output/toy
    python gbnet_cli.py train --dataset output/toy/train.gbds --commonsense output/toy/commonsense.gbkg
    python gbnet_cli.py eval --checkpoint output/toy/checkpoint.gbnet --task predcls
"""

import sys
from pathlib import Path

# 添加项目根目录到路径
sys.path.insert(0, str(Path(__file__).parent))

from gbnet.cli import main


if __name__ == '__main__':
    sys.exit(main())
