"""
GB-Net 命令行入口

用法:
    gbnet synth --out-dir output/toy
    gbnet train --dataset output/toy/train.gbds --commonsense output/toy/commonsense.gbkg
    gbnet eval --checkpoint output/toy/checkpoint.gbnet --task predcls --k 50,100
"""

import argparse
import asyncio
import logging
import sys
from typing import Any, Dict, List, Optional

from .config import TASKS, RunConfig
from .errors import GBNetError
from .orchestrator import Orchestrator
from .utils import parse_int_list

logger = logging.getLogger(__name__)

EPILOG = """
示例:
  # 生成玩具数据（世界、训练/测试集、常识源文件与常识图）
  gbnet synth --out-dir output/toy --n-train 500 --n-test 100

  # 从 TSV 源文件编译常识图
  gbnet compile --entities entities.txt --predicates predicates.txt \\
      --ontology ontology.tsv --triplets triplet_counts.tsv --embeddings embeddings.tsv

  # 训练（配置文件 + 命令行覆盖，命令行优先）
  gbnet train --config run.toml --dataset output/toy/train.gbds \\
      --commonsense output/toy/commonsense.gbkg --max-steps 2000

  # 评测
  gbnet eval --test-dataset output/toy/test.gbds --commonsense output/toy/commonsense.gbkg \\
      --checkpoint output/toy/checkpoint.gbnet --task predcls --k 50,100 --constrained both --html

  # 推理并导出 DOT 场景图
  gbnet infer --checkpoint output/toy/checkpoint.gbnet --dot

  # 消融：T ∈ {1,2,3} 与无常识变体
  gbnet ablate --dataset output/toy/train.gbds --test-dataset output/toy/test.gbds \\
      --commonsense output/toy/commonsense.gbkg

  # 调试模式
  gbnet train --debug ...
"""


def _common_parser() -> argparse.ArgumentParser:
    """各子命令共享的全局参数"""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='配置文件路径（TOML）')
    common.add_argument('--out-dir', help='输出目录（默认: output）')
    common.add_argument('--seed', type=int, help='随机种子（默认取 GBNET_SEED 或 0）')
    common.add_argument('--threads', type=int, help='工作线程数（默认: 1，1 为可复现基准）')
    common.add_argument('--verbose', action='store_true', help='详细日志输出')
    common.add_argument('--debug', action='store_true', help='调试模式（超详细日志）')
    return common


def _add_input_paths(parser: argparse.ArgumentParser, dataset: bool = False, test_dataset: bool = False):
    if dataset:
        parser.add_argument('--dataset', help='训练集文件 (GBDS)')
    if test_dataset:
        parser.add_argument('--test-dataset', help='测试集文件 (GBDS)，缺省时使用 --dataset')
    parser.add_argument('--commonsense', help='常识图文件 (GBKG)')


def _add_model_args(parser: argparse.ArgumentParser):
    parser.add_argument('--dim', type=int, help='节点状态维度 d')
    parser.add_argument('--hidden', type=int, help='MLP 隐层宽度（0 表示 2d）')
    parser.add_argument('--steps', type=int, help='消息传递步数 T')
    parser.add_argument('--k-bridge', type=int, help='每行保留的桥接边数 K_bridge')
    parser.add_argument('--no-knowledge', action='store_true', help='去掉常识图（消融）')


def _add_train_args(parser: argparse.ArgumentParser):
    parser.add_argument('--lr', type=float, help='学习率')
    parser.add_argument('--epochs', type=int, help='训练轮数')
    parser.add_argument('--batch-size', type=int, help='批大小')
    parser.add_argument('--max-steps', type=int, help='最大优化步数（0 表示不限）')
    parser.add_argument('--beta', type=float, help='类别平衡 β，0 表示普通交叉熵')
    parser.add_argument('--train-task', choices=TASKS, help='训练时的推理模式（默认: sgcls）')
    parser.add_argument('--validation-fraction', type=float, help='验证集比例')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='gbnet',
        description='GB-Net 场景图生成：场景图与常识图之间的桥接推断',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=EPILOG,
    )
    common = _common_parser()
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('compile', parents=[common], help='编译常识图')
    p.add_argument('--entities', required=True, help='实体标签表')
    p.add_argument('--predicates', required=True, help='谓词标签表')
    p.add_argument('--ontology', help='本体边 TSV（可选）')
    p.add_argument('--triplets', required=True, help='三元组计数 TSV')
    p.add_argument('--embeddings', required=True, help='词向量 TSV')
    p.add_argument('--output', help='输出文件（默认: <out-dir>/commonsense.gbkg）')

    p = sub.add_parser('synth', parents=[common], help='生成玩具世界和数据集')
    p.add_argument('--n-train', type=int, default=500, help='训练场景数（默认: 500）')
    p.add_argument('--n-test', type=int, default=100, help='测试场景数（默认: 100）')
    p.add_argument('--entity-classes', type=int, default=8, help='实体类别数（默认: 8）')
    p.add_argument('--predicate-classes', type=int, default=6, help='谓词类别数（默认: 6）')
    p.add_argument('--feat-dim', type=int, default=16, help='视觉特征维度（默认: 16）')
    p.add_argument('--sigma', type=float, default=0.1, help='特征噪声标准差（默认: 0.1）')
    p.add_argument('--zipf', type=float, default=1.0, help='谓词频率 Zipf 指数（默认: 1.0）')
    p.add_argument('--min-entities', type=int, default=3, help='每个场景最少实体数（默认: 3）')
    p.add_argument('--max-entities', type=int, default=5, help='每个场景最多实体数（默认: 5）')

    p = sub.add_parser('train', parents=[common], help='训练模型')
    _add_input_paths(p, dataset=True)
    p.add_argument('--checkpoint', help='续训的检查点（配合 --resume）')
    p.add_argument('--resume', action='store_true', help='从 --checkpoint 继续训练')
    _add_model_args(p)
    _add_train_args(p)

    p = sub.add_parser('eval', parents=[common], help='评测检查点')
    _add_input_paths(p, dataset=True, test_dataset=True)
    p.add_argument('--checkpoint', help='检查点文件')
    _add_model_args(p)
    p.add_argument('--task', choices=('all',) + TASKS, help='评测任务（默认: all）')
    p.add_argument('--k', help='K 列表，逗号分隔（默认: 20,50,100）')
    p.add_argument('--constrained', choices=('both', 'true', 'false'), help='图约束（默认: both）')
    p.add_argument('--html', action='store_true', help='同时生成 HTML 报告')

    p = sub.add_parser('infer', parents=[common], help='推理并导出场景图')
    _add_input_paths(p, dataset=True, test_dataset=True)
    p.add_argument('--checkpoint', help='检查点文件')
    _add_model_args(p)
    p.add_argument('--task', choices=TASKS, default='sggen', help='推理模式（默认: sggen）')
    p.add_argument('--k', help='每张图像导出的三元组数上限（取列表最大值）')
    p.add_argument('--dot', action='store_true', help='为每张图像写出 DOT 场景图')
    p.add_argument('--show', type=int, default=3, help='终端展示的图像数（默认: 3）')

    p = sub.add_parser('ablate', parents=[common], help='消融实验：消息传递步数与无常识变体')
    _add_input_paths(p, dataset=True, test_dataset=True)
    _add_model_args(p)
    _add_train_args(p)
    p.add_argument('--depths', default='1,2,3', help='扫描的 T 列表（默认: 1,2,3）')
    p.add_argument('--k', help='K 列表，逗号分隔（默认: 20,50,100）')
    return parser


def collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """把命令行参数映射为 "section.key" 覆盖项（未给出的为 None，不覆盖）"""
    get = lambda name: getattr(args, name, None)  # noqa: E731
    overrides: Dict[str, Any] = {
        'paths.out_dir': get('out_dir'),
        'paths.dataset': get('dataset'),
        'paths.test_dataset': get('test_dataset'),
        'paths.commonsense': get('commonsense'),
        'paths.checkpoint': get('checkpoint'),
        'train.seed': get('seed'),
        'train.threads': get('threads'),
        'model.dim': get('dim'),
        'model.hidden': get('hidden'),
        'model.steps': get('steps'),
        'model.k_bridge': get('k_bridge'),
        'model.use_knowledge': False if get('no_knowledge') else None,
        'train.lr': get('lr'),
        'train.epochs': get('epochs'),
        'train.batch_size': get('batch_size'),
        'train.max_steps': get('max_steps'),
        'train.balance_beta': get('beta'),
        'train.task': get('train_task'),
        'train.validation_fraction': get('validation_fraction'),
        'eval.constrained': get('constrained'),
    }
    if args.command == 'eval':
        overrides['eval.task'] = get('task')
    if get('k'):
        overrides['eval.ks'] = parse_int_list(args.k)
    return overrides


def setup_logging(args: argparse.Namespace):
    log_level = logging.DEBUG if args.debug else (logging.INFO if args.verbose else logging.WARNING)
    logging.basicConfig(
        level=log_level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[logging.StreamHandler(sys.stdout)],
        force=True,
    )


async def run_command(args: argparse.Namespace, orchestrator: Orchestrator):
    """分派子命令"""
    if args.command == 'compile':
        await orchestrator.run_compile(
            entities=args.entities,
            predicates=args.predicates,
            triplet_counts=args.triplets,
            embeddings=args.embeddings,
            ontology=args.ontology,
            output=args.output,
        )
    elif args.command == 'synth':
        await orchestrator.run_synth(
            n_train=args.n_train,
            n_test=args.n_test,
            n_entity_classes=args.entity_classes,
            n_predicate_classes=args.predicate_classes,
            feat_dim=args.feat_dim,
            sigma=args.sigma,
            zipf_s=args.zipf,
            min_entities=args.min_entities,
            max_entities=args.max_entities,
        )
    elif args.command == 'train':
        await orchestrator.run_train(resume=args.resume)
    elif args.command == 'eval':
        await orchestrator.run_eval(html=args.html)
    elif args.command == 'infer':
        await orchestrator.run_infer(task=args.task, dot=args.dot, show=args.show)
    elif args.command == 'ablate':
        await orchestrator.run_ablate(steps=parse_int_list(args.depths))


async def async_main(argv: Optional[List[str]] = None) -> int:
    """主函数，返回进程退出码"""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args)

    orchestrator: Optional[Orchestrator] = None
    try:
        config = RunConfig.load(args.config)
        config.apply_overrides(collect_overrides(args))
        config.validate()

        orchestrator = Orchestrator(config)
        await orchestrator.initialize()
        await run_command(args, orchestrator)
        return 0

    except KeyboardInterrupt:
        print("\n\n⚠️  用户中断操作")
        return 130

    except GBNetError as e:
        logging.error(f"{type(e).__name__}: {e}", exc_info=args.debug)
        print(f"❌ 错误: {e}", file=sys.stderr)
        return e.exit_code

    except FileNotFoundError as e:
        logging.error(f"文件不存在: {e}", exc_info=args.debug)
        print(f"❌ 错误: {e}", file=sys.stderr)
        return 2

    except Exception as e:
        logging.error(f"程序异常: {e}", exc_info=True)
        return 1

    finally:
        if orchestrator is not None:
            await orchestrator.cleanup()


def main(argv: Optional[List[str]] = None) -> int:
    """console script 入口"""
    try:
        return asyncio.run(async_main(argv))
    except KeyboardInterrupt:
        return 130


if __name__ == '__main__':
    sys.exit(main())
