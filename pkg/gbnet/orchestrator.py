"""
主控制器 - 协调各模块，实现 compile / synth / train / eval / infer / ablate 工作流
"""

import asyncio
import copy
import logging
from concurrent.futures import ThreadPoolExecutor
from functools import partial
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn, TimeRemainingColumn

from .commonsense import (
    CommonsenseGraph, assemble, compile_conditional_edges, edge_type_counts, read_graph, summarize, write_graph,
)
from .config import RunConfig
from .data_store import DataStore, read_dataset, write_dataset, write_world
from .errors import ConfigError, InputError
from .metrics_engine import MetricReport, MetricsEngine, entity_predictions, extract_topk, gt_triplets
from .model import InferenceMode, ModelParams, predict
from .output_renderer import OutputRenderer
from .synth_data import SceneRecord, generate_dataset, generate_world, write_commonsense_sources
from .trainer import TrainResult, Trainer, load_checkpoint, save_checkpoint
from .tsv_parser import load_embeddings, load_label_list, load_ontology_edges, load_triplet_counts
from .utils import format_float

logger = logging.getLogger(__name__)

RESOLVED_CONFIG = "resolved_config.toml"
CHECKPOINT_NAME = "checkpoint.gbnet"
GRAPH_NAME = "commonsense.gbkg"


class Orchestrator:
    """主控制器 - 协调一次运行的完整工作流"""

    def __init__(self, config: RunConfig, renderer: Optional[OutputRenderer] = None):
        """
        初始化主控制器

        Args:
            config: 已合并命令行覆盖的运行配置
            renderer: 输出渲染器（测试可注入静默 Console）
        """
        self.config = config
        self.renderer = renderer or OutputRenderer()
        self.store = DataStore(config.paths.out_dir)
        self.executor: Optional[ThreadPoolExecutor] = None

    async def initialize(self):
        """创建输出目录和工作线程池，写出配置副本"""
        logger.info("========== 开始初始化 ==========")
        self.store.ensure()
        self.executor = ThreadPoolExecutor(max_workers=self.config.train.threads)
        path = self.store.write_text(RESOLVED_CONFIG, self.config.to_toml())
        logger.info(f"输出目录: {self.store.out_dir}, 工作线程 {self.config.train.threads}, 配置副本 {path}")
        logger.info("========== 初始化完成 ==========\n")

    async def cleanup(self):
        """清理资源"""
        if self.executor is not None:
            self.executor.shutdown(wait=True)
            self.executor = None
            logger.info("工作线程池已关闭")

    async def _blocking(self, fn, *args, **kwargs):
        """在线程池中运行阻塞计算"""
        if self.executor is None:
            raise ConfigError("Orchestrator 尚未初始化")
        loop = asyncio.get_running_loop()
        return await loop.run_in_executor(self.executor, partial(fn, *args, **kwargs))

    def _step(self, index: int, total: int, text: str):
        self.renderer.console.print(f"\n[bold cyan]步骤 {index}/{total}:[/bold cyan] {text}")
        logger.info(f"步骤 {index}/{total}: {text}")

    # ========== compile ==========

    def _compile_sync(
        self,
        entities: Path,
        predicates: Path,
        ontology: Optional[Path],
        triplet_counts: Path,
        embeddings: Path,
    ) -> CommonsenseGraph:
        entity_labels = load_label_list(entities)
        predicate_labels = load_label_list(predicates)
        known = set(entity_labels) | set(predicate_labels)
        ontology_edges = load_ontology_edges(ontology, known_labels=known) if ontology else []
        conditional = compile_conditional_edges(load_triplet_counts(triplet_counts))
        return assemble(entity_labels, predicate_labels, ontology_edges, conditional, load_embeddings(embeddings))

    async def run_compile(
        self,
        entities: str | Path,
        predicates: str | Path,
        triplet_counts: str | Path,
        embeddings: str | Path,
        ontology: Optional[str | Path] = None,
        output: Optional[str | Path] = None,
    ) -> Path:
        """
        编译常识图

        Args:
            entities / predicates: 标签表
            triplet_counts: 三元组计数 TSV
            embeddings: 词向量 TSV
            ontology: 本体边 TSV（可选）
            output: 输出文件，默认 <out_dir>/commonsense.gbkg

        Returns:
            GBKG 文件路径
        """
        self._step(1, 2, "读取源文件并编译常识图...")
        commonsense = await self._blocking(
            self._compile_sync,
            Path(entities), Path(predicates), Path(ontology) if ontology else None,
            Path(triplet_counts), Path(embeddings),
        )
        self._step(2, 2, "写出常识图...")
        path = Path(output) if output else self.store.path(GRAPH_NAME)
        write_graph(commonsense, path)
        self.renderer.render_compile_summary(summarize(commonsense), edge_type_counts(commonsense), path)
        return path

    # ========== synth ==========

    async def run_synth(
        self,
        n_train: int = 500,
        n_test: int = 100,
        n_entity_classes: int = 8,
        n_predicate_classes: int = 6,
        feat_dim: int = 16,
        sigma: float = 0.1,
        zipf_s: float = 1.0,
        min_entities: int = 3,
        max_entities: int = 5,
    ) -> Dict[str, Path]:
        """
        生成玩具世界、训练/测试集、常识源文件并编译常识图

        Returns:
            {"world", "train", "test", "commonsense", ...源文件}: 路径
        """
        seed = self.config.train.seed
        threads = self.config.train.threads

        self._step(1, 3, "生成玩具世界...")
        world = generate_world(seed, n_entity_classes, n_predicate_classes, feat_dim, sigma, zipf_s=zipf_s)
        paths: Dict[str, Path] = {"world": self.store.path("world.gbworld")}
        write_world(world, paths["world"])

        self._step(2, 3, f"采样场景（训练 {n_train}，测试 {n_test}）...")
        train_records, test_records = await asyncio.gather(
            self._blocking(generate_dataset, world, n_train, seed, min_entities, max_entities, "train", threads),
            self._blocking(generate_dataset, world, n_test, seed + 1, min_entities, max_entities, "test", threads),
        )
        paths["train"] = self.store.path("train.gbds")
        paths["test"] = self.store.path("test.gbds")
        write_dataset(train_records, paths["train"], feat_dim=feat_dim)
        write_dataset(test_records, paths["test"], feat_dim=feat_dim)

        self._step(3, 3, "写出常识源文件并编译常识图...")
        sources = write_commonsense_sources(world, train_records, self.store.out_dir / "sources")
        paths.update(sources)
        commonsense = await self._blocking(
            self._compile_sync,
            sources["entities"], sources["predicates"], sources["ontology"],
            sources["triplet_counts"], sources["embeddings"],
        )
        paths["commonsense"] = self.store.path(GRAPH_NAME)
        write_graph(commonsense, paths["commonsense"])

        self.renderer.render_synth_summary(paths["world"], {
            "train": (paths["train"], len(train_records), sum(len(r.triplets) for r in train_records)),
            "test": (paths["test"], len(test_records), sum(len(r.triplets) for r in test_records)),
        })
        self.renderer.render_compile_summary(summarize(commonsense), {}, paths["commonsense"])
        return paths

    # ========== 公共加载 ==========

    def _load_inputs(self, dataset_key: str) -> Tuple[List[SceneRecord], CommonsenseGraph]:
        dataset_path = getattr(self.config.paths, dataset_key) or self.config.paths.dataset
        if not dataset_path:
            raise ConfigError(f"缺少路径配置: paths.{dataset_key}")
        records = read_dataset(dataset_path)
        if not records:
            raise InputError(f"数据集为空: {dataset_path}")
        commonsense = read_graph(self.config.paths.commonsense)
        if records[0].label_dists.shape[1] != commonsense.n_entity_classes:
            raise InputError(
                f"数据集类别数 {records[0].label_dists.shape[1]} 与常识图 CE 数 {commonsense.n_entity_classes} 不符"
            )
        return records, commonsense

    def _load_params(self, config: RunConfig, commonsense: CommonsenseGraph, feat_dim: int) -> ModelParams:
        params = ModelParams.create(config.model, commonsense, feat_dim, seed=config.train.seed)
        params, _ = load_checkpoint(config.paths.checkpoint, params)
        return params

    # ========== train ==========

    def _train_sync(
        self,
        config: RunConfig,
        records: Sequence[SceneRecord],
        commonsense: CommonsenseGraph,
        resume: bool = False,
        progress: Optional[Progress] = None,
    ) -> TrainResult:
        params, state = None, None
        if resume and config.paths.checkpoint:
            params = ModelParams.create(config.model, commonsense, records[0].feat_dim, seed=config.train.seed)
            params, state = load_checkpoint(config.paths.checkpoint, params)
            logger.info(f"从检查点继续训练: {config.paths.checkpoint} (已完成 {state.step} 步)")
        trainer = Trainer(commonsense, config, params=params, state=state, feat_dim=records[0].feat_dim)

        on_step = None
        if progress is not None:
            task = progress.add_task("训练中...", total=trainer.planned_steps(len(trainer.split(records)[0])))

            def on_step(step: int, loss: float):
                progress.update(task, advance=1, description=f"训练中 loss={loss:.4f}")

        return trainer.fit(records, on_step=on_step)

    def _progress(self) -> Progress:
        return Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            BarColumn(),
            TextColumn("[progress.percentage]{task.percentage:>3.0f}%"),
            TimeRemainingColumn(),
            console=self.renderer.console,
        )

    async def run_train(self, resume: bool = False) -> TrainResult:
        """
        训练并写出检查点、损失日志和验证曲线

        Args:
            resume: 从 paths.checkpoint 继续训练
        """
        required = ["dataset", "commonsense"] + (["checkpoint"] if resume else [])
        self.config.validate(required_paths=required)

        self._step(1, 3, "读取数据集和常识图...")
        records, commonsense = await self._blocking(self._load_inputs, "dataset")
        self.renderer.console.print(
            f"✅ 训练记录 [bold]{len(records)}[/bold] 条, "
            f"{commonsense.n_entity_classes} CE / {commonsense.n_predicate_classes} CP"
        )

        self._step(2, 3, "训练...")
        with self._progress() as progress:
            result = await self._blocking(self._train_sync, self.config, records, commonsense, resume, progress)

        self._step(3, 3, "写出检查点和日志...")
        checkpoint = self.store.path(CHECKPOINT_NAME)
        save_checkpoint(result.params, result.state, checkpoint)
        self.store.write_loss_log(result.loss_log)
        if result.validation:
            self.store.write_lines(
                "validation.tsv",
                ["epoch\tpredcls_R@50"] + [f"{epoch}\t{format_float(r)}" for epoch, r in result.validation],
            )
        self.renderer.render_training(result.loss_log, result.validation)
        self.renderer.console.print(f"✅ 检查点已保存: [cyan]{checkpoint}[/cyan]")
        return result

    # ========== eval ==========

    async def _evaluate(
        self,
        params: ModelParams,
        commonsense: CommonsenseGraph,
        records: Sequence[SceneRecord],
        tasks: Sequence[str],
        ks: Sequence[int],
        constrained_modes: Sequence[bool],
    ) -> MetricReport:
        """逐图并行推理，按记录顺序累加指标"""
        engine = MetricsEngine(ks, constrained_modes)
        for task in tasks:
            mode = InferenceMode.parse(task)
            outputs = await asyncio.gather(*(
                self._blocking(predict, record, commonsense, params, mode) for record in records
            ))
            for record, (bridges, inputs) in zip(records, outputs):
                engine.add_image(task, bridges, inputs.boxes, gt_triplets(record))
            logger.info(f"任务 {task}: 已评测 {len(records)} 张图像")
        return engine.report()

    async def run_eval(self, html: bool = False) -> MetricReport:
        """
        在测试集上评测检查点，写出 metrics.tsv（可选 HTML 报告）
        """
        self.config.validate(required_paths=["commonsense", "checkpoint"])
        e = self.config.eval

        self._step(1, 3, "读取测试集、常识图和检查点...")
        records, commonsense = await self._blocking(self._load_inputs, "test_dataset")
        params = await self._blocking(self._load_params, self.config, commonsense, records[0].feat_dim)

        self._step(2, 3, f"评测 {', '.join(e.tasks())}（K = {e.ks}）...")
        report = await self._evaluate(params, commonsense, records, e.tasks(), e.ks, e.constraint_modes())

        self._step(3, 3, "写出指标...")
        metrics_path = self.store.write_lines("metrics.tsv", report.lines())
        self.renderer.render_metrics(report)
        if html:
            self.renderer.render_html(
                report, self.store.path("metrics_report.html"),
                predicate_labels=commonsense.predicate_labels,
                config_path=self.store.path(RESOLVED_CONFIG),
            )
        self.renderer.console.print(f"✅ 指标已写出: [cyan]{metrics_path}[/cyan]")
        return report

    # ========== infer ==========

    async def run_infer(self, task: str = "sggen", dot: bool = False, show: int = 3) -> Path:
        """
        推理并导出每张图像的排序三元组（图约束），可选写出 DOT 场景图

        Args:
            task: 推理模式
            dot: 是否为每张图像写出 dot/<image_id>.dot
            show: 终端展示的图像数

        Returns:
            scene_graphs.tsv 路径
        """
        self.config.validate(required_paths=["commonsense", "checkpoint"])
        mode = InferenceMode.parse(task)
        k = max(self.config.eval.ks)

        self._step(1, 2, "读取数据和检查点...")
        records, commonsense = await self._blocking(self._load_inputs, "test_dataset")
        params = await self._blocking(self._load_params, self.config, commonsense, records[0].feat_dim)
        entity_labels, predicate_labels = commonsense.entity_labels, commonsense.predicate_labels

        self._step(2, 2, f"推理 {len(records)} 张图像 ({mode.value})...")
        outputs = await asyncio.gather(*(
            self._blocking(predict, record, commonsense, params, mode) for record in records
        ))
        lines = ["image_id\trank\tsubject\tsubject_label\tpredicate_label\tobject\tobject_label\tconfidence"]
        for index, (record, (bridges, inputs)) in enumerate(zip(records, outputs)):
            triplets = extract_topk(bridges, inputs.boxes, k, constrained=True)
            for rank, t in enumerate(triplets, 1):
                lines.append(
                    f"{record.image_id}\t{rank}\t{t.subject}\t{entity_labels[t.subject_class]}\t"
                    f"{predicate_labels[t.predicate]}\t{t.object}\t{entity_labels[t.object_class]}\t"
                    f"{format_float(t.confidence)}"
                )
            if index < show:
                self.renderer.render_scene_graph(record.image_id, triplets, entity_labels, predicate_labels)
            if dot:
                classes, _ = entity_predictions(bridges.entity_weights)
                self.renderer.render_dot(
                    record.image_id, classes, triplets, entity_labels, predicate_labels,
                    self.store.path("dot") / f"{record.image_id}.dot",
                )
        path = self.store.write_lines("scene_graphs.tsv", lines)
        self.renderer.console.print(f"✅ 场景图已写出: [cyan]{path}[/cyan]")
        return path

    # ========== ablate ==========

    def ablation_variants(self, steps: Sequence[int] = (1, 2, 3)) -> List[Tuple[str, RunConfig]]:
        """消息传递步数扫描 + 无常识变体，其余配置相同"""
        variants = []
        for t in steps:
            config = copy.deepcopy(self.config)
            config.model.steps = t
            config.model.use_knowledge = True
            variants.append((f"T={t}", config))
        config = copy.deepcopy(self.config)
        config.model.use_knowledge = False
        variants.append((f"no-knowledge T={config.model.steps}", config))
        return variants

    async def run_ablate(
        self,
        steps: Sequence[int] = (1, 2, 3),
        tasks: Sequence[str] = ("predcls", "sggen"),
    ) -> List[Tuple[str, MetricReport]]:
        """
        以相同种子和训练预算训练各变体，并在测试集上评测

        Returns:
            [(变体名, MetricReport), ...]
        """
        self.config.validate(required_paths=["dataset", "commonsense"])
        variants = self.ablation_variants(steps)
        total = len(variants) + 1

        self._step(1, total, "读取数据...")
        train_records, commonsense = await self._blocking(self._load_inputs, "dataset")
        test_records, _ = await self._blocking(self._load_inputs, "test_dataset")

        rows: List[Tuple[str, MetricReport]] = []
        lines = ["variant\ttask\tmetric\tK\tconstrained\tvalue"]
        for index, (name, config) in enumerate(variants, 2):
            self._step(index, total, f"训练并评测 {name}...")
            config.validate()
            result = await self._blocking(self._train_sync, config, train_records, commonsense)
            report = await self._evaluate(
                result.params, commonsense, test_records, tasks, self.config.eval.ks, [True, False],
            )
            rows.append((name, report))
            lines += [f"{name}\t{line}" for line in report.lines()]
            logger.info(f"变体 {name} 完成: {len(result.loss_log)} 步")

        self.store.write_lines("ablation.tsv", lines)
        self.renderer.render_ablation(rows, k=50 if 50 in self.config.eval.ks else max(self.config.eval.ks))
        return rows
