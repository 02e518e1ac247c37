"""
输出渲染器 - 终端表格、HTML 指标报告和 DOT 场景图
"""

import logging
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from jinja2 import Template
from rich.console import Console
from rich.panel import Panel
from rich.table import Table
from rich.text import Text

from .metrics_engine import MetricReport, ScoredTriplet

logger = logging.getLogger(__name__)


HTML_TEMPLATE = """
<!DOCTYPE html>
<html lang="zh-CN">
<head>
    <meta charset="UTF-8">
    <meta name="viewport" content="width=device-width, initial-scale=1.0">
    <title>{{ title }}</title>
    <style>
        * { margin: 0; padding: 0; box-sizing: border-box; }
        body {
            font-family: 'Segoe UI', Tahoma, Geneva, Verdana, sans-serif;
            background: #0f1419;
            color: #e0e0e0;
            padding: 20px;
        }
        .container { max-width: 1000px; margin: 0 auto; }
        h1 { text-align: center; color: #00d4ff; margin-bottom: 30px; }
        h2 { color: #00d4ff; margin: 24px 0 12px; }
        table {
            width: 100%;
            background: #1a1f2e;
            border-collapse: collapse;
            border-radius: 10px;
            overflow: hidden;
        }
        th, td { padding: 10px; text-align: left; border-bottom: 1px solid #2a3f5f; }
        th { background: #252d3f; color: #00d4ff; }
        tr:hover { background: #252d3f; }
        .value { font-family: monospace; }
        .footer { text-align: center; margin-top: 30px; color: #8899a6; font-size: 0.9em; }
    </style>
</head>
<body>
    <div class="container">
        <h1>{{ title }}</h1>
        <table>
            <thead>
                <tr><th>任务</th><th>图约束</th><th>K</th><th>R@K</th><th>mR@K</th><th>图像数</th></tr>
            </thead>
            <tbody>
                {% for e in entries %}
                <tr>
                    <td>{{ e.task }}</td>
                    <td>{{ "是" if e.constrained else "否" }}</td>
                    <td>{{ e.k }}</td>
                    <td class="value">{{ "%.4f"|format(e.recall) }}</td>
                    <td class="value">{{ "%.4f"|format(e.mean_recall) }}</td>
                    <td>{{ e.n_images }}</td>
                </tr>
                {% endfor %}
            </tbody>
        </table>
        {% if per_class %}
        <h2>各谓词召回 ({{ per_class_title }})</h2>
        <table>
            <thead><tr><th>谓词</th><th>召回</th></tr></thead>
            <tbody>
                {% for label, value in per_class %}
                <tr><td>{{ label }}</td><td class="value">{{ "%.4f"|format(value) }}</td></tr>
                {% endfor %}
            </tbody>
        </table>
        {% endif %}
        <div class="footer">
            生成时间: {{ timestamp }}{% if config_path %}<br>配置: {{ config_path }}{% endif %}
        </div>
    </div>
</body>
</html>
"""

DOT_TEMPLATE = """digraph "{{ image_id }}" {
  rankdir=LR;
  node [shape=box, style=rounded];
{% for node in nodes %}  e{{ node.index }} [label="{{ node.label }}"];
{% endfor %}{% for edge in edges %}  e{{ edge.subject }} -> e{{ edge.object }} [label="{{ edge.label }} ({{ "%.3f"|format(edge.confidence) }})"];
{% endfor %}}
"""


def _quote(text: str) -> str:
    return str(text).replace("\\", "\\\\").replace('"', '\\"')


class OutputRenderer:
    """输出渲染器 - 终端表格、HTML 报告、DOT 图"""

    def __init__(self, console: Optional[Console] = None):
        """初始化渲染器"""
        self.console = console or Console()

    # ---------- 常识图 ----------

    def render_compile_summary(self, summary: Dict[str, int], edge_types: Dict[str, int], path: str | Path):
        """渲染常识图编译结果：节点数与按族统计的边数"""
        text = (
            f"[bold]文件:[/bold] {path}\n"
            f"[bold]节点:[/bold] {summary['CE']} CE, {summary['CP']} CP\n"
            f"[bold]边:[/bold] CE->CE {summary['CE->CE']}, CE->CP {summary['CE->CP']}, "
            f"CP->CE {summary['CP->CE']}, CP->CP {summary['CP->CP']}"
        )
        self.console.print(Panel(text, title="📚 常识图", border_style="green"))

        if edge_types:
            table = Table(title="边类型", show_header=True, header_style="bold magenta", border_style="blue")
            table.add_column("边类型", style="cyan")
            table.add_column("数量", justify="right")
            for name, count in edge_types.items():
                table.add_row(name, str(count))
            self.console.print(table)

    # ---------- 合成数据 ----------

    def render_synth_summary(self, world_path: Path, datasets: Dict[str, Tuple[Path, int, int]]):
        """
        渲染合成数据概况

        Args:
            world_path: 世界文件
            datasets: {名称: (路径, 场景数, 三元组数)}
        """
        table = Table(title="🧪 合成数据", show_header=True, header_style="bold magenta", border_style="blue")
        table.add_column("数据集", style="cyan")
        table.add_column("文件")
        table.add_column("场景", justify="right")
        table.add_column("三元组", justify="right")
        for name, (path, n_scenes, n_triplets) in datasets.items():
            table.add_row(name, str(path), str(n_scenes), str(n_triplets))
        self.console.print(table)
        self.console.print(f"[dim]世界文件: {world_path}[/dim]")

    # ---------- 训练 ----------

    def render_training(self, loss_log: Sequence[Tuple[int, float, float]], validation: Sequence[Tuple[int, float]]):
        """渲染训练摘要"""
        if not loss_log:
            self.console.print(Panel("[bold yellow]⚠️  没有执行任何优化步[/bold yellow]", border_style="yellow"))
            return
        first, last = loss_log[0], loss_log[-1]
        lines = [
            f"[bold]优化步数:[/bold] {last[0]}",
            f"[bold]首步损失:[/bold] {first[1]:.4f}",
            f"[bold]末步损失:[/bold] {last[1]:.4f}",
            f"[bold]学习率:[/bold] {last[2]:g}",
        ]
        if validation:
            best_epoch, best = max(validation, key=lambda item: item[1])
            lines.append(f"[bold]验证 PredCls R@50:[/bold] 最终 {validation[-1][1]:.4f}, 最佳 {best:.4f} (epoch {best_epoch})")
        self.console.print(Panel("\n".join(lines), title="📉 训练", border_style="green"))

    # ---------- 指标 ----------

    def render_metrics(self, report: MetricReport, title: str = "📈 评测结果", console: Optional[Console] = None):
        """渲染指标表（每行一个 任务/图约束/K 组合）"""
        console = console or self.console
        if not report.entries:
            console.print(Panel("[bold yellow]⚠️  没有可评测的图像（均无真值三元组）[/bold yellow]", border_style="yellow"))
            return
        table = Table(title=title, show_header=True, header_style="bold magenta", border_style="blue")
        table.add_column("任务", style="cyan")
        table.add_column("图约束")
        table.add_column("K", justify="right")
        table.add_column("R@K", justify="right")
        table.add_column("mR@K", justify="right")
        table.add_column("图像", justify="right", style="dim")
        for entry in report.entries:
            table.add_row(
                entry.task,
                "✓" if entry.constrained else "✗",
                str(entry.k),
                f"{entry.recall:.4f}",
                f"{entry.mean_recall:.4f}",
                str(entry.n_images),
            )
        console.print(table)

    def render_ablation(self, rows: Sequence[Tuple[str, MetricReport]], k: int = 50):
        """渲染消融对比：每个变体一行，列为各任务的 R@K / mR@K（图约束）"""
        tasks: List[str] = []
        for _, report in rows:
            for entry in report.entries:
                if entry.task not in tasks:
                    tasks.append(entry.task)
        table = Table(title=f"🔬 消融实验 (K={k}, 图约束)", show_header=True, header_style="bold magenta", border_style="blue")
        table.add_column("变体", style="cyan")
        for task in tasks:
            table.add_column(f"{task} R@{k}", justify="right")
            table.add_column(f"{task} mR@{k}", justify="right")
        for name, report in rows:
            cells = [name]
            for task in tasks:
                try:
                    entry = report.get(task, k, True)
                    cells += [f"{entry.recall:.4f}", f"{entry.mean_recall:.4f}"]
                except KeyError:
                    cells += ["-", "-"]
            table.add_row(*cells)
        self.console.print(table)

    def render_html(
        self,
        report: MetricReport,
        output_path: str | Path = "output/metrics_report.html",
        predicate_labels: Optional[Sequence[str]] = None,
        config_path: Optional[str | Path] = None,
        title: str = "场景图生成评测报告",
    ) -> Path:
        """
        渲染 HTML 指标报告

        Args:
            report: 指标
            output_path: 输出路径
            predicate_labels: CP 局部下标对应的标签，用于各谓词召回表
            config_path: 本次运行的配置副本
            title: 页面标题
        """
        per_class: List[Tuple[str, float]] = []
        per_class_title = ""
        if report.entries:
            # 取 K 最大的图约束条目展示各谓词召回
            constrained = [e for e in report.entries if e.constrained] or report.entries
            focus = max(constrained, key=lambda e: e.k)
            per_class_title = f"{focus.task}, K={focus.k}"
            for c, value in sorted(focus.per_class.items()):
                label = predicate_labels[c] if predicate_labels and c < len(predicate_labels) else str(c)
                per_class.append((label, value))

        html_content = Template(HTML_TEMPLATE).render(
            title=title,
            entries=report.entries,
            per_class=per_class,
            per_class_title=per_class_title,
            config_path=str(config_path) if config_path else "",
            timestamp=datetime.now().strftime('%Y-%m-%d %H:%M:%S'),
        )
        output_file = Path(output_path)
        output_file.parent.mkdir(parents=True, exist_ok=True)
        output_file.write_text(html_content, encoding='utf-8')

        logger.info(f"HTML报告已生成: {output_file}")
        self.console.print(f"\n✅ HTML报告已生成: [cyan]{output_file}[/cyan]")
        return output_file

    # ---------- 推理 ----------

    def render_scene_graph(
        self,
        image_id: str,
        triplets: Sequence[ScoredTriplet],
        entity_labels: Sequence[str],
        predicate_labels: Sequence[str],
        limit: int = 10,
    ):
        """终端展示一张图像的前若干个三元组"""
        table = Table(title=f"🖼  {image_id}", show_header=True, header_style="bold magenta", border_style="blue")
        table.add_column("#", style="dim", width=4)
        table.add_column("主语", style="cyan")
        table.add_column("谓词", style="yellow")
        table.add_column("宾语", style="cyan")
        table.add_column("置信度", justify="right")
        for rank, t in enumerate(triplets[:limit], 1):
            table.add_row(
                str(rank),
                f"{entity_labels[t.subject_class]}#{t.subject}",
                predicate_labels[t.predicate],
                f"{entity_labels[t.object_class]}#{t.object}",
                f"{t.confidence:.4f}",
            )
        self.console.print(table)

    def render_dot(
        self,
        image_id: str,
        entity_classes: Sequence[int],
        triplets: Sequence[ScoredTriplet],
        entity_labels: Sequence[str],
        predicate_labels: Sequence[str],
        output_path: str | Path,
    ) -> Path:
        """
        写出 Graphviz DOT 场景图：每个 SE 一个节点，每个三元组一条有向边

        Args:
            image_id: 图像 ID
            entity_classes: 每个 SE 的预测类别
            triplets: 要绘制的三元组
            entity_labels / predicate_labels: 局部下标 -> 标签
            output_path: 输出路径
        """
        nodes = [
            {"index": i, "label": _quote(f"{entity_labels[c]}#{i}")}
            for i, c in enumerate(entity_classes)
        ]
        edges = [
            {
                "subject": t.subject,
                "object": t.object,
                "label": _quote(predicate_labels[t.predicate]),
                "confidence": t.confidence,
            }
            for t in triplets
        ]
        content = Template(DOT_TEMPLATE).render(image_id=_quote(image_id), nodes=nodes, edges=edges)
        output_file = Path(output_path)
        output_file.parent.mkdir(parents=True, exist_ok=True)
        output_file.write_text(content, encoding="utf-8")
        logger.debug(f"DOT 场景图已写出: {output_file}")
        return output_file

    def banner(self, text: str):
        self.console.print(Panel(Text(text, justify="center", style="bold cyan"), border_style="cyan"))
