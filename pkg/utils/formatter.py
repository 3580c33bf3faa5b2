"""
报告格式化：把评估结果整理成便于阅读的文本块（写入日志 / stderr）
"""

import json
import logging
import sys


logger = logging.getLogger(__name__)

SEPARATOR = "━━━━━━━━━━━━━━━━━━━━"
FOLDING_THRESHOLD = 20


def section_title(title: str) -> str:
    return f"━━━━━━━━ {title} ━━━━━━━━"


def fold_lines(lines: list[str], threshold: int = FOLDING_THRESHOLD) -> list[str]:
    """
    行数超过阈值时折叠中间部分

    Args:
        lines: 文本行
        threshold: 保留的最大行数

    Returns:
        折叠后的文本行
    """
    if len(lines) <= threshold:
        return lines
    head = threshold // 2
    tail = threshold - head - 1
    return [*lines[:head], f"  ... (省略 {len(lines) - head - tail} 行)", *lines[len(lines) - tail :]]


def format_report_summary(report) -> str:
    """
    基准测试报告摘要

    Args:
        report: BenchmarkReport

    Returns:
        多行文本
    """
    lines = [section_title(f"📊 评估结果 ({report.kind})"), f"模板: {report.template_id}", f"容差: ±{report.tolerance_px:g} px"]

    for variant, stats in report.summary.items():
        lines.append(SEPARATOR)
        if not stats.get("n"):
            lines.append(f"🔹 {variant}: 无有效匹配")
            continue
        lines.append(f"🔹 {variant} ({stats['n']} 个匹配)")
        lines.append(f"   MRE: {stats['mre_px']:.2f} ± {stats['std_px']:.2f} px ({stats['mre_mm']:.2f} ± {stats['std_mm']:.2f} mm)")
        lines.append(f"   最大误差: {stats['max_px']:.2f} px ({stats['max_mm']:.2f} mm)")
        lines.append(f"   命中率: {stats['accuracy'] * 100:.1f}%")
        if variant in report.self_match:
            lines.append(f"   模板自匹配: {report.self_match[variant] * 100:.1f}%")

        per_landmark = [f"     {name}: {value:.2f} px" for name, value in report.per_landmark(variant).items()]
        if per_landmark:
            lines.append("   逐点平均误差:")
            lines.extend(fold_lines(per_landmark))

    if report.runtime:
        lines.append(SEPARATOR)
        lines.append(
            f"⏱️ 嵌入 {report.runtime.get('embed_ms_mean', 0.0):.1f} ms/图, "
            f"匹配 {report.runtime.get('match_ms_mean', 0.0):.2f} ms/点"
        )
    return "\n".join(lines)


def format_table(table) -> str:
    """实验结果表（扫描 / 消融 / 增强阶梯）"""
    lines = [section_title(f"📈 {table.name}")]
    header = list(table.columns)
    lines.append(" | ".join(header))
    body = []
    for row in table.rows:
        cells = []
        for column in header:
            value = row.get(column, "")
            cells.append(f"{value:.3f}" if isinstance(value, float) else str(value))
        body.append(" | ".join(cells))
    lines.extend(fold_lines(body))
    for key, value in table.meta.items():
        if isinstance(value, float):
            lines.append(f"{key}: {value:.3f}")
    return "\n".join(lines)


def emit_json(data, stream=None) -> None:
    """命令的机器可读结果：stdout 单行 JSON"""
    stream = stream or sys.stdout
    stream.write(json.dumps(data, ensure_ascii=False, sort_keys=True) + "\n")
    stream.flush()
