"""
Golden RPG - region-aware golden noise prediction at desk scale.
Licensed under GNU GPL-3.0-or-later.

Tables rendered from a MetricReport, each as a DataFrame (written as CSV) and an
aligned text table:

    table         one row per method: CLIP analog, CLIP-IQA, FID, RSA, CRC, MOCQ, AB
    ablation      one row per adapter variant with its trainable parameter count
    head-to-head  v3 against v4 per category, with a delta row
    showcase      prompts of a category where a method beats the others the most
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
import pandas as pd

from .config import VARIANTS
from .errors import MetricError
from .metrics import METRIC_COLUMNS, MetricReport

logger = logging.getLogger(__name__)

STYLES = ("table", "ablation", "head-to-head", "showcase")
TABLE_COLUMNS = ["method", "clip", "clip_iqa", "fid", "rsa", "crc", "mocq", "ab", "count"]
ABLATION_ROWS = {"film_only": "(a) FiLM only", "v3": "(b) + Region Cross-Attention", "v4": "(c) + Confidence Head"}


@dataclass(frozen=True)
class ReportArtifact:
    style: str
    frame: pd.DataFrame

    @property
    def text(self) -> str:
        return format_table(self.frame)

    def save(self, csv_path: str, text_path: Optional[str] = None):
        self.frame.to_csv(csv_path, index=False, float_format="%.17g")
        if text_path:
            with open(text_path, "w", encoding="utf-8") as file:
                file.write(self.text + "\n")


def format_table(frame: pd.DataFrame) -> str:
    """Aligned columns, four decimals, empty cells for NaN."""
    return frame.to_string(index=False, na_rep="", float_format=lambda value: f"{value:.4f}")


def _methodMeans(report: MetricReport) -> pd.DataFrame:
    frame = report.to_frame()
    frame = frame[~frame["missing"]]
    if frame.empty:
        raise MetricError("The report has no scored rows.")
    means = frame.groupby("method", sort=True)[METRIC_COLUMNS].mean()
    means["count"] = frame.groupby("method", sort=True).size()
    return means


def main_table(report: MetricReport) -> pd.DataFrame:
    means = _methodMeans(report).reset_index()
    means["clip_iqa"] = np.nan
    means["fid"] = np.nan
    return means[TABLE_COLUMNS]


def ablation_table(report: MetricReport, parameter_counts: Optional[Dict[str, int]] = None) -> pd.DataFrame:
    means = _methodMeans(report)
    rows = []
    for variant in VARIANTS:
        if variant not in means.index:
            continue
        row = {"variant": ABLATION_ROWS[variant], "params": (parameter_counts or {}).get(variant, np.nan)}
        row.update({metric: means.loc[variant, metric] for metric in METRIC_COLUMNS})
        rows.append(row)
    if not rows:
        raise MetricError("The report holds none of the ablation variants " + ", ".join(VARIANTS) + ".")
    return pd.DataFrame(rows, columns=["variant", "params"] + METRIC_COLUMNS)


def head_to_head_table(report: MetricReport, first: str = "v3", second: str = "v4") -> pd.DataFrame:
    frame = report.to_frame()
    frame = frame[~frame["missing"] & frame["method"].isin([first, second])]
    if set(frame["method"]) != {first, second}:
        raise MetricError(f"Head-to-head needs rows for both {first} and {second}.")
    rows = []
    for category, group in frame.groupby("category", sort=True):
        means = group.groupby("method")[METRIC_COLUMNS].mean()
        if first not in means.index or second not in means.index:
            continue
        for method in (first, second):
            rows.append({"category": category, "method": method, **means.loc[method].to_dict()})
        delta = means.loc[second] - means.loc[first]
        rows.append({"category": category, "method": f"delta ({second} - {first})", **delta.to_dict()})
    return pd.DataFrame(rows, columns=["category", "method"] + METRIC_COLUMNS)


def showcase_table(report: MetricReport, category: Optional[str] = None, method: str = "v4",
                   top: int = 5) -> pd.DataFrame:
    """
    Ranks prompts by the method's CRC + MOCQ minus the mean CRC + MOCQ of the other
    methods on the same prompt.
    """
    frame = report.to_frame()
    frame = frame[~frame["missing"]]
    if category:
        frame = frame[frame["category"] == category]
    if method not in set(frame["method"]):
        raise MetricError(f"No rows for method {method}" + (f" in category {category}." if category else "."))
    frame = frame.assign(score=frame["crc"] + frame["mocq"])
    per_prompt = frame.groupby(["prompt_id", "category", "method"], sort=True)["score"].mean().unstack("method")
    others = [m for m in per_prompt.columns if m != method]
    if not others:
        raise MetricError("The showcase compares against at least one other method.")
    ranked = pd.DataFrame({"score": per_prompt[method], "others": per_prompt[others].mean(axis=1)})
    ranked["advantage"] = ranked["score"] - ranked["others"]
    ranked = ranked.dropna().sort_values(["advantage", "score"], ascending=False, kind="mergesort").head(top)
    return ranked.reset_index()[["prompt_id", "category", "score", "others", "advantage"]]


def render_report(report: MetricReport, style: str = "table", parameter_counts: Optional[Dict[str, int]] = None,
                  category: Optional[str] = None, method: str = "v4", top: int = 5) -> ReportArtifact:
    if not report.rows:
        raise MetricError("Cannot render an empty report.")
    if style == "table":
        frame = main_table(report)
    elif style == "ablation":
        frame = ablation_table(report, parameter_counts)
    elif style == "head-to-head":
        frame = head_to_head_table(report)
    elif style == "showcase":
        frame = showcase_table(report, category, method, top)
    else:
        raise ValueError(f"Unknown report style {style}, expected one of {STYLES}.")
    logger.debug("Rendered %s report with %d rows", style, len(frame))
    return ReportArtifact(style, frame)
