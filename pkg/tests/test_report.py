import pandas as pd
import pytest

from golden_rpg.errors import MetricError
from golden_rpg.metrics import MetricReport, MetricRow
from golden_rpg.report import TABLE_COLUMNS, render_report

BASE = {"random": 0.1, "v3": 0.3, "v4": 0.5}
PROMPTS = [("p0", "color"), ("p1", "spatial")]


@pytest.fixture
def report():
    rows = []
    for index, (prompt_id, category) in enumerate(PROMPTS):
        for method, base in BASE.items():
            for seed in (0, 1):
                rows.append(MetricRow(prompt_id, category, method, seed, clip=0.2, rsa=base + 0.1 * index, crc=base,
                                      mocq=2 * base, ab=float(method == "v4")))
    rows.append(MetricRow("p0", "color", "v4", 2, missing=True))
    return MetricReport(rows)


def test_main_table(report):
    frame = render_report(report, "table").frame
    assert list(frame.columns) == TABLE_COLUMNS
    assert frame["method"].tolist() == ["random", "v3", "v4"]
    v4 = frame.set_index("method").loc["v4"]
    assert v4["rsa"] == pytest.approx(0.55)
    assert v4["ab"] == 1.0 and v4["count"] == 4
    assert frame["clip_iqa"].isna().all() and frame["fid"].isna().all()


def test_ablation_table(report):
    frame = render_report(report, "ablation", {"film_only": 10, "v3": 20, "v4": 30}).frame
    assert frame["params"].tolist() == [20, 30]
    assert frame["variant"].str.contains("Confidence Head").tolist() == [False, True]
    assert frame["crc"].tolist() == pytest.approx([0.3, 0.5])


def test_head_to_head_has_a_delta_row_per_category(report):
    artifact = render_report(report, "head-to-head")
    frame = artifact.frame
    assert len(frame) == 6
    delta = frame[(frame["category"] == "color") & (frame["method"] == "delta (v4 - v3)")]
    assert delta["rsa"].iloc[0] == pytest.approx(0.2)
    assert delta["ab"].iloc[0] == pytest.approx(1.0)
    assert "delta (v4 - v3)" in artifact.text


def test_showcase(report):
    frame = render_report(report, "showcase").frame
    assert frame["prompt_id"].tolist() == ["p0", "p1"]
    assert frame["advantage"].tolist() == pytest.approx([0.9, 0.9])
    spatial = render_report(report, "showcase", category="spatial").frame
    assert spatial["prompt_id"].tolist() == ["p1"]
    with pytest.raises(MetricError):
        render_report(report, "showcase", method="v5")


def test_head_to_head_needs_both_variants():
    rows = [MetricRow("p0", "color", "v4", 0, 0.1, 0.1, 0.1, 0.1, 1.0)]
    with pytest.raises(MetricError):
        render_report(MetricReport(rows), "head-to-head")


def test_unknown_style_and_empty_report(report):
    with pytest.raises(ValueError):
        render_report(report, "pie")
    with pytest.raises(MetricError):
        render_report(MetricReport(), "table")


def test_artifact_files(report, tmp_path):
    artifact = render_report(report, "table")
    csv_path, text_path = tmp_path / "table.csv", tmp_path / "table.txt"
    artifact.save(str(csv_path), str(text_path))
    pd.testing.assert_frame_equal(pd.read_csv(csv_path, float_precision="round_trip"), artifact.frame,
                                  check_dtype=False)
    text = text_path.read_text(encoding="utf-8")
    assert "0.5500" in text and "nan" not in text.lower()
