import csv
import hashlib
import io
import os
import xml.etree.ElementTree as ET

import pytest

from ddlab import report
from ddlab.evaluate import EvalReport


def _zero_shot(model, clean, robust):
    rep = EvalReport(model=model, seed=0)
    rep.add("clean_accuracy", clean)
    for eps, v in robust:
        rep.add("robust_accuracy", v, "apgd-ce+apgd-dlr", eps, 20)
    return rep


def _captioner(model, asr):
    rep = EvalReport(model=model, seed=0)
    rep.add("caption_token_accuracy", 0.9)
    rep.add("caption_token_accuracy", 0.5, "apgd-ce", 8 / 255, 20)
    for name, v in asr.items():
        rep.add(f"asr[{name}]", v, "apgd-target", 16 / 255, 60)
    return rep


def _write(tmp_path, name, rep):
    d = tmp_path / name / "reports"
    d.mkdir(parents=True)
    (d / report.REPORT_NAME).write_text(rep.to_json())
    return str(tmp_path / name)


@pytest.fixture
def runs(tmp_path):
    return [
        _write(tmp_path, "clean", _zero_shot("clean", 0.8, [(2 / 255, 0.1), (4 / 255, 0.02)])),
        _write(tmp_path, "delta", _zero_shot("delta", 0.7, [(2 / 255, 0.45), (4 / 255, 0.3)])),
        _write(tmp_path, "llava", _captioner("llava", {"sell stocks now": 1.0, "visit evil site": 0.9})),
        _write(tmp_path, "delta2", _captioner("delta2", {"sell stocks now": 0.1, "visit evil site": 0.0})),
    ]


def test_no_runs():
    with pytest.raises(report.ReportError):
        report.load_reports([])


def test_missing_report_names_path(tmp_path, runs):
    missing = str(tmp_path / "nowhere")
    with pytest.raises(report.ReportError, match="nowhere"):
        report.emit_report(runs + [missing], str(tmp_path / "out"))
    assert not (tmp_path / "out").exists()


def test_table_rows(runs):
    reps = report.load_reports(runs)
    rows = list(csv.reader(io.StringIO(report.table_csv(reps))))
    assert rows[0] == ["model", "metric", "attack", "epsilon", "steps", "value", "seed"]
    assert len(rows) - 1 == sum(len(r.rows) for r in reps) == 3 + 3 + 4 + 4
    assert rows[1] == ["clean", "clean_accuracy", "none", "0", "0", "0.8", "0"]


def test_model_name_falls_back_to_directory(tmp_path):
    d = _write(tmp_path, "unnamed", _zero_shot("", 0.5, [(4 / 255, 0.1)]))
    assert report.load_reports([d])[0].model == "unnamed"


def test_figures_are_valid_svg(tmp_path, runs):
    written = report.emit_report(runs, str(tmp_path / "out"))
    names = sorted(os.path.basename(p) for p in written)
    assert names == ["caption_accuracy.svg", "clean_vs_robust.svg", "table.csv", "targeted_asr.svg",
                     "zero_shot_accuracy.svg"]
    for p in written:
        if p.endswith(".svg"):
            root = ET.parse(p).getroot()
            assert root.tag.endswith("svg")
    text = (tmp_path / "out" / "targeted_asr.svg").read_text()
    assert "sell stocks now" in text and "16/255" in text


def test_zero_shot_only_runs_skip_caption_figures(tmp_path, runs):
    written = report.emit_report(runs[:2], str(tmp_path / "out"))
    assert sorted(os.path.basename(p) for p in written) == ["clean_vs_robust.svg", "table.csv",
                                                            "zero_shot_accuracy.svg"]


def test_regeneration_is_bitwise(tmp_path, runs):
    def digest(out):
        return {os.path.basename(p): hashlib.sha256(open(p, "rb").read()).hexdigest()
                for p in report.emit_report(runs, out)}

    assert digest(str(tmp_path / "a")) == digest(str(tmp_path / "b"))
