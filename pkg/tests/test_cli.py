import json

import numpy as np
import pytest

from calibkit.cli import main
from calibkit.genmodel import make_model
from calibkit.metrics import CalibrationReport


def _write_jsonl(path, rows):
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")


@pytest.fixture
def pred_file(tmp_path):
    rows = [
        {"id": f"r{i}", "confidences": [0.8, 0.1, 0.05, 0.05], "label": 0 if i < 2 else 1}
        for i in range(4)
    ]
    path = tmp_path / "preds.jsonl"
    _write_jsonl(path, rows)
    return path


def test_eval_prints_metrics_and_writes_report(pred_file, tmp_path, capsys):
    report_path = tmp_path / "report.json"
    plot_path = tmp_path / "plot.svg"
    code = main([
        "eval", str(pred_file), "--report", str(report_path), "--plot", str(plot_path)
    ])
    out = capsys.readouterr().out
    assert code == 0
    assert "accuracy=0.5" in out
    assert "conf_ece=0.30000000000000004" in out

    report = CalibrationReport.from_json_dict(json.loads(report_path.read_text()))
    assert report.n == 4 and report.k == 4 and report.M == 10
    assert abs(report.conf_ece - 0.3) < 1e-12

    svg = plot_path.read_text()
    assert svg.startswith("<svg") and "line" in svg


def test_eval_malformed_line_names_line_number(tmp_path, capsys):
    path = tmp_path / "bad.jsonl"
    path.write_text(
        '{"id": "a", "confidences": [0.5, 0.5], "label": 0}\nnot-json\n', encoding="utf-8"
    )
    code = main(["eval", str(path)])
    err = capsys.readouterr().err
    assert code == 2
    assert "line 2" in err


def test_eval_validation_error_reports_kind(tmp_path, capsys):
    path = tmp_path / "bad.jsonl"
    _write_jsonl(path, [{"id": "a", "confidences": [0.25, 0.25, 0.25, 0.25], "label": 9}])
    code = main(["eval", str(path)])
    err = capsys.readouterr().err
    assert code == 2
    assert "LabelOutOfRange" in err


def test_eval_diagnostics_survive_blank_lines(tmp_path, capsys):
    path = tmp_path / "gaps.jsonl"
    good = '{"id": "a", "confidences": [0.5, 0.5], "label": 0}'
    bad = '{"id": "b", "confidences": [0.5, 0.5], "label": 7}'
    path.write_text(f"{good}\n\n\n{bad}\n", encoding="utf-8")
    code = main(["eval", str(path)])
    err = capsys.readouterr().err
    assert code == 2
    assert "line 4" in err


def test_eval_missing_file_is_io_error(tmp_path, capsys):
    code = main(["eval", str(tmp_path / "nope.jsonl")])
    assert code == 1


def test_eval_heuristic_bins(tmp_path, capsys):
    rng = np.random.default_rng(0)
    rows = []
    for i in range(3000):
        p = rng.dirichlet(np.ones(4))
        rows.append({"id": f"r{i}", "confidences": p.tolist(), "label": int(rng.integers(0, 4))})
    path = tmp_path / "big.jsonl"
    _write_jsonl(path, rows)
    report_path = tmp_path / "report.json"
    code = main(["eval", str(path), "--bins", "heuristic", "--report", str(report_path)])
    assert code == 0
    assert json.loads(report_path.read_text())["M"] == 14


def test_simulate_deterministic_outputs(tmp_path, capsys):
    args = [
        "simulate", "--model", "dirichlet", "--k", "4", "--n", "5000",
        "--support", "30", "--alpha", "1.0", "--seed", "7",
    ]
    code = main(args + ["--out", str(tmp_path / "a")])
    assert code == 0
    code = main(args + ["--out", str(tmp_path / "b")])
    assert code == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert (
        tmp_path / "a.model.json"
    ).read_bytes() == (tmp_path / "b.model.json").read_bytes()

    out = capsys.readouterr().out
    assert "conf_ece=" in out


def test_simulate_output_is_evaluable(tmp_path, capsys):
    code = main([
        "simulate", "--model", "pure-random", "--n", "2000", "--support", "10",
        "--seed", "3", "--out", str(tmp_path / "sim"),
    ])
    assert code == 0
    code = main(["eval", str(tmp_path / "sim.jsonl")])
    assert code == 0
    out = capsys.readouterr().out
    assert "accuracy=" in out


def test_simulate_bad_params(capsys):
    assert main(["simulate", "--support", "0"]) == 2


def test_bounds_csv_envelope(tmp_path, capsys):
    model = make_model("dirichlet", 4, 40, alpha=1.0, seed=5)
    model_path = tmp_path / "model.json"
    model_path.write_text(json.dumps(model.to_json_dict()), encoding="utf-8")
    csv_path = tmp_path / "bounds.csv"
    code = main([
        "bounds", "--model", str(model_path), "--acc-star", "0.6",
        "--acc-grid", "0.3,0.6,0.85", "--out", str(csv_path),
    ])
    assert code == 0
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0] == "target_acc,achieved_acc,tce,envelope_2gap,C,cwece_pop,holds"
    rows = [ln.split(",") for ln in lines[1:]]
    assert len(rows) == 3
    for row in rows:
        tce_v, envelope = float(row[2]), float(row[3])
        assert tce_v <= envelope + 1e-12
        assert float(row[5]) <= tce_v + 1e-12
        assert row[6] == "true"
    # The a = a* row trades nothing away.
    mid = rows[1]
    assert float(mid[2]) == 0.0


def test_bounds_deterministic(tmp_path):
    model = make_model("dirichlet", 4, 20, alpha=0.5, seed=9)
    model_path = tmp_path / "model.json"
    model_path.write_text(json.dumps(model.to_json_dict()), encoding="utf-8")
    outs = []
    for name in ("x.csv", "y.csv"):
        main(["bounds", "--model", str(model_path), "--out", str(tmp_path / name)])
        outs.append((tmp_path / name).read_bytes())
    assert outs[0] == outs[1]


def test_winrate(tmp_path, capsys):
    path = tmp_path / "pairs.jsonl"
    _write_jsonl(
        path,
        [
            {"id": "p1", "logp_chosen": -1.0, "logp_reject": -2.0},
            {"id": "p2", "logp_chosen": -3.0, "logp_reject": -2.0},
        ],
    )
    code = main(["winrate", "--pairs", str(path)])
    out = capsys.readouterr().out
    assert code == 0
    assert "win_rate=0.5" in out


def test_winrate_empty_file_is_input_error(tmp_path, capsys):
    path = tmp_path / "pairs.jsonl"
    path.write_text("", encoding="utf-8")
    assert main(["winrate", "--pairs", str(path)]) == 2


def test_train_toy_ts_invariants(tmp_path, capsys):
    code = main([
        "train-toy", "--mode", "ts", "--n", "400", "--dim", "8", "--epochs", "60",
        "--seed", "5", "--out", str(tmp_path / "ts"),
    ])
    assert code == 0
    before = json.loads((tmp_path / "ts.report.json").read_text())
    history = json.loads((tmp_path / "ts.history.json").read_text())
    assert history[0]["ece_after"] <= history[0]["ece_before"] + 1e-15
    out = capsys.readouterr().out
    before_acc = [ln for ln in out.splitlines() if ln.startswith("before")][0]
    after_acc = [ln for ln in out.splitlines() if ln.startswith("after")][0]
    assert before_acc.split("acc=")[1].split()[0] == after_acc.split("acc=")[1].split()[0]


def test_train_toy_writes_artifacts_and_is_deterministic(tmp_path):
    args = [
        "train-toy", "--mode", "cft", "--n", "400", "--dim", "8",
        "--epochs", "60", "--em-epochs", "3", "--seed", "6",
    ]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for suffix in (".history.json", ".report.json", ".before.svg", ".after.svg"):
        assert (tmp_path / f"a{suffix}").read_bytes() == (tmp_path / f"b{suffix}").read_bytes()
