import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest

from voltvar import serialize
from voltvar.cli import main

CFG = "steps = 12\nepochs = 60\nsamples_per_step = 2\n"


def run_pipeline(out: Path, cfg: Path) -> dict[str, str]:
    """Every stage once; returns a digest per produced file."""
    f = ["--feeder", str(out / "lines.csv"), "--buses", str(out / "buses.csv")]
    common = ["--config", str(cfg), "--out", str(out)]
    assert main(["synth", "--case", "1", *common]) == 0
    assert main(["build", *f, *common]) == 0
    assert main(["label", *f, "--profiles", str(out / "profiles.csv"), *common]) == 0
    for regime in ("cvpsc", "rpsc"):
        assert main(["train", *f, "--regime", regime, *common]) == 0
        assert main(["train", *f, "--regime", regime, "--phi-only", *common]) == 0
        assert main(["certify", "--surrogate", str(out / f"surrogate_{regime}.json"),
                     "--sensitivity", str(out / "sensitivity.json"), *common]) == 0
    assert main(["simulate", *f, "--surrogate", str(out / "surrogate_cvpsc.json"), "--plant", "ac", *common]) == 0
    assert main(["report", *common]) == 0
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(out.iterdir())}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = base / "run.cfg"
    cfg.write_text(CFG)
    first = run_pipeline(base / "a", cfg)
    second = run_pipeline(base / "b", cfg)
    return base, first, second


def test_every_stage_is_byte_identical(pipeline):
    _, first, second = pipeline
    assert first == second
    for name in ("sensitivity.json", "scenarios.csv", "orpf_labels.csv", "surrogate_rpsc.json",
                 "train_log_rpsc.jsonl", "certificate_rpsc.json", "trace.csv", "summary.json", "report.md"):
        assert name in first


def test_outputs_have_documented_headers(pipeline):
    out = pipeline[0] / "a"
    assert (out / "scenarios.csv").read_text().splitlines()[0] == "id,step,bus,p_pu,q_pu,qinit_pu"
    assert (out / "dataset_27.csv").read_text().splitlines()[0] == "v_pu,q_pu,qstar_pu"
    assert (out / "trace.csv").read_text().splitlines()[0] == "t,bus,q_pu,v_pu"
    summary = serialize.load(out / "summary.json")
    assert {"converged", "steps", "final_residual", "distance_to_orpf", "eps", "regime"} <= set(summary)
    first_log = json.loads((out / "train_log_rpsc.jsonl").read_text().splitlines()[0])
    assert set(first_log) == {"epoch", "node", "loss", "lipschitz_psi", "lipschitz_phi"}


def test_report_improvement_column_recomputes(pipeline):
    out = pipeline[0] / "a"
    rows = (out / "report_table.csv").read_text().splitlines()[1:]
    for row in rows:
        regime, base, new, imp = row.split(",")[:4]
        assert float(imp) == pytest.approx((float(base) - float(new)) / float(base), rel=1e-12)
        full = serialize.load(out / f"surrogate_{regime}.json")["meta"]["training_loss"]
        assert float(new) == full


def test_sensitivity_json_single_line(tmp_path):
    (tmp_path / "l.csv").write_text("from,to,r_pu,x_pu\n0,1,0.1,0.2\n")
    (tmp_path / "b.csv").write_text("id,kind,p_pu,q_pu,qmin_pu,qmax_pu,vmin_pu,vmax_pu\n"
                                    "0,substation,,,,,,\n1,generator,-0.3,0,-0.4,0.4,0.95,1.05\n")
    args = ["build", "--feeder", str(tmp_path / "l.csv"), "--buses", str(tmp_path / "b.csv"), "--out", str(tmp_path)]
    assert main(args) == 0
    d = serialize.load(tmp_path / "sensitivity.json")
    assert d["Xtilde"] == [[0.2]]
    first = (tmp_path / "sensitivity.json").read_bytes()
    assert main(args) == 0
    assert (tmp_path / "sensitivity.json").read_bytes() == first


def test_malformed_header_exit_code(tmp_path):
    (tmp_path / "l.csv").write_text("from,to,r_pu,reactance\n0,1,0.1,0.2\n")
    (tmp_path / "b.csv").write_text("id,kind,p_pu,q_pu,qmin_pu,qmax_pu,vmin_pu,vmax_pu\n0,substation,,,,,,\n")
    proc = subprocess.run([sys.executable, "-m", "voltvar.cli", "build", "--feeder", str(tmp_path / "l.csv"),
                           "--buses", str(tmp_path / "b.csv"), "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert "x_pu" in proc.stderr


def test_zero_scenarios_gives_header_only(tmp_path, pipeline):
    src = pipeline[0] / "a"
    cfg = tmp_path / "c.cfg"
    cfg.write_text("samples_per_step = 0\n")
    assert main(["label", "--feeder", str(src / "lines.csv"), "--buses", str(src / "buses.csv"),
                 "--profiles", str(src / "profiles.csv"), "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "scenarios.csv").read_text() == "id,step,bus,p_pu,q_pu,qinit_pu\n"


def test_report_on_empty_dir_fails(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == 2


def test_missing_file_and_bad_config(tmp_path):
    assert main(["build", "--feeder", str(tmp_path / "nope.csv"), "--buses", str(tmp_path / "nope.csv"),
                 "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("epochs five\n")
    assert main(["report", "--config", str(bad), "--out", str(tmp_path)]) == 2


def test_uncertified_simulation_needs_eps(tmp_path, pipeline):
    src = pipeline[0] / "a"
    d = serialize.load(src / "surrogate_rpsc.json")
    d["regime"] = "CVP-SC"
    for f in d["functions"]:
        f["phi"]["output_weights"] = [w * 100 for w in f["phi"]["output_weights"]]
        f["phi"]["slope_cap"] = None
    serialize.dump(d, tmp_path / "s.json")
    f = ["--feeder", str(src / "lines.csv"), "--buses", str(src / "buses.csv")]
    assert main(["simulate", *f, "--surrogate", str(tmp_path / "s.json"), "--out", str(tmp_path)]) == 1
