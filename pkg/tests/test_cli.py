import json

import numpy as np
import pytest

from ampse.cli.main import main
from ampse.cli.config import parse_config
from ampse.cli.package import export_package, import_package
from ampse.errors import HashMismatch, ParseError, UnknownKey, VersionUnsupported
from ampse.oracle import apply_stage
from ampse.surrogate import sample_points

FAST = {
    "sampling": {"n_samples": 120},
    "training": {"epochs": 150, "patience": 0},
    "transfer": {"n_samples": 30, "epochs": 100},
    "search": {"n_starts": 8, "max_iters": 60, "keep_top_k": 4, "oracle_budget": 10},
}


def write_config(tmp_path, **extra):
    doc = json.loads(json.dumps(FAST))
    for k, v in extra.items():
        if isinstance(v, dict):
            doc.setdefault(k, {}).update(v)
        else:
            doc[k] = v
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return path


def run_cli(*argv):
    return main([str(a) for a in argv])


def test_unknown_key_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"search": {"n_strats": 3}}))
    assert run_cli("run", "--config", path) == 2
    assert "search.n_strats" in capsys.readouterr().err


def test_parse_error_position(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"seed": 1,\n "out": }')
    with pytest.raises(ParseError) as exc:
        parse_config(path)
    assert "2:" in str(exc.value)


def test_bad_type_and_missing_testbench(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"sampling": {"n_samples": "many"}}))
    with pytest.raises(ParseError):
        parse_config(path)
    path.write_text(json.dumps({"testbench": "nowhere.json"}))
    with pytest.raises(ParseError):
        parse_config(path)
    path.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(UnknownKey):
        parse_config(path)


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("runs")
    cfg = write_config(base)
    outs = []
    for name in ("a", "b"):
        out = base / name
        assert run_cli("run", "--config", cfg, "--out", out, "--seed", 3) == 0
        outs.append(out)
    return outs


def _artifacts(out):
    return sorted(p.relative_to(out) for p in out.rglob("*") if p.is_file())


def test_run_artifacts(pipeline_runs):
    out = pipeline_runs[0]
    names = {str(p) for p in _artifacts(out)}
    for want in ("testbench.json", "mlg.txt", "models/models.ampse", "search/global.csv", "search/refined.csv",
                 "report/ranked.csv", "report/summary.json", "manifest.json", "config.resolved.json"):
        assert want in names, want
    summary = json.loads((out / "report" / "summary.json").read_text())
    assert summary["n_feasible_oracle"] >= 1


def test_runs_byte_identical(pipeline_runs):
    a, b = pipeline_runs
    assert _artifacts(a) == _artifacts(b)
    for rel in _artifacts(a):
        if rel.name in ("manifest.json", "config.resolved.json"):
            continue  # these echo the output directory
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_export_import_parity(pipeline_runs, sar6, tmp_path):
    pkg = import_package(pipeline_runs[0] / "models" / "models.ampse", sar6)
    assert not pkg.requires_tl
    path = export_package(pkg.models, pkg.testbench, tmp_path / "m.ampse", pkg.provenance)
    again = import_package(path)
    for mid, m in pkg.models.items():
        X = sample_points(sar6.module(mid).input_space(), "uniform", 20, 1)
        np.testing.assert_allclose(again.models[mid].predict_array(X), m.predict_array(X), rtol=1e-12, atol=0)


def test_tampered_package_rejected(pipeline_runs, tmp_path):
    raw = (pipeline_runs[0] / "models" / "models.ampse").read_bytes()
    head, _, body = raw.partition(b"\n")
    i = body.index(b"0.", len(body) // 2)
    flipped = body[:i] + (b"1." if body[i:i + 1] == b"0" else b"0.") + body[i + 2:]
    bad = tmp_path / "bad.ampse"
    bad.write_bytes(head + b"\n" + flipped)
    with pytest.raises(HashMismatch):
        import_package(bad)
    (tmp_path / "v.ampse").write_bytes(raw.replace(b"ampse-model/1", b"ampse-model/9", 1))
    with pytest.raises(VersionUnsupported):
        import_package(tmp_path / "v.ampse")


def test_import_command_flags_tl(pipeline_runs, tmp_path, capsys):
    lay_tb = tmp_path / "layout.json"
    from ampse.oracle import load_testbench, save_testbench
    save_testbench(apply_stage(load_testbench("builtin:sar6"), "layout"), lay_tb)
    pkg = pipeline_runs[0] / "models" / "models.ampse"
    assert run_cli("import", pkg, "--testbench", lay_tb) == 0
    assert json.loads(capsys.readouterr().out.strip())["requires_tl"] is True


def test_export_subcommand(pipeline_runs, tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert run_cli("export", tmp_path / "copy.ampse", "--config", cfg, "--out", pipeline_runs[0], "--seed", 3) == 0
    assert import_package(tmp_path / "copy.ampse").testbench.id == "sar6"


def test_layout_run_with_transfer_and_cepa(tmp_path):
    cfg = write_config(tmp_path, stage="layout", cepa={"enabled": True, "n_train": 200, "epochs": 60})
    assert run_cli("run", "--config", cfg, "--out", tmp_path / "o") == 0
    assert (tmp_path / "o" / "models" / "models_tl.ampse").exists()
    assert json.loads((tmp_path / "o" / "cepa" / "report.json").read_text())["accuracy"] > 0.5


def test_stage_failure_exit_code(tmp_path, capsys):
    cfg = write_config(tmp_path, specs={"nonexistent_spec": 1.0})
    assert run_cli("run", "--config", cfg, "--out", tmp_path / "o") in (2, 3)
