import json
from pathlib import Path

import pytest

from sonoclip.cli import SUBCOMMANDS, main

CONFIG = Path(__file__).parent / "data" / "tiny_pipeline.yaml"


def run(out, *args):
    return main([*args, "--config", str(CONFIG), "--out-dir", str(out)])


def artifacts(out, stage):
    return {a["path"]: a["sha256"] for a in json.loads((out / stage / "artifacts.json").read_text())["artifacts"]}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipeline")
    codes = {c: run(out, c) for c in SUBCOMMANDS}
    return out, codes


def test_every_stage_succeeds(pipeline):
    out, codes = pipeline
    assert codes == {c: 0 for c in SUBCOMMANDS}
    for c in SUBCOMMANDS:
        assert (out / c / "artifacts.json").exists()
        assert (out / c / "config.yaml").exists()


def test_manifest_hashes_match_files(pipeline):
    from sonoclip.cli import sha256

    out, _ = pipeline
    for path, digest in artifacts(out, "curate").items():
        assert sha256(out / "curate" / path) == digest


def test_zeroshot_report_has_per_class_f1(pipeline):
    out, _ = pipeline
    rep = json.loads((out / "zeroshot" / "view_report.json").read_text())
    assert set(rep["per_class_f1"]) == set(rep["classes"])
    assert 0 <= rep["macro_f1"] <= 1


def test_probe_runs_recorded(pipeline):
    out, _ = pipeline
    runs = [json.loads(l) for l in (out / "probe" / "runs.jsonl").read_text().splitlines()]
    assert {r["task"] for r in runs} >= {"view"}
    assert all(r["timestamp"] is None for r in runs)


def test_phantom_patient_count(tmp_path):
    assert run(tmp_path, "phantom", "--n-patients", "10") == 0
    rows = [json.loads(l) for l in (tmp_path / "phantom" / "manifest.jsonl").read_text().splitlines()]
    assert len({r["patient_id"] for r in rows}) == 10


def test_rerun_is_byte_identical(pipeline):
    out, _ = pipeline
    for c in SUBCOMMANDS:
        before = artifacts(out, c)
        assert run(out, c) == 0
        assert artifacts(out, c) == before, c


def test_unknown_flag_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run(tmp_path, "phantom", "--colour", "blue")
    assert exc.value.code == 2
    assert not any(tmp_path.iterdir())


def test_unknown_subcommand(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["dance", "--out-dir", str(tmp_path)])
    assert exc.value.code == 2


def test_config_error_exits_one(tmp_path, capsys):
    assert run(tmp_path, "phantom", "--set", "phantom.n_patients=-1") == 1
    assert "phantom.n_patients" in capsys.readouterr().err
    assert not any(tmp_path.iterdir())


def test_missing_upstream_stage(tmp_path, capsys):
    assert run(tmp_path, "pretrain") == 1
    assert "run `curate` first" in capsys.readouterr().err
