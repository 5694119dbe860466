import json

import numpy as np
import pytest

from fmapguard.cli import main
from fmapguard.formats import (load_model, read_convergence, read_csv, read_distances, read_efficacy, read_plan,
                               read_profile, read_records, read_split)
from fmapguard.metrics import HEURISTICS
from fmapguard.protection import HardenedNetwork
from pipeline import PRIMARY_OUTPUTS, cwd, run, run_pipeline


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("run"), inj=64)


def test_pipeline_outputs(run_dir):
    for name in PRIMARY_OUTPUTS:
        assert (run_dir / name).is_file(), name
    prof = read_profile(run_dir / "profile.csv")
    assert sum(len(m) for m in prof.mins) == 24
    es = read_records(run_dir / "records_es_fxp-flip.csv")
    assert len(es) == 64 * 24 and es.meta["split"] == "ES"
    sp = read_split(run_dir / "split.csv")
    assert set(np.unique(es.image)) <= set(sp.es_image_ids)
    dist = read_distances(run_dir / "distances.csv")
    assert set(HEURISTICS) <= set(dist) and "delta_loss_es_fxp-flip" in dist
    conv = read_convergence(run_dir / "convergence.csv")
    assert [r.inj_per_fmap for r in conv] == [16, 16, 32, 32, 64, 64]
    plan = read_plan(run_dir / "plan.json")
    assert plan.predicted_coverage >= 0.9 - 1e-9
    h = load_model(run_dir / "hardened.json")
    assert isinstance(h, HardenedNetwork) and set(h.protected_fmaps) == set(plan.selected_fmaps)
    eff = read_efficacy(run_dir / "efficacy.csv")
    assert eff["residual_mismatch_fraction"] <= eff["baseline_mismatch_fraction"]
    assert 0 <= eff["actual_coverage"] <= 1
    report = read_csv(run_dir / "report.csv", "report")
    assert any(r[1] == "improvement_factor" for r in report.rows)


def test_artifacts_carry_provenance(run_dir):
    doc = read_csv(run_dir / "records_ts_fxp-flip.csv", "records")
    assert doc.meta["manifest"] == "inject.manifest.json"
    man = json.loads((run_dir / "oracle" / "inject.manifest.json").read_text())
    assert man["stage"] == "inject" and "campaign" in man["timings"]
    assert man["outputs"]["records_ts_fxp-flip.csv"]
    assert "profile.csv" in man["inputs"]


def test_config_file_and_flag_precedence(tmp_path, run_dir):
    (tmp_path / "cfg.json").write_text(json.dumps({"inj-per-fmap": 4, "split": "es", "seed": 0}))
    (tmp_path / "profile.csv").write_bytes((run_dir / "profile.csv").read_bytes())
    with cwd(tmp_path):
        run("inject", "--config", "cfg.json", "--profile", "profile.csv", "--inj-per-fmap", 8)
    recs = read_records(tmp_path / "records_es_fxp-flip.csv")
    assert len(recs) == 8 * 24


def test_train_stage(tmp_path):
    with cwd(tmp_path):
        run("train", "--epochs", 1, "--seed", 3)
    doc = read_csv(tmp_path / "training.csv", "summary")
    acc = dict(doc.rows)
    assert 0 < float(acc["test_accuracy"]) <= 1
    assert load_model(tmp_path / "model.json").class_count == 10


def test_exit_codes(tmp_path, run_dir):
    with cwd(tmp_path):
        assert main(["inject", "--split", "ts"]) == 5  # missing --profile
        (tmp_path / "bad.csv").write_text("garbage\n")
        assert main(["inject", "--profile", "bad.csv"]) == 3
        (tmp_path / "v9.csv").write_text("#schema=profile/9\nlayer,channel,min,max,scale\n")
        assert main(["inject", "--profile", "v9.csv"]) == 4
        assert main(["inject", "--profile", "missing.csv"]) == 3
        assert main(["train", "--epochs", "1", "--lr", "1e30"]) == 6
        assert main(["compare"]) == 5
        with pytest.raises(SystemExit) as exc:
            main(["inject", "--error-model", "laser"])
        assert exc.value.code == 2
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "fmapguard" in capsys.readouterr().out


def test_console_script_installed():
    import shutil
    import subprocess

    exe = shutil.which("fmapguard")
    if exe is None:
        pytest.skip("package not installed with its console script")
    out = subprocess.run([exe, "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "inject" in out.stdout
