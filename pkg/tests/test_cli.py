import json
import subprocess
import sys
from pathlib import Path

import pytest

from advttt.cli import main, parse_argv
from advttt.config import ExperimentConfig, build_config, derive_seed, key_reference, read_config_file
from advttt.errors import ConfigurationError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_defaults_give_40_patient_split():
    cfg = ExperimentConfig()
    assert cfg.data.n_patients == 40 and tuple(cfg.data.fractions) == (0.4, 0.2, 0.4)


def test_precedence_and_includes(tmp_path):
    base = tmp_path / "base.conf"
    base.write_text("train.learning_rate = 1e-3\nrun.seed = 4\n")
    top = tmp_path / "top.conf"
    top.write_text("include = base.conf\n# later lines win\nrun.seed = 5  # trailing comment\n")
    cfg = build_config(str(top), {"run.seed": "9"})
    assert cfg.train.learning_rate == 1e-3 and cfg.run.seed == 9
    assert build_config(str(top)).run.seed == 5


def test_unknown_and_bad_keys(tmp_path):
    with pytest.raises(ConfigurationError):
        build_config(None, {"train.lr": "1"})
    with pytest.raises(ConfigurationError):
        build_config(None, {"train.batch_size": "twelve"})
    loop = tmp_path / "loop.conf"
    loop.write_text("include = loop.conf\n")
    with pytest.raises(ConfigurationError):
        read_config_file(loop)


def test_text_round_trip(tmp_path):
    cfg = build_config(str(CONFIGS / "desk.conf"))
    path = tmp_path / "snap.conf"
    path.write_text(cfg.to_text())
    assert build_config(str(path)) == cfg
    assert {k for k, _, _ in key_reference()} == set(cfg.flat())


def test_parse_is_pure():
    argv = ["ttt", "--config", str(CONFIGS / "smoke.conf"), "--seed", "3", "--shift", "gamma=1.5", "--mode", "both"]
    c1, cfg1 = parse_argv(argv)
    c2, cfg2 = parse_argv(argv)
    assert (c1, cfg1) == (c2, cfg2)
    assert cfg1.shift.gamma == 1.5 and cfg1.ttt.mode == "both" and cfg1.run.seed == 3


def test_seed_fan_out():
    assert derive_seed(0, "data") == derive_seed(0, "data") != derive_seed(0, "train")
    assert derive_seed(0, "data") != derive_seed(1, "data")


def _run(tmp, *args, capsys=None):
    code = main([args[0], "--config", str(CONFIGS / "smoke.conf"), "--run-dir", str(tmp), *args[1:]])
    return code


def test_missing_checkpoint_error(tmp_path, capsys):
    assert _run(tmp_path, "ttt") == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"]["code"] == "MISSING_CHECKPOINT"
    manifest = json.loads((tmp_path / "manifests" / "ttt.json").read_text())
    assert manifest["status"] == "failed"


def test_pipeline(tmp_path, capsys):
    assert _run(tmp_path, "synth") == 0
    index = json.loads((tmp_path / "dataset" / "dataset.json").read_text())
    assert index["shift"]["gamma"] == 1.3
    assert _run(tmp_path, "synth") == 1  # refuses to overwrite
    assert json.loads(capsys.readouterr().err.splitlines()[-1])["error"]["code"] == "TARGET_EXISTS"
    for cmd in ("train", "ttt", "continual", "eval"):
        assert _run(tmp_path, cmd) == 0, cmd
    assert _run(tmp_path, "diagnose", "--set", "diagnose.window=2") == 0
    report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert report["mode"] in ("discriminative", "equilibrium", "memorization", "forgetting-collapse", "undetermined")

    header = (tmp_path / "eval" / "metrics.csv").read_text().splitlines()[0]
    assert header == "patient_id,phase,class,dice,iou,hausdorff"
    summary = json.loads((tmp_path / "eval" / "summary.json").read_text())
    assert set(summary) == {"stats", "deltas", "p_values"}
    subjects = list((tmp_path / "ttt" / "subjects").glob("*.json"))
    assert len(subjects) == 4 and "n_iter" in json.loads(subjects[0].read_text())
    m = json.loads((tmp_path / "manifests" / "train.json").read_text())
    assert m["status"] == "ok" and "checkpoint" in m["artifacts"] and m["config"]["run.seed"] == "0"

    before = (tmp_path / "ttt" / "results.csv").read_bytes()
    assert _run(tmp_path, "ttt", "--jobs", "2") == 0
    assert (tmp_path / "ttt" / "results.csv").read_bytes() == before


def test_diagnose_equilibrium_csv(tmp_path, capsys):
    rows = ["epoch,split,loss_name,value"]
    for e in range(12):
        for s in ("train", "val"):
            for n in ("disc_real", "disc_fake"):
                rows.append(f"{e},{s},{n},{1.0 + 0.01 * (-1) ** e}")
    (tmp_path / "history.csv").write_text("\n".join(rows) + "\n")
    assert main(["diagnose", "--run-dir", str(tmp_path)]) == 0
    assert json.loads(capsys.readouterr().out.strip())["mode"] == "equilibrium"


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "advttt", "eval", "--run-dir", str(tmp_path)], capture_output=True, text=True)
    assert out.returncode == 1
    assert json.loads(out.stderr.strip().splitlines()[-1])["error"]["code"] == "MISSING_DATASET"
