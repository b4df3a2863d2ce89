import json

import numpy as np
import pytest

from qnn.core.container import write_matrix
from qnn.pipeline.cli import main

from pipecases import fast_config


def write_cfg(path, cfg_or_dict):
    d = cfg_or_dict if isinstance(cfg_or_dict, dict) else cfg_or_dict.to_dict()
    path.write_text(json.dumps(d))
    return str(path)


@pytest.fixture
def cfg_file(tmp_path):
    return write_cfg(tmp_path / "cfg.json", fast_config(tmp_path / "out"))


def last_json(text):
    return json.loads(text[text.index("{"):])


def test_train_eval_bench(cfg_file, tmp_path, capsys):
    assert main(["train", "--config", cfg_file]) == 0
    trained = last_json(capsys.readouterr().out)
    assert (tmp_path / "out" / "model.qnnf").exists()
    assert main(["eval", "--config", cfg_file]) == 0
    assert last_json(capsys.readouterr().out)["accuracy"] == trained["accuracy"]
    assert main(["bench", "--config", cfg_file, "--repeats", "0"]) == 0
    rep = last_json(capsys.readouterr().out)
    assert rep["memory_ratio"] > 1 and (tmp_path / "out" / "bench_timing.json").exists()


def test_slim_prune_retrain_distill(cfg_file, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["slim", "--config", cfg_file, "--lam", "0.01"]) == 0
    assert main(["prune", "--config", cfg_file, "--threshold", "0.02"]) == 0
    report = json.loads((out / "prune_report.json").read_text())
    assert report["threshold"] == 0.02 and report["lam"] == 0.01
    assert main(["retrain", "--config", cfg_file]) == 0
    assert json.loads((out / "prune_report.json").read_text())["acc_R"] is not None
    assert main(["train", "--config", cfg_file]) == 0
    assert main(["distill", "--config", cfg_file, "--teacher", str(out / "model.qnnf"), "--tau", "4"]) == 0
    assert capsys.readouterr().out.splitlines()[-2].split()[0] == "reg"


def test_embed_writes_state_and_trace(tmp_path, capsys):
    Y = np.random.default_rng(0).standard_normal((60, 8))
    write_matrix(tmp_path / "feat.bin", Y)
    cfg = write_cfg(tmp_path / "c.json", fast_config(tmp_path / "out", embed_m=8, embed_rounds=3))
    assert main(["embed", "--config", cfg, "--features", str(tmp_path / "feat.bin")]) == 0
    res = last_json(capsys.readouterr().out)
    assert res["n"] == 8 and res["m"] == 8
    trace = (tmp_path / "out" / "embed_trace.csv").read_text().splitlines()
    assert trace[0] == "round,before_b,after_b,objective,kept" and len(trace) == 4
    state = np.load(tmp_path / "out" / "embed_state.npz")
    assert "P" in state.files


def test_sweep_and_pipeline(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", fast_config(tmp_path / "out", epochs=0, widths=[1], bits=[1]))
    assert main(["sweep", "--config", cfg]) == 0
    assert capsys.readouterr().out.startswith("bits,width,paras(M),accuracy")
    assert main(["pipeline", "--config", cfg, "--stop-after", "widen"]) == 0
    assert (tmp_path / "out" / "widened_spec.json").exists()


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("QNN_OUTPUT_ROOT", str(tmp_path / "root"))
    cfg = write_cfg(tmp_path / "c.json", fast_config("rel", epochs=0))
    assert main(["train", "--config", cfg]) == 0
    assert (tmp_path / "root" / "rel" / "model.qnnf").exists()


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["train", "--config", write_cfg(tmp_path / "a.json", {"bogus": 1})]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["eval", "--config", write_cfg(tmp_path / "b.json", fast_config(tmp_path / "o"))]) == 2
    assert main(["distill", "--config", write_cfg(tmp_path / "c.json", fast_config(tmp_path / "o"))]) == 2
    assert main(["embed", "--config", write_cfg(tmp_path / "d.json", fast_config(tmp_path / "o"))]) == 2
    assert "qnn embed:" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_3(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", fast_config(tmp_path / "o", lr=1e6, model_options={"base": 2}))
    assert main(["train", "--config", cfg]) == 3
    assert main(["pipeline", "--config", cfg]) == 3


def test_bad_subcommand_usage():
    with pytest.raises(SystemExit) as exc:
        main(["fly", "--config", "x"])
    assert exc.value.code == 2
