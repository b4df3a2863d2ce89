import json
import shutil
import struct

import numpy as np
import pytest

from qnn import slim
from qnn.core.spec import ModelSpec, build_template
from qnn.errors import ConfigError, ParseError, StageError
from qnn.pipeline import ExperimentConfig, load_dataset, run_full_pipeline, run_width_sweep
from qnn.pipeline.data import augment, load_digits, parse_csv, parse_idx, read_idx, write_idx

from oracles import closed_form_params
from pipecases import REPORT_FILES, fast_config


# -- datasets ----------------------------------------------------------------

def test_blobs_seeded():
    a, b = load_dataset("blobs", seed=7), load_dataset("blobs", seed=7)
    assert np.array_equal(a.x_train, b.x_train) and np.array_equal(a.y_test, b.y_test)
    assert len(a.x_train) + len(a.x_test) == 200 and set(np.unique(a.y_train)) == {0, 1}
    assert not np.array_equal(a.x_train, load_dataset("blobs", seed=8).x_train)


def test_spirals_shape():
    d = load_dataset("spirals", seed=0, n=100)
    assert d.input_shape == (2,) and d.num_classes == 2


def test_train_split_is_standardised():
    d = load_dataset("blobs", seed=1)
    np.testing.assert_allclose(d.x_train.mean(0), 0, atol=1e-12)
    np.testing.assert_allclose(d.x_train.std(0), 1, atol=1e-12)


def test_idx_bad_magic_offset_zero():
    with pytest.raises(ParseError) as exc:
        parse_idx(b"\x01\x00\x08\x01\x00\x00\x00\x01\x05")
    assert exc.value.offset == 0


def test_idx_truncated_and_trailing():
    good = bytes([0, 0, 8, 1]) + struct.pack(">I", 3) + b"\x01\x02\x03"
    assert parse_idx(good).tolist() == [1, 2, 3]
    with pytest.raises(ParseError, match="truncated"):
        parse_idx(good[:-1])
    with pytest.raises(ParseError, match="trailing"):
        parse_idx(good + b"\x00")
    with pytest.raises(ParseError) as exc:
        parse_idx(bytes([0, 0, 0x42, 1]))
    assert exc.value.offset == 2


def test_idx_round_trip_and_directory(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (20, 6, 6)).astype(np.uint8)
    labels = (np.arange(20) % 3).astype(np.uint8)
    write_idx(tmp_path / "train-images-idx3-ubyte", imgs)
    write_idx(tmp_path / "train-labels-idx1-ubyte", labels)
    write_idx(tmp_path / "t10k-images-idx3-ubyte", imgs[:6])
    write_idx(tmp_path / "t10k-labels-idx1-ubyte", labels[:6])
    assert np.array_equal(read_idx(tmp_path / "train-images-idx3-ubyte"), imgs)
    d = load_dataset("idx", tmp_path)
    assert d.x_train.shape == (20, 1, 6, 6) and d.num_classes == 3


def test_idx_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_dataset("idx", tmp_path)


def test_csv_two_features_and_label(tmp_path):
    path = tmp_path / "toy.csv"
    path.write_text("a,b,label\n0.5,1.0,0\n-1,2,1\n3,0.25,1\n2,2,0\n")
    x, y = parse_csv(path.read_bytes(), n_features=2)
    assert x.shape == (4, 2) and set(y) == {0, 1}
    d = load_dataset("csv", path, test_fraction=0.5)
    assert d.x_train.shape[1:] == (2,) and len(d.x_train) + len(d.x_test) == 4


def test_csv_errors_carry_offsets():
    with pytest.raises(ParseError) as exc:
        parse_csv(b"1,2,0\n1,2\n")
    assert exc.value.offset == 6
    with pytest.raises(ParseError, match="non-negative integer"):
        parse_csv(b"1,2,0.5\n")
    with pytest.raises(ParseError, match="expected 3 features"):
        parse_csv(b"1,2,0\n", n_features=3)


def test_unknown_dataset():
    with pytest.raises(ConfigError):
        load_dataset("cifar")


def test_digits_splits():
    d = load_digits()
    assert len(d.x_train) + len(d.x_test) == 1797 and d.input_shape == (1, 8, 8)
    assert d.y_train.min() >= 0 and d.y_train.max() < 10
    assert d.augmenter() is None


def test_augmentation_keeps_shape_and_flips():
    x = np.arange(2 * 1 * 3 * 3, dtype=float).reshape(2, 1, 3, 3)
    out = augment(x, np.random.default_rng(0), crop=1, mirror=True)
    assert out.shape == x.shape
    flipped = augment(x, np.random.default_rng(1), mirror=True)
    for a, b in zip(flipped, x):
        assert np.array_equal(a, b) or np.array_equal(a, b[..., ::-1])
    assert load_digits(crop=1).augmenter() is not None


# -- config -----------------------------------------------------------------------

def test_config_rejects_unknown_keys_and_bad_values(tmp_path):
    with pytest.raises(ConfigError, match="unknown config keys"):
        ExperimentConfig.from_dict({"lamda": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig(seeds=[])
    with pytest.raises(ConfigError):
        ExperimentConfig(dataset_path=str(tmp_path / "missing"))
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(p)


def test_output_root_env(monkeypatch, tmp_path):
    cfg = ExperimentConfig(output_dir="runs/x")
    monkeypatch.setenv("QNN_OUTPUT_ROOT", str(tmp_path))
    assert cfg.output_path == tmp_path / "runs/x"
    assert ExperimentConfig(output_dir=str(tmp_path / "abs")).output_path == tmp_path / "abs"


# -- width sweep ----------------------------------------------------------------

def test_zero_epoch_sweep_params_exact(tmp_path):
    cfg = fast_config(tmp_path, epochs=0, widths=[1, 2], bits=[1])
    rows = run_width_sweep(cfg, tmp_path / "sweep.csv")
    for row in rows:
        spec = slim.widen(build_template("toy_resnet", base=2, weight_bits=1, act_bits=1), row["width"])
        assert row["params"] == spec.param_count()
        assert row["accuracy"] < 30
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == "bits,width,paras(M),accuracy" and len(lines) == 3


def test_width_two_quadruples_hidden_conv_weights():
    one = build_template("toy_resnet", base=4)
    two = slim.widen(one, 2)
    for a, b in zip(one.layers, two.layers):
        if a.kind == "residual-block":
            assert b.weight_count() == 4 * a.weight_count()
    assert two.layers[0].weight_count() == 2 * one.layers[0].weight_count()  # 1 input channel
    assert two.layers[-1].out_channels == one.layers[-1].out_channels


# -- full pipeline ----------------------------------------------------------------

def read_reports(root):
    return {name: (root / name).read_bytes() for name in REPORT_FILES}


def test_pipeline_artifacts(tmp_path):
    report = run_full_pipeline(fast_config(tmp_path / "run"))
    run = tmp_path / "run"
    for name in REPORT_FILES + ("bench_timing.json", "final_packed.qnnf", "reconciled_spec.json"):
        assert (run / name).exists(), name
    assert "speedup" not in (run / "bench.json").read_text()
    final = ModelSpec.from_json((run / "reconciled_spec.json").read_text())
    assert report["final"]["params"] == closed_form_params(final)
    assert json.loads((run / "eval.json").read_text())["params_counted"] == closed_form_params(final)
    assert report["final"]["accuracy"] == report["final"]["accuracy_packed"]
    assert "gap" in report["summary"]


def test_resume_after_prune_matches(tmp_path):
    cfg = fast_config(tmp_path / "run")
    run_full_pipeline(cfg)
    straight = read_reports(tmp_path / "run")
    shutil.rmtree(tmp_path / "run")
    assert run_full_pipeline(cfg, stop_after="prune") is None
    assert not (tmp_path / "run" / "report.json").exists()
    run_full_pipeline(cfg)
    assert read_reports(tmp_path / "run") == straight


def test_degenerate_config_reduces_to_plain_training(tmp_path):
    cfg = fast_config(tmp_path / "run", lam=0.0, threshold=0.0, distill=False)
    report = run_full_pipeline(cfg)
    run = tmp_path / "run"
    assert report["prune"]["ratio"] == 0
    assert json.loads((run / "reconciled_spec.json").read_text()) == json.loads((run / "widened_spec.json").read_text())
    # same spec, seed and schedule: the retrained model is the plainly trained one
    assert report["prune"]["acc_R"] == report["sparse"] == report["prune"]["acc_O"]


def test_stage_failure_names_stage(tmp_path):
    cfg = fast_config(tmp_path / "run")
    run_full_pipeline(cfg, stop_after="sparse")
    (tmp_path / "run" / "sparse.qnnf").unlink()
    with pytest.raises(StageError) as exc:
        run_full_pipeline(cfg)
    assert exc.value.stage == "prune"
    assert (tmp_path / "run" / "stages" / "sparse.done").exists()


def test_pruned_binary_model_close_to_full_precision(tmp_path):
    report = run_full_pipeline(ExperimentConfig(output_dir=str(tmp_path / "run")))
    final = report["final"]
    print(report["summary"])
    assert final["param_ratio_vs_baseline"] <= 3
    assert final["accuracy"] >= report["baseline"]["accuracy"] - 2
