import csv
import json

import numpy as np
import pytest

import occdet
from occdet.dacconv import DacLayer
from occdet.errors import InvalidSpec, MissingCheckpoint, ShapeMismatch
from occdet.harness.checkpoint import checkpoint_bytes, load_checkpoint, save_checkpoint
from occdet.harness.cli import main
from occdet.harness.commands import bench_workload, cmd_eval_occlusion, validate_occlusion_report
from occdet.harness.config import ExperimentConfig
from occdet.tensor import LayerGrad
from occdet.toy.detector import DetectorSpec, build_detector


def tiny_config(tmp_path, **over):
    cfg = dict(train_scenes=8, eval_scenes=6, epochs=2, seeds=[0, 1, 2], channels=[4, 8, 8],
               dac_depth=12, output_dir=str(tmp_path / "runs"))
    cfg.update(over)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


# --- config -------------------------------------------------------------------------

def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig(seeds=[3, 4, 5], pool2d="soft", dac_depth=None, checkpoint_dir="ck")
    cfg.save(tmp_path / "c.json")
    back = ExperimentConfig.load(tmp_path / "c.json")
    assert back == cfg and back.hash() == cfg.hash()


def test_config_rejects_unknown_keys():
    with pytest.raises(InvalidSpec):
        ExperimentConfig.from_dict({"epochs": 3, "learning_rate": 0.1})


@pytest.mark.parametrize("bad", [{"epochs": 0}, {"fusion": "concat"}, {"optimizer": "lbfgs"},
                                 {"slots": ["conv", "conv"]}])
def test_config_validation(bad):
    with pytest.raises(InvalidSpec):
        ExperimentConfig.from_dict(bad)


def test_config_hash_tracks_content():
    assert ExperimentConfig().hash() == ExperimentConfig().hash()
    assert ExperimentConfig().hash() != ExperimentConfig(epochs=3).hash()


# --- checkpoint -----------------------------------------------------------------------

@pytest.mark.parametrize("spec", [DetectorSpec(slots=("dac", "conv", "eaconv"), dac_depth=12, dac_head=True),
                                  DetectorSpec(mefem=True)])
def test_checkpoint_save_load_save_is_byte_identical(tmp_path, spec):
    det = build_detector(spec, 7)
    for _, p, _ in det.named_params():  # awkward values: subnormals, negative zero, long mantissas
        p[...] = np.random.default_rng(1).normal(size=p.shape) / 3.0
    first = det.named_params()[0][1]
    first.flat[0], first.flat[-1] = -0.0, 5e-324
    rng_state = np.random.default_rng([7, 7]).bit_generator.state
    path = save_checkpoint(tmp_path / "a.json", det, ExperimentConfig().to_dict(), rng_state)
    fresh = build_detector(spec, 99)
    config, state = load_checkpoint(path, fresh)
    assert state == rng_state and config == ExperimentConfig().to_dict()
    save_checkpoint(tmp_path / "b.json", fresh, config, state)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    for (_, a, _), (_, b, _) in zip(det.named_params(), fresh.named_params()):
        assert a.tobytes() == b.tobytes()


def test_checkpoint_rejects_other_architecture(tmp_path):
    path = save_checkpoint(tmp_path / "a.json", build_detector(DetectorSpec(), 0))
    with pytest.raises(ShapeMismatch):
        load_checkpoint(path, build_detector(DetectorSpec(channels=(8, 16, 32)), 0))
    with pytest.raises(ShapeMismatch):
        load_checkpoint(path, build_detector(DetectorSpec(slots=("dac", "conv", "conv")), 0))


def test_checkpoint_missing(tmp_path):
    with pytest.raises(MissingCheckpoint):
        load_checkpoint(tmp_path / "nope.json", build_detector(DetectorSpec(), 0))


def test_checkpoint_refreshes_dac_fold(tmp_path):
    spec = DetectorSpec(slots=("dac", "conv", "conv"))
    src, dst = build_detector(spec, 0), build_detector(spec, 1)
    dst.backbone[0].fold()
    load_checkpoint(save_checkpoint(tmp_path / "a.json", src), dst)
    image = np.random.default_rng(0).normal(size=(1, 32, 32))
    assert src.predict_raw(image)[1].tobytes() == dst.predict_raw(image)[1].tobytes()


def test_checkpoint_bytes_are_deterministic():
    det = build_detector(DetectorSpec(), 3)
    assert checkpoint_bytes(det) == checkpoint_bytes(build_detector(DetectorSpec(), 3))


# --- commands via the CLI ------------------------------------------------------------------

def test_gradcheck_passes(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "gradcheck.json").read_text())
    assert report["failing"] == [] and report["version"] == occdet.__version__
    assert {r["layer"] for r in report["results"]} == set(ExperimentConfig().gradcheck_layers)
    assert len({r["seed"] for r in report["results"]}) >= 3
    assert "gradcheck: passed" in capsys.readouterr().out


def test_gradcheck_names_faulty_layer(tmp_path, monkeypatch, capsys):
    real = DacLayer.backward

    def flipped(self, x, grad_out):
        g = real(self, x, grad_out)
        return LayerGrad(g.d_input, [-d for d in g.d_params])

    monkeypatch.setattr(DacLayer, "backward", flipped)
    cfg = tiny_config(tmp_path, gradcheck_layers=["conv2d", "dacconv"])
    assert main(["gradcheck", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    out = capsys.readouterr().out
    assert "failing layers: dacconv" in out
    assert json.loads((tmp_path / "gradcheck.json").read_text())["failing"] == ["dacconv"]


def test_gradcheck_empty_layer_list(tmp_path, capsys):
    cfg = tiny_config(tmp_path, gradcheck_layers=[])
    assert main(["gradcheck", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert "0 layers" in capsys.readouterr().out


def test_bench_rp_report(tmp_path):
    assert main(["bench-rp", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "bench_rp.json").read_text())
    for key in ("rp_ops", "legacy_ops", "ratio", "peak_alloc_rp", "peak_alloc_legacy"):
        assert key in report
    assert report["ratio"] == report["rp_ops"] / report["legacy_ops"]
    assert len(report["workloads"]) == 9
    d = report["degenerate"]
    assert 0.5 <= d["rp_ops"] / d["legacy_ops"] <= 2.0


def test_bench_counts_are_deterministic():
    a, b = bench_workload(16, 4, 100), bench_workload(16, 4, 100)
    assert (a["rp_ops"], a["legacy_ops"]) == (b["rp_ops"], b["legacy_ops"])
    assert a["ratio"] <= 0.6


def test_train_compare_single_epoch_not_converged(tmp_path):
    cfg = tiny_config(tmp_path, epochs=1)
    assert main(["train-compare", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    report = json.loads((tmp_path / "train_compare.json").read_text())
    for run in report["runs"]:
        assert run["standard"]["epochs_to_converge"] is None
        assert run["dacconv"]["epochs_to_converge"] is None
    assert report["median_ratio"] is None


def test_train_compare_outputs_and_determinism(tmp_path):
    cfg = tiny_config(tmp_path, epochs=3)
    main(["train-compare", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["train-compare", "--config", str(cfg), "--out", str(tmp_path / "b")])
    a = (tmp_path / "a" / "train_compare.json").read_text()
    assert a == (tmp_path / "b" / "train_compare.json").read_text()
    rows = list(csv.DictReader((tmp_path / "a" / "train_compare_curves.csv").open()))
    assert len(rows) == 2 * 3 * 3
    assert {r["series"] for r in rows} == {"standard", "dacconv"}
    report = json.loads(a)
    assert report["config_hash"] == ExperimentConfig.load(cfg).hash()


def test_train_compare_needs_three_seeds(tmp_path):
    cfg = tiny_config(tmp_path, seeds=[0, 1])
    with pytest.raises(ValueError):
        main(["train-compare", "--config", str(cfg), "--out", str(tmp_path)])


def test_seed_flag_overrides_data_seed(tmp_path):
    cfg = tiny_config(tmp_path, gradcheck_layers=[])
    main(["gradcheck", "--config", str(cfg), "--seed", "77", "--out", str(tmp_path)])
    assert json.loads((tmp_path / "gradcheck.json").read_text())["config"]["data_seed"] == 77


@pytest.fixture(scope="module")
def occlusion_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("occ")
    cfg = ExperimentConfig(train_scenes=6, eval_scenes=6, epochs=1, seeds=[0, 1], channels=[4, 8, 8],
                           output_dir=str(root))
    result = cmd_eval_occlusion(cfg, root)
    return cfg, root, result


def test_eval_occlusion_report(occlusion_run):
    _, root, result = occlusion_run
    report = json.loads((root / "eval_occlusion.json").read_text())
    validate_occlusion_report(report)
    assert set(report["medians"]["with_mefem"]) == {"ap_easy", "ap_moderate", "ap_hard"}
    assert result.passed == report["hard_direction"]
    assert sorted(p.name for p in (root / "checkpoints").iterdir()) == [
        "with_mefem_seed0.json", "with_mefem_seed1.json", "without_mefem_seed0.json", "without_mefem_seed1.json"]


def test_eval_occlusion_from_checkpoints(occlusion_run, tmp_path):
    cfg, root, result = occlusion_run
    cfg2 = ExperimentConfig.from_dict({**cfg.to_dict(), "checkpoint_dir": str(root / "checkpoints")})
    again = cmd_eval_occlusion(cfg2, tmp_path)
    assert again.report["medians"] == result.report["medians"]


def test_eval_occlusion_missing_checkpoints(tmp_path):
    cfg = ExperimentConfig(seeds=[0], checkpoint_dir=str(tmp_path / "empty"))
    with pytest.raises(MissingCheckpoint):
        cmd_eval_occlusion(cfg, tmp_path)
    (tmp_path / "empty").mkdir()
    with pytest.raises(MissingCheckpoint):
        cmd_eval_occlusion(cfg, tmp_path)


def test_missing_checkpoint_exit_code(tmp_path, capsys):
    cfg = tiny_config(tmp_path, checkpoint_dir=str(tmp_path / "none"))
    assert main(["eval-occlusion", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "MissingCheckpoint" in capsys.readouterr().err


def test_schema_rejects_bad_report():
    import jsonschema

    with pytest.raises(jsonschema.ValidationError):
        validate_occlusion_report({"command": "eval-occlusion", "version": "0", "config_hash": "xyz",
                                   "variants": {}, "medians": {}, "hard_direction": True})


def test_export_plots(tmp_path, occlusion_run):
    _, root, _ = occlusion_run
    cfg = tiny_config(tmp_path, epochs=2)
    main(["train-compare", "--config", str(cfg), "--out", str(root)])
    assert main(["export-plots", "--out", str(root)]) == 0
    loss = list(csv.DictReader((root / "plot_loss_curves.csv").open()))
    bars = list(csv.DictReader((root / "plot_ap_bars.csv").open()))
    assert {r["series"] for r in loss} == {"standard", "dacconv"}
    assert len(bars) == 6
    assert (root / "plot_convergence.csv").exists()


def test_export_plots_with_nothing(tmp_path, capsys):
    assert main(["export-plots", "--out", str(tmp_path)]) == 0
    assert "nothing exported" in capsys.readouterr().out


def test_module_entry_point():
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "occdet", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "train-compare" in res.stdout
