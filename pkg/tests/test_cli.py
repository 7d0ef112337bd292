import numpy as np
import pytest

from dualspike.cli import main

FAST = """
[dataset]
kind = blobs
classes = 3
per_class = 20
test_per_class = 10
size = 8
seed = 7

[model]
arch = conv4,spike,pool,fc
timesteps = 2

[train]
epochs = 2
batch_size = 16
seed = 1

[attack]
generator_samples = 6
generator_epochs = 2
deepfool_max_iter = 3

[eval]
vthr_axis = 1.0,1.1
tau_axis = 0.5
"""


@pytest.fixture
def fast_cfg(tmp_path):
    cfg_path = tmp_path / "fast.ini"
    out = tmp_path / "out"
    cfg_path.write_text(FAST + f"\n[output]\ndir = {out}\n")
    return cfg_path, out


class TestExitCodes:
    def test_unknown_subcommand_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_unknown_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["sweep", "--frob"])
        assert exc.value.code == 2

    def test_config_violation_exits_one_with_path(self, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("[attack]\ntau_nominal = 1.5\n")
        assert main(["sweep", "-c", str(bad)]) == 1
        assert "attack.tau_nominal" in capsys.readouterr().err

    def test_missing_checkpoint_reports_error(self, fast_cfg, capsys):
        cfg_path, out = fast_cfg
        assert main(["sweep", "-c", str(cfg_path)]) == 1
        assert "error" in capsys.readouterr().err


class TestPipelineArtifacts:
    def test_gen_data_writes_idx_and_manifest(self, fast_cfg):
        cfg_path, out = fast_cfg
        assert main(["gen-data", "-c", str(cfg_path)]) == 0
        for name in ("train-images.idx", "train-labels.idx", "test-images.idx",
                     "test-labels.idx", "dataset-manifest.txt", "run-manifest-gen-data.ini"):
            assert (out / name).exists()
        manifest = (out / "dataset-manifest.txt").read_text()
        assert "kind = blobs" in manifest and "seed = 7" in manifest

    def test_backdoor_then_sweep_and_eval(self, fast_cfg):
        cfg_path, out = fast_cfg
        assert main(["train-backdoor", "-c", str(cfg_path)]) == 0
        assert (out / "backdoor.ckpt").exists()
        assert main(["sweep", "-c", str(cfg_path)]) == 0
        sweep_csv = (out / "sweep.csv").read_text().splitlines()
        assert sweep_csv[0] == "experiment,vthr_a,tau_a,trigger,ca,asr_p,asr_o,n_eval,seed"
        assert len(sweep_csv) == 3  # 2x1 grid
        assert main(["eval", "-c", str(cfg_path)]) == 0
        assert (out / "metrics.csv").exists()
        assert (out / "probe.csv").exists()

    def test_single_cell_sweep_has_one_row(self, fast_cfg, tmp_path):
        cfg_path, out = fast_cfg
        assert main(["train-backdoor", "-c", str(cfg_path)]) == 0
        assert main(["sweep", "-c", str(cfg_path), "--set", "eval.vthr_axis=1.1",
                     "--set", "eval.tau_axis=0.5"]) == 0
        rows = (out / "sweep.csv").read_text().splitlines()
        assert len(rows) == 2  # header + one cell

    def test_trigger_stages(self, fast_cfg):
        cfg_path, out = fast_cfg
        assert main(["train-backdoor", "-c", str(cfg_path)]) == 0
        assert main(["precompute-targets", "-c", str(cfg_path)]) == 0
        assert (out / "targets.bin").exists()
        assert main(["train-trigger", "-c", str(cfg_path)]) == 0
        assert (out / "generator.ckpt").exists()
        # sweep now also reports asr_o
        assert main(["sweep", "-c", str(cfg_path)]) == 0
        row = (out / "sweep.csv").read_text().splitlines()[1]
        assert row.split(",")[6] != ""

    def test_p0_backdoor_behaves_like_clean(self, fast_cfg):
        cfg_path, out = fast_cfg
        assert main(["train-clean", "-c", str(cfg_path)]) == 0
        assert main(["train-backdoor", "-c", str(cfg_path),
                     "--set", "attack.poison_ratio=0.0"]) == 0
        from dualspike.checkpoint import load_checkpoint
        clean, _ = load_checkpoint(out / "clean.ckpt")
        backdoor, _ = load_checkpoint(out / "backdoor.ckpt")
        for (_, a), (_, b) in zip(clean.parameters(), backdoor.parameters()):
            assert np.array_equal(a.data, b.data)


class TestManifestReplay:
    def test_sweep_replay_byte_identical(self, fast_cfg, tmp_path):
        cfg_path, out = fast_cfg
        assert main(["train-backdoor", "-c", str(cfg_path)]) == 0
        assert main(["sweep", "-c", str(cfg_path)]) == 0
        first = (out / "sweep.csv").read_bytes()
        manifest = out / "run-manifest-sweep.ini"
        assert manifest.exists()
        (out / "sweep.csv").unlink()
        assert main(["sweep", "-c", str(manifest)]) == 0
        assert (out / "sweep.csv").read_bytes() == first

    def test_eval_replay_byte_identical(self, fast_cfg):
        cfg_path, out = fast_cfg
        assert main(["train-backdoor", "-c", str(cfg_path)]) == 0
        assert main(["eval", "-c", str(cfg_path)]) == 0
        metrics = (out / "metrics.csv").read_bytes()
        probe = (out / "probe.csv").read_bytes()
        assert main(["eval", "-c", str(out / "run-manifest-eval.ini")]) == 0
        assert (out / "metrics.csv").read_bytes() == metrics
        assert (out / "probe.csv").read_bytes() == probe

    def test_manifest_captures_overrides(self, fast_cfg):
        cfg_path, out = fast_cfg
        assert main(["gen-data", "-c", str(cfg_path), "--set", "dataset.seed=99"]) == 0
        assert "seed = 99" in (out / "run-manifest-gen-data.ini").read_text()


class TestEventPipeline:
    def test_event_backdoor_and_sweep(self, tmp_path):
        out = tmp_path / "ev"
        cfg = tmp_path / "ev.ini"
        cfg.write_text(f"""
[dataset]
kind = events
classes = 3
per_class = 12
test_per_class = 6
size = 8
seed = 3

[model]
arch = conv4,spike,pool,fc
timesteps = 2

[train]
epochs = 2
batch_size = 12

[eval]
vthr_axis = 1.0,1.1
tau_axis = 0.5

[output]
dir = {out}
""")
        assert main(["gen-data", "-c", str(cfg)]) == 0
        assert (out / "train-events.idx").exists()
        assert main(["train-backdoor", "-c", str(cfg)]) == 0
        assert main(["sweep", "-c", str(cfg)]) == 0
        rows = (out / "sweep.csv").read_text().splitlines()
        assert "ts(beta=0.03)" in rows[1]
