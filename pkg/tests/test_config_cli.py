import filecmp

import pytest
from hypothesis import given
from hypothesis import strategies as st

from otrecon.cli import MANIFEST, run
from otrecon.config import ExperimentConfig, load_config, parse_config
from otrecon.errors import ConfigError

TINY = """\
grid_size = 12
angles = 6
circles_min = 1
circles_max = 2
radius_min = 1.5
radius_max = 3
shift_bound = 1
num_pairs = 4
stages = 1
n_primal = 2
n_dual = 1
filters = 4
steps = 4
checkpoint_every = 2
validate_every = 2
validation_size = 2
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


class TestParse:
    def test_defaults_and_comments(self):
        cfg = parse_config("# only a comment\n\nangles = 10  # trailing\n")
        assert cfg.angles == 10 and cfg.grid_size == 64

    def test_text_round_trip(self):
        cfg = ExperimentConfig(seed=2**64 - 1, loss="ot", metric_exponents=(1.0, 3.5), dataset_dir="x/y")
        assert parse_config(cfg.to_text()) == cfg

    @given(st.integers(0, 2**64 - 1), st.floats(1e-6, 1e3), st.booleans())
    def test_round_trip_values(self, seed, eps, per_circle):
        cfg = ExperimentConfig(seed=seed, ot_epsilon=eps, per_circle_shift=per_circle)
        assert parse_config(cfg.to_text()) == cfg

    @pytest.mark.parametrize("text", [
        "colour = 3", "angles = 3\nangles = 4", "angles", "angles = three", "noise_level = nan",
        "per_circle_shift = maybe", "loss = huber", "kernel_method = loop", "grid_size = 0",
    ])
    def test_rejects(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_derived_geometry(self):
        cfg = ExperimentConfig()
        assert cfg.geometry().shape == (30, 91)
        assert ExperimentConfig(detectors=50).geometry().detectors == 50

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "none.cfg")


class TestCli:
    def test_bad_config_exits_1(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("colour = 3\n")
        assert run(["generate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
        assert "unknown key" in capsys.readouterr().err
        bad.write_text("angles = 3\nangles = 3\n")
        assert run(["generate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1

    def test_seed_out_of_range_exits_1(self, tmp_path):
        assert run(["generate", "--seed", str(2**64), "--out", str(tmp_path)]) == 1

    def test_generate_is_deterministic(self, tiny_cfg, tmp_path):
        for name in ("a", "b"):
            assert run(["generate", "--config", str(tiny_cfg), "--out", str(tmp_path / name)]) == 0
        cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
        assert not cmp.diff_files
        assert len(list((tmp_path / "a" / "pairs").glob("*.truth.otr"))) == 4
        assert (tmp_path / "a" / "dataset.csv").read_text() == (tmp_path / "b" / "dataset.csv").read_text()
        assert (tmp_path / "a" / "pair0_triptych.pgm").exists()

    def test_generate_zero_pairs(self, tiny_cfg, tmp_path):
        cfg = tmp_path / "zero.cfg"
        cfg.write_text(TINY.replace("num_pairs = 4", "num_pairs = 0"))
        assert run(["generate", "--config", str(cfg), "--out", str(tmp_path / "z")]) == 0
        assert (tmp_path / "z" / "dataset.csv").read_text().count("\n") == 1

    def test_manifest_replays_bitwise(self, tiny_cfg, tmp_path):
        assert run(["train", "--config", str(tiny_cfg), "--out", str(tmp_path / "r1"), "--seed", "11"]) == 0
        manifest = tmp_path / "r1" / MANIFEST
        assert "# seed: 11" in manifest.read_text()
        assert run(["train", "--config", str(manifest), "--out", str(tmp_path / "r2")]) == 0
        assert (tmp_path / "r1" / "final.otpd").read_bytes() == (tmp_path / "r2" / "final.otpd").read_bytes()
        assert (tmp_path / "r1" / "metrics.csv").read_text() == (tmp_path / "r2" / "metrics.csv").read_text()

    def test_train_from_dataset_and_resume(self, tiny_cfg, tmp_path):
        assert run(["generate", "--config", str(tiny_cfg), "--out", str(tmp_path / "data")]) == 0
        cfg = tmp_path / "stored.cfg"
        cfg.write_text(TINY + f"dataset_dir = {tmp_path / 'data'}\n")
        assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "full")]) == 0
        ckpt = tmp_path / "full" / "checkpoints" / "step_000002.otpd"
        assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "res"), "--checkpoint", str(ckpt)]) == 0
        assert (tmp_path / "full" / "final.otpd").read_bytes() == (tmp_path / "res" / "final.otpd").read_bytes()

    def test_resume_architecture_mismatch(self, tiny_cfg, tmp_path):
        assert run(["train", "--config", str(tiny_cfg), "--out", str(tmp_path / "a")]) == 0
        other = tmp_path / "other.cfg"
        other.write_text(TINY.replace("filters = 4", "filters = 5"))
        ckpt = tmp_path / "a" / "checkpoints" / "step_000002.otpd"
        assert run(["train", "--config", str(other), "--out", str(tmp_path / "b"), "--checkpoint", str(ckpt)]) == 1

    def test_eval_and_corrupted_checkpoint(self, tiny_cfg, tmp_path, capsys):
        assert run(["train", "--config", str(tiny_cfg), "--out", str(tmp_path / "t")]) == 0
        final = tmp_path / "t" / "final.otpd"
        assert run(["eval", "--config", str(tiny_cfg), "--out", str(tmp_path / "e"),
                    "--checkpoint", str(final), "--checkpoint", str(final)]) == 0
        assert (tmp_path / "e" / "eval_panel.pgm").exists()
        assert "spread_ratio" in (tmp_path / "e" / "eval_summary.csv").read_text()
        broken = tmp_path / "broken.otpd"
        broken.write_bytes(final.read_bytes()[:-3])
        assert run(["eval", "--config", str(tiny_cfg), "--out", str(tmp_path / "e2"),
                    "--checkpoint", str(broken)]) == 1
        assert run(["eval", "--config", str(tiny_cfg), "--out", str(tmp_path / "e3")]) == 1

    def test_prop_and_metric_commands(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("prop1_samples = 2000\nprop2_distributions = 3\nprop2_sinkhorn_iterations = 50\n"
                       "metric_triples = 20000\n")
        for cmd in ("prop1", "prop2", "metric-check"):
            assert run([cmd, "--config", str(cfg), "--out", str(tmp_path / cmd)]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out and out.count("PASS") >= 1 + 4 + 3
        assert (tmp_path / "prop2" / "prop2_curves.csv").exists()
        assert (tmp_path / "metric-check" / MANIFEST).exists()

    def test_failed_check_exits_2(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        # too few samples for the 2% tolerance
        cfg.write_text("prop1_samples = 3\n")
        assert run(["prop1", "--config", str(cfg), "--out", str(tmp_path / "p")]) == 2
