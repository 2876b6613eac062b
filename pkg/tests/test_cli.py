import json
import hashlib
from pathlib import Path

import pytest

from emorl.cli import main

from conftest import PALETTE6


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = {
        "model": {
            "num_slots": 3, "latent_dim": 8, "image_height": 12,
            "image_width": 12, "sigma_lik": 0.3, "num_layers": 3,
            "likelihood": "gaussian", "prior_variant": "reversed_pp",
            "decoder": "light", "enc_channels": 16, "dec_channels": 8,
        },
        "train": {
            "batch_size": 4, "total_steps": 4,
            "lr": {"base": 4e-4, "warmup_steps": 2, "half_life": 100},
            "curriculum": [[0, 1]],
            "geco": {"enabled": False, "nll_threshold": 500.0},
            "seed": 0, "log_every": 2, "checkpoint_every": 0,
        },
        "data": {
            "path": "data/tiny.bin", "n_scenes": 30, "n_train": 22,
            "n_test": 8, "seed": 3,
            "generator": {
                "name": "tiny", "kind": "tetromino", "height": 12, "width": 12,
                "count_range": [1, 2], "allow_overlap": False,
                "background": "black", "cell_size": 2, "palette": PALETTE6,
            },
        },
        "eval": {"steps": 1, "n_scenes": 8, "batch_size": 4},
        "out_dir": "run",
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return tmp_path, str(path)


def run_cli(*argv):
    return main(list(argv))


class TestGenData:
    def test_deterministic_file_hash(self, workspace):
        root, cfg = workspace
        assert run_cli("gen-data", "--config", cfg) == 0
        h1 = hashlib.sha256(Path("data/tiny.bin").read_bytes()).hexdigest()
        assert run_cli("gen-data", "--config", cfg) == 0
        h2 = hashlib.sha256(Path("data/tiny.bin").read_bytes()).hexdigest()
        assert h1 == h2

    def test_invalid_preset_name_errors(self, workspace, capsys):
        root, cfg = workspace
        code = run_cli(
            "gen-data", "--config", cfg, "--set", 'data.generator.kind="wavelet"'
        )
        assert code == 1
        err = capsys.readouterr().err
        assert err.startswith("error[ConfigError]")
        assert "\n" not in err.strip()


class TestTrainEval:
    def test_train_then_eval_and_artifacts(self, workspace, capsys):
        root, cfg = workspace
        assert run_cli("gen-data", "--config", cfg) == 0
        assert run_cli("train", "--config", cfg) == 0
        assert Path("run/checkpoint_final.pt").exists()
        assert Path("run/metrics.jsonl").exists()

        assert run_cli("eval", "--config", cfg, "--I", "0,1") == 0
        out = capsys.readouterr().out
        assert "I=0 ari=" in out and "I=1 ari=" in out
        report = Path("run/eval_report.txt").read_text()
        assert "config_hash=" in report
        assert Path("run/decomposition_I0.png").exists()
        assert Path("run/decomposition_I1.png").exists()

    def test_eval_slot_override(self, workspace, capsys):
        root, cfg = workspace
        run_cli("gen-data", "--config", cfg)
        run_cli("train", "--config", cfg)
        capsys.readouterr()
        assert run_cli("eval", "--config", cfg, "--I", "0", "--K", "5") == 0
        assert "K=5" in capsys.readouterr().out

    def test_eval_refuses_mismatched_config(self, workspace, capsys):
        root, cfg = workspace
        run_cli("gen-data", "--config", cfg)
        run_cli("train", "--config", cfg)
        capsys.readouterr()
        code = run_cli(
            "eval", "--config", cfg, "--set", "model.latent_dim=16"
        )
        assert code == 1
        err = capsys.readouterr().err
        assert err.startswith("error[CheckpointError]")

    def test_missing_dataset_error(self, workspace, capsys):
        root, cfg = workspace
        code = run_cli("train", "--config", cfg)
        assert code == 1
        assert "error[ConfigError]" in capsys.readouterr().err

    def test_resume_continues(self, workspace):
        root, cfg = workspace
        run_cli("gen-data", "--config", cfg)
        assert run_cli("train", "--config", cfg, "--max-steps", "2") == 0
        assert (
            run_cli(
                "train", "--config", cfg, "--resume", "run/checkpoint_final.pt"
            )
            == 0
        )
        records = [
            json.loads(l) for l in Path("run/metrics.jsonl").read_text().splitlines()
        ]
        steps = [r["step"] for r in records if "nll" in r]
        assert max(steps) == 4


class TestDiagnostics:
    def test_check_command(self, workspace, capsys):
        root, cfg = workspace
        run_cli("gen-data", "--config", cfg)
        run_cli("train", "--config", cfg)
        capsys.readouterr()
        assert run_cli("check", "--config", cfg) == 0
        out = capsys.readouterr().out
        assert "PASS slot_equivariance" in out
        assert Path("run/property_checks.txt").exists()

    def test_bench_command(self, workspace, capsys):
        root, cfg = workspace
        run_cli("gen-data", "--config", cfg)
        run_cli("train", "--config", cfg)
        capsys.readouterr()
        assert run_cli("bench", "--config", cfg, "--I", "0,1") == 0
        out = capsys.readouterr().out
        assert "parameters=" in out and "I=0 forward_s=" in out

    def test_traverse_and_activeness(self, workspace):
        root, cfg = workspace
        run_cli("gen-data", "--config", cfg)
        run_cli("train", "--config", cfg)
        assert run_cli("traverse", "--config", cfg, "--I", "0") == 0
        assert Path("run/traversal.png").exists()
        assert Path("run/traversal_ranges.txt").exists()
        assert run_cli("activeness", "--config", cfg, "--I", "0") == 0
        assert Path("run/activeness.png").exists()
        assert Path("run/activeness.txt").exists()
