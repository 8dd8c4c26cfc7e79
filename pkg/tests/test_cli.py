import json
import re
import subprocess
import sys

import pytest

from dereverb.cli import main
from dereverb.dsp import load_manifest


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    code = main(
        [
            "gen-data",
            "--out",
            str(out),
            "--count",
            "4",
            "--duration",
            "0.5",
            "--fs",
            "8000",
            "--seed",
            "3",
        ]
    )
    assert code == 0
    return out


TINY_MODEL = ["--x", "1", "--r", "1", "--n", "16", "--b", "8", "--h", "16"]


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("trained")
    code = main(
        [
            "train",
            "--corpus",
            str(data_dir / "manifest.jsonl"),
            "--out",
            str(out),
            "--variant",
            "wd-tcn",
            *TINY_MODEL,
            "--epochs",
            "2",
            "--clip-seconds",
            "0.5",
            "--seed",
            "0",
        ]
    )
    assert code == 0
    return out


class TestGenData:
    def test_manifest_and_wavs_written(self, data_dir):
        records = load_manifest(data_dir / "manifest.jsonl")
        assert len(records) == 4
        for rec in records:
            assert (data_dir / rec["path_in"]).exists()
            assert (data_dir / rec["path_target"]).exists()

    def test_deterministic(self, data_dir, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path), "--count", "4", "--duration", "0.5", "--seed", "3"]) == 0
        a = (data_dir / "clip_0000_in.wav").read_bytes()
        b = (tmp_path / "clip_0000_in.wav").read_bytes()
        assert a == b


class TestParams:
    def test_wd_88_total_near_published_size(self, capsys):
        assert main(["params", "--variant", "wd-tcn", "--x", "8", "--r", "8"]) == 0
        output = capsys.readouterr().out
        total = int(re.search(r"total\s+(\d+)", output).group(1))
        assert abs(total - 9.1e6) / 9.1e6 < 0.05

    def test_itemised_sections_present(self, capsys):
        assert main(["params", "--variant", "tcn", "--x", "4", "--r", "4"]) == 0
        output = capsys.readouterr().out
        for section in ("encoder", "blocks (16)", "decoder", "total"):
            assert section in output

    def test_missing_x_r_is_usage_error(self, capsys):
        assert main(["params", "--variant", "tcn"]) == 2

    def test_config_file_supplies_defaults(self, capsys, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"x": 4, "r": 4, "variant": "tcn"}))
        assert main(["params", "--config", str(cfg)]) == 0
        assert "variant=tcn X=4 R=4" in capsys.readouterr().out

    def test_flag_overrides_config(self, capsys, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"x": 4, "r": 4, "variant": "tcn"}))
        assert main(["params", "--config", str(cfg), "--x", "5"]) == 0
        assert "X=5" in capsys.readouterr().out


class TestTrain:
    def test_reports_written(self, trained_dir):
        for name in ("loss_curve.csv", "loss_curve.png", "checkpoint_best.json", "checkpoint_last.json"):
            assert (trained_dir / name).exists(), name

    def test_csv_has_epoch_rows(self, trained_dir):
        lines = (trained_dir / "loss_curve.csv").read_text().strip().splitlines()
        assert lines[0] == "epoch,train_loss_db,val_loss_db,lr"
        assert len(lines) == 3


class TestEval:
    def test_identity_manifest_hits_cap(self, data_dir, capsys):
        # est is the target itself -> SISDR pinned at the epsilon cap
        lines = []
        for rec in load_manifest(data_dir / "manifest.jsonl"):
            rec = dict(rec)
            rec["path_in"] = rec["path_target"]
            lines.append(json.dumps(rec))
        identity = data_dir / "identity.jsonl"  # next to the wavs: paths stay resolvable
        identity.write_text("\n".join(lines) + "\n")
        assert main(["eval", "--corpus", str(identity)]) == 0
        out = capsys.readouterr().out
        assert "mean SISDR: 120.00 dB" in out

    def test_unprocessed_baseline_two_decimals(self, data_dir, capsys):
        assert main(["eval", "--corpus", str(data_dir / "manifest.jsonl")]) == 0
        assert re.search(r"mean SISDR: -?\d+\.\d\d dB", capsys.readouterr().out)

    def test_with_checkpoint(self, data_dir, trained_dir, capsys):
        code = main(
            [
                "eval",
                "--corpus",
                str(data_dir / "manifest.jsonl"),
                "--checkpoint",
                str(trained_dir / "checkpoint_best.json"),
            ]
        )
        assert code == 0
        assert re.search(r"mean SISDR: -?\d+\.\d\d dB", capsys.readouterr().out)


class TestAnalyze:
    def test_csv_and_figure_written(self, data_dir, trained_dir, tmp_path, capsys):
        out = tmp_path / "analysis"
        code = main(
            [
                "analyze",
                "--corpus",
                str(data_dir / "manifest.jsonl"),
                "--checkpoint",
                str(trained_dir / "checkpoint_best.json"),
                "--out",
                str(out),
            ]
        )
        assert code == 0
        assert (out / "t60_bins.csv").exists()
        assert (out / "t60_bins.png").exists()
        lines = (out / "t60_bins.csv").read_text().strip().splitlines()
        assert lines[0] == "bin_lo,bin_hi,count,mean_a1,mean_a2"
        for line in lines[1:]:
            fields = line.split(",")
            assert abs(float(fields[3]) + float(fields[4]) - 1.0) < 1e-6

    def test_custom_edges(self, data_dir, trained_dir, tmp_path):
        out = tmp_path / "analysis2"
        code = main(
            [
                "analyze",
                "--corpus",
                str(data_dir / "manifest.jsonl"),
                "--checkpoint",
                str(trained_dir / "checkpoint_best.json"),
                "--out",
                str(out),
                "--t60-bins",
                "0.1,0.55,1.0",
            ]
        )
        assert code == 0
        lines = (out / "t60_bins.csv").read_text().strip().splitlines()
        assert len(lines) <= 3

    def test_baseline_checkpoint_is_runtime_error(self, data_dir, tmp_path, capsys):
        out = tmp_path / "tcnrun"
        assert (
            main(
                [
                    "train",
                    "--corpus",
                    str(data_dir / "manifest.jsonl"),
                    "--out",
                    str(out),
                    "--variant",
                    "tcn",
                    *TINY_MODEL,
                    "--epochs",
                    "1",
                    "--clip-seconds",
                    "0.5",
                ]
            )
            == 0
        )
        code = main(
            [
                "analyze",
                "--corpus",
                str(data_dir / "manifest.jsonl"),
                "--checkpoint",
                str(out / "checkpoint_best.json"),
                "--out",
                str(tmp_path / "x"),
            ]
        )
        assert code == 1
        assert "wd-tcn" in capsys.readouterr().err


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self, capsys):
        assert main(["params", "--bogus"]) == 2

    def test_unknown_command_is_usage_error(self, capsys):
        assert main(["frobnicate"]) == 2

    def test_missing_manifest_is_usage_error(self, capsys):
        assert main(["eval", "--corpus", "/nonexistent/manifest.jsonl"]) == 2

    def test_missing_checkpoint_is_usage_error(self, data_dir, capsys):
        code = main(
            [
                "eval",
                "--corpus",
                str(data_dir / "manifest.jsonl"),
                "--checkpoint",
                "/nonexistent/ckpt.json",
            ]
        )
        assert code == 2


class TestEntryPoint:
    def test_installed_console_script(self):
        result = subprocess.run(
            [sys.executable, "-m", "dereverb.cli", "params", "--variant", "tcn", "--x", "4", "--r", "4"],
            capture_output=True,
            text=True,
        )
        assert result.returncode == 0
        assert "total" in result.stdout
