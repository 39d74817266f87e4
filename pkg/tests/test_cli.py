import csv
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from sortnet import ops
from sortnet.bench import bench_block, self_bench
from sortnet.cli import main

SMOKE = ["--net", "mlp", "--data", "blobs", "--batch-size", "50"]


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def losses(path):
    return [(r["iter"], r["split"], r["loss"], r["error_pct"]) for r in read_rows(path)]


class TestTrainCommand:
    def test_smoke_run(self, tmp_path):
        t0 = time.perf_counter()
        code = main(["train", *SMOKE, "--sections", "0.01:100", "--out", str(tmp_path)])
        assert code == 0
        assert time.perf_counter() - t0 < 60
        assert (tmp_path / "seed0.csv").exists() and (tmp_path / "summary.txt").exists()

    def test_three_seeds(self, tmp_path, capsys):
        code = main(["train", *SMOKE, "--star", "--sort", "--sections", "0.05:40", "--seeds", "1,2,3", "--out", str(tmp_path)])
        assert code == 0
        assert sorted(p.name for p in tmp_path.glob("seed*.csv")) == ["seed1.csv", "seed2.csv", "seed3.csv"]
        summary = (tmp_path / "summary.txt").read_text()
        assert "(n=3)" in summary and "±" in summary
        assert read_rows(tmp_path / "seed1.csv")[0].keys() == {"iter", "split", "loss", "error_pct", "elapsed_s"}

    def test_config_echo_reproduces_run(self, tmp_path):
        first, second = tmp_path / "a", tmp_path / "b"
        assert main(["train", *SMOKE, "--star", "--sort", "--sections", "0.05:20,0.01:10", "--seeds", "4", "--out", str(first)]) == 0
        echo = json.loads((first / "config.json").read_text())
        echo["out"] = str(second)
        cfg = tmp_path / "echo.json"
        cfg.write_text(json.dumps(echo))
        assert main(["train", "--config", str(cfg)]) == 0
        assert losses(first / "seed4.csv") == losses(second / "seed4.csv")

    def test_parallel_jobs_match_serial(self, tmp_path):
        args = ["train", *SMOKE, "--sections", "0.05:20", "--seeds", "1,2"]
        assert main([*args, "--out", str(tmp_path / "s")]) == 0
        assert main([*args, "--jobs", "2", "--out", str(tmp_path / "p")]) == 0
        for s in (1, 2):
            assert losses(tmp_path / "s" / f"seed{s}.csv") == losses(tmp_path / "p" / f"seed{s}.csv")

    def test_invalid_net_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["train", "--net", "alexnet"])
        assert info.value.code == 2

    def test_net_data_mismatch_is_usage_error(self, tmp_path):
        assert main(["train", "--net", "lenet", "--data", "xor", "--out", str(tmp_path)]) == 2

    def test_bad_sections_is_usage_error(self, tmp_path):
        assert main(["train", *SMOKE, "--sections", "fast", "--out", str(tmp_path)]) == 2

    def test_divergence_exit_codes(self, tmp_path):
        args = ["train", "--net", "mlp", "--data", "xor", "--star", "--sort", "--depth", "6", "--sections", "0.05:50", "--batch-size", "50"]
        assert main([*args, "--out", str(tmp_path / "a")]) == 1
        assert main([*args, "--allow-diverge", "--out", str(tmp_path / "b")]) == 0
        assert "diverged" in (tmp_path / "b" / "summary.txt").read_text()


class TestAblateCommand:
    def test_seven_rows(self, tmp_path, capsys):
        code = main(["ablate", *SMOKE, "--sections", "0.05:20", "--seeds", "0,1", "--out", str(tmp_path), "--jobs", "2"])
        assert code == 0
        table = (tmp_path / "ablation.txt").read_text().splitlines()
        assert len(table) == 1 + 7
        assert len(json.loads((tmp_path / "ablation.json").read_text())) == 7

    def test_rows_differ_only_in_fusion(self, tmp_path):
        main(["ablate", *SMOKE, "--sections", "0.05:5", "--out", str(tmp_path)])
        a = json.loads((tmp_path / "sum" / "config.json").read_text())
        b = json.loads((tmp_path / "sum_prod" / "config.json").read_text())
        diff = {k for k in a if a[k] != b[k]}
        assert diff == {"fusion"}
        assert {k for k in a["fusion"] if a["fusion"][k] != b["fusion"][k]} == {"use_prod"}

    def test_diverged_rows_marked(self, tmp_path):
        code = main(["ablate", "--net", "mlp", "--data", "xor", "--depth", "6", "--sections", "0.05:50", "--batch-size", "50", "--out", str(tmp_path)])
        assert code == 0
        rows = (tmp_path / "ablation.txt").read_text().splitlines()[1:]
        assert len(rows) == 7 and any(r.split()[-2] == "-" for r in rows)


class TestGradcheckCommand:
    def test_fusion_passes(self, capsys):
        assert main(["gradcheck", "fusion", "--instances", "5"]) == 0
        assert "max_rel_err" in capsys.readouterr().out

    def test_fault_injection_names_op(self, monkeypatch, capsys):
        monkeypatch.setattr(ops, "_mul_backward", lambda g, a, b: (-(g * b), -(g * a)))
        assert main(["gradcheck", "all-ops", "--instances", "3"]) == 1
        assert "ew_mul" in capsys.readouterr().err


class TestBenchCommand:
    def test_ratio_format(self, capsys):
        assert main(["bench", "--channels", "4", "--size", "8", "--batch", "2", "--reps", "30"]) == 0
        last = capsys.readouterr().out.strip().splitlines()[-1]
        assert last.startswith("sort/base = ") and len(last.split("=")[1].strip().split(".")[1]) == 3

    def test_branch_block(self, capsys):
        assert main(["bench", "--block", "branch", "--channels", "4", "--size", "8", "--batch", "2", "--reps", "30"]) == 0

    def test_too_few_reps(self):
        assert main(["bench", "--reps", "5"]) == 2

    def test_self_bench_noise_floor(self):
        ratios = [self_bench(channels=16, size=16, batch=20, reps=30).ratio for _ in range(3)]
        assert 0.95 <= float(np.median(ratios)) <= 1.05, ratios

    def test_same_weights_in_both_blocks(self):
        res = bench_block(channels=2, size=4, batch=1, reps=1, warmup=0)
        assert res.reps == 1 and len(res.sort_times) == len(res.base_times) == 1


class TestSurfaceCommand:
    def test_files(self, tmp_path):
        assert main(["surface", "--out", str(tmp_path)]) == 0
        f1 = np.loadtxt(tmp_path / "f1.csv", delimiter=",", skiprows=1)
        f2 = np.loadtxt(tmp_path / "f2.csv", delimiter=",", skiprows=1)
        assert f1.shape == f2.shape == (6561, 3)
        at = f2[(f2[:, 0] == 2.0) & (f2[:, 1] == 2.0)]
        assert at[0, 2] == 8.0
        assert np.all(f2[:, 2] - f1[:, 2] >= 0)

    def test_unwritable_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert main(["surface", "--out", str(blocker / "sub")]) == 1


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "sortnet", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gradcheck" in out.stdout
