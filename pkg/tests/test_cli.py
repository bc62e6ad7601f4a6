import subprocess
import sys

import numpy as np
import pytest

from reidlab.cli import main
from reidlab.evaluate import (
    CONDITION_HEADER, CORR_HIST_HEADER, CORRELATION_HEADER, METRICS_HEADER,
)

TINY_CONFIG = """
backbone.widths = 4,5,6,8
backbone.branch_width = 8
backbone.input_shape = 3,16,8
backbone.reduction_dim = 6
embedding.k_a = 5
embedding.k_g = 4
train.stage1_epochs = 1
train.stage2_epochs = 2
train.milestones = 1,2
train.batch_p = 2
train.batch_k = 2
train.steps_per_epoch = 2
data.num_ids = 4
data.instances_per_id = 5
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return str(path)


def read(path):
    with open(path) as fh:
        return fh.read()


class TestTrainCommand:
    def test_writes_all_artifacts(self, tiny_config, tmp_path):
        out = tmp_path / "run"
        code = main(["train", "--config", tiny_config, "--seed", "3",
                     "--out", str(out), "--variant", "pam,cam,of,ow,triplet"])
        assert code == 0
        for name in ("metrics.csv", "epochs.csv", "run_manifest.txt",
                     "config.txt", "checkpoint.bin", "checkpoint.manifest"):
            assert (out / name).exists(), name
        lines = read(out / "metrics.csv").strip().splitlines()
        assert lines[0] == ",".join(METRICS_HEADER)
        assert ",pam+cam+of+ow+triplet,3," in lines[1]

    def test_deterministic_metrics_bytes(self, tiny_config, tmp_path):
        outputs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["train", "--config", tiny_config, "--seed", "7",
                         "--out", str(out), "--variant", "cam"]) == 0
            outputs.append(read(out / "metrics.csv"))
        assert outputs[0] == outputs[1]
        for artifact in ("epochs.csv", "checkpoint.bin", "checkpoint.manifest",
                         "query_embeddings.bin", "gallery_embeddings.bin"):
            assert (tmp_path / "a" / artifact).read_bytes() == \
                (tmp_path / "b" / artifact).read_bytes(), artifact

    def test_embedding_dump_format(self, tiny_config, tmp_path):
        from reidlab.tensor import load_tensor
        out = tmp_path / "run"
        main(["train", "--config", tiny_config, "--seed", "2", "--out", str(out)])
        emb = load_tensor(out / "query_embeddings.bin")
        assert emb.rank == 2
        assert emb.shape[1] == 5 + 4  # k_a + k_g of the tiny config

    def test_seed_changes_run_id(self, tiny_config, tmp_path):
        ids = []
        for seed in ("1", "2"):
            out = tmp_path / f"s{seed}"
            main(["train", "--config", tiny_config, "--seed", seed,
                  "--out", str(out)])
            ids.append(read(out / "metrics.csv").splitlines()[1].split(",")[0])
        assert ids[0] != ids[1]

    def test_refuses_to_reuse_run_directory(self, tiny_config, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["train", "--config", tiny_config, "--out", str(out)]) == 0
        assert main(["train", "--config", tiny_config, "--out", str(out)]) == 2

    def test_invalid_config_key_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("loss.beta_zz = 1\n")
        code = main(["train", "--config", str(bad), "--out", str(tmp_path / "o")])
        assert code == 2
        assert "loss.beta_zz" in capsys.readouterr().err

    def test_invalid_variant_exits_2(self, tiny_config, tmp_path, capsys):
        code = main(["train", "--config", tiny_config, "--out",
                     str(tmp_path / "o"), "--variant", "pam,magic"])
        assert code == 2
        assert "magic" in capsys.readouterr().err

    def test_baseline_variant_by_default(self, tiny_config, tmp_path):
        out = tmp_path / "base"
        main(["train", "--config", tiny_config, "--out", str(out)])
        assert ",baseline," in read(out / "metrics.csv").splitlines()[1]


class TestDiagnoseCommand:
    def test_runs_on_fresh_checkpoint(self, tiny_config, tmp_path):
        run_dir = tmp_path / "run"
        main(["train", "--config", tiny_config, "--seed", "5",
              "--out", str(run_dir), "--variant", "pam,cam"])
        diag = tmp_path / "diag"
        assert main(["diagnose", "--checkpoint", str(run_dir),
                     "--out", str(diag)]) == 0
        corr = read(diag / "correlation.csv").splitlines()
        assert corr[0] == ",".join(CORRELATION_HEADER)
        sites = {line.split(",")[1] for line in corr[1:]}
        assert sites == {"t_a", "t_g", "attentive_prepool"}
        hist = read(diag / "corr_hist.csv").splitlines()
        assert hist[0] == ",".join(CORR_HIST_HEADER)
        assert len(hist) == 1 + 3 * 50  # 50 bins per site
        cond = read(diag / "condition.csv").splitlines()
        assert cond[0] == ",".join(CONDITION_HEADER)

    def test_missing_checkpoint_exits_2(self, tmp_path):
        assert main(["diagnose", "--checkpoint", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "d")]) == 2


class TestAblateCommand:
    def test_grid_rows_and_aggregates(self, tiny_config, tmp_path):
        out = tmp_path / "grid"
        assert main(["ablate", "--config", tiny_config, "--seeds", "0",
                     "--out", str(out)]) == 0
        lines = read(out / "ablation.csv").strip().splitlines()
        assert lines[0] == "variant,seed,top1,top5,map"
        body = [line.split(",") for line in lines[1:]]
        seeds = {row[1] for row in body}
        assert seeds == {"0", "mean"}
        variants = {row[0] for row in body if row[1] == "0"}
        assert len(variants) == 9
        assert "baseline" in variants and "pam+cam+of+ow+triplet" in variants
        # aggregate equals the single seed row
        per_seed = {row[0]: row[4] for row in body if row[1] == "0"}
        for row in body:
            if row[1] == "mean":
                assert row[4] == per_seed[row[0]]


class TestCheckCommand:
    def test_passes_and_writes_report(self, tmp_path, capsys):
        assert main(["check", "--out", str(tmp_path)]) == 0
        report = read(tmp_path / "check_report.csv").splitlines()
        assert report[0] == "name,max_rel_error,tolerance,passed"
        assert all(line.endswith(",1") for line in report[1:])
        assert "PASS" in capsys.readouterr().out


class TestBenchCommand:
    def test_writes_schema(self, tmp_path):
        assert main(["bench-power-iteration", "--out", str(tmp_path)]) == 0
        lines = read(tmp_path / "power_iter_bench.csv").splitlines()
        assert lines[0] == "size,gap_ratio,iterations,rel_error,wall_time_s"
        assert len(lines) > 10

    def test_error_decreases_with_iterations(self, tmp_path):
        main(["bench-power-iteration", "--out", str(tmp_path)])
        rows = [line.split(",") for line in
                read(tmp_path / "power_iter_bench.csv").splitlines()[1:]]
        by_case = {}
        for size, gap, iters, err, _ in rows:
            by_case.setdefault((size, gap), []).append((int(iters), float(err)))
        for case, pairs in by_case.items():
            pairs.sort()
            assert pairs[-1][1] <= pairs[0][1] + 1e-12  # 50 iters <= 1 iter error


class TestEntryPoint:
    def test_help_via_module(self):
        proc = subprocess.run([sys.executable, "-m", "reidlab.cli", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "bench-power-iteration" in proc.stdout

    def test_usage_error_exit_code(self):
        proc = subprocess.run([sys.executable, "-m", "reidlab.cli", "train"],
                              capture_output=True, text=True)
        assert proc.returncode == 2
