import csv
import subprocess
import sys

import numpy as np
import pytest
import yaml

from cgl.checkpoint import load_checkpoint
from cgl.cli import main
from cgl.config import from_dict
from cgl.data import load_csv, synth_blobs
from cgl.engine import select_best_student
from cgl.experiment import load_datasets

TOY = ["--set", "data.n_per_class=30", "--set", "data.test_per_class=10", "--set", "data.n_classes=3",
       "--set", "data.dim=4", "--set", "grid.L=2", "--set", "grid.width=8", "--set", "pool.K=2",
       "--set", "train.epochs=2", "--set", "train.batch_size=16"]


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def trained(tmp_path):
    out = tmp_path / "run"
    assert main(["train", *TOY, "--out", str(out)]) == 0
    return out


class TestTrain:
    def test_artifacts_and_summary(self, trained, capsys):
        names = {p.name for p in trained.iterdir()}
        assert {"metrics.csv", "timing.csv", "config.yaml", "structure.txt", "final.ckpt", "students.csv"} <= names
        assert len(rows(trained / "metrics.csv")) == 2

    def test_prints_accuracies(self, tmp_path, capsys):
        main(["train", *TOY, "--out", str(tmp_path / "r")])
        out = capsys.readouterr().out
        assert "student 0:" in out and "student 1:" in out and "best student" in out

    def test_override_persisted(self, tmp_path):
        main(["train", *TOY, "--set", "distill.p=0.25", "--out", str(tmp_path / "r")])
        saved = yaml.safe_load((tmp_path / "r" / "config.yaml").read_text())
        assert saved["distill"]["p"] == 0.25 and saved["train"]["epochs"] == 2

    def test_rerun_byte_identical(self, tmp_path):
        main(["train", *TOY, "--out", str(tmp_path / "a")])
        main(["train", *TOY, "--out", str(tmp_path / "b")])
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_default_location_is_run_id(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CGL_OUTPUT_ROOT", str(tmp_path / "root"))
        assert main(["train", *TOY]) == 0
        (run_dir,) = (tmp_path / "root").iterdir()
        assert run_dir.name.endswith("-s0") and (run_dir / "metrics.csv").exists()

    def test_missing_dataset_exit_2(self, tmp_path, capsys):
        code = main(["train", "--set", "data.kind=csv", "--set", f"data.train_path={tmp_path}/gone.csv"])
        assert code == 2 and "gone.csv" in capsys.readouterr().err

    def test_invalid_config_lists_fields(self, capsys):
        assert main(["train", "--set", "distill.p=3", "--set", "train.lr=0"]) == 2
        err = capsys.readouterr().err
        assert "distill.p" in err and "train.lr" in err

    def test_runtime_failure_exit_1(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert main(["train", *TOY, "--out", str(blocker / "sub")]) == 1
        assert "error during train" in capsys.readouterr().err

    def test_resume(self, tmp_path):
        main(["train", *TOY, "--set", "train.epochs=4", "--set", "schedule.ramp_end=1", "--out",
              str(tmp_path / "full")])
        main(["train", *TOY, "--set", "schedule.ramp_end=1", "--out", str(tmp_path / "part")])
        main(["train", *TOY, "--set", "train.epochs=4", "--set", "schedule.ramp_end=1", "--out",
              str(tmp_path / "part"), "--resume", str(tmp_path / "part" / "final.ckpt")])
        assert (tmp_path / "part" / "metrics.csv").read_bytes() == (tmp_path / "full" / "metrics.csv").read_bytes()

    def test_plot(self, tmp_path):
        main(["train", *TOY, "--out", str(tmp_path / "r"), "--plot"])
        assert (tmp_path / "r" / "training.png").stat().st_size > 0


class TestEval:
    def test_best_matches_selector(self, trained, tmp_path):
        assert main(["eval", str(trained / "final.ckpt"), "--out", str(tmp_path / "e.csv")]) == 0
        ck = load_checkpoint(trained / "final.ckpt")
        data = load_datasets(from_dict(ck.config))
        k, _ = select_best_student(ck.pool(), ck.grid(), data.holdout)
        (row,) = rows(tmp_path / "e.csv")
        assert int(row["student"]) == k and row["split"] == "test"

    def test_index_out_of_range(self, trained):
        assert main(["eval", str(trained / "final.ckpt"), "--student", "3"]) == 2

    def test_random_reproducible(self, trained, tmp_path):
        main(["eval", str(trained / "final.ckpt"), "--student", "random", "--seed", "5", "--out",
              str(tmp_path / "a.csv")])
        main(["eval", str(trained / "final.ckpt"), "--student", "random", "--seed", "5", "--out",
              str(tmp_path / "b.csv")])
        assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()

    def test_config_mismatch_refused(self, trained, capsys):
        assert main(["eval", str(trained / "final.ckpt"), *TOY, "--set", "grid.M=3"]) == 2
        assert "grid.M" in capsys.readouterr().err

    def test_truncated_checkpoint(self, trained, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes((trained / "final.ckpt").read_bytes()[:-5])
        assert main(["eval", str(bad)]) == 2


class TestAblate:
    def test_grid_of_variants(self, tmp_path):
        assert main(["ablate", *TOY, "--seeds", "0-1", "--out", str(tmp_path), "--no-plot"]) == 0
        table = rows(tmp_path / "ablation.csv")
        assert [r["variant"] for r in table] == ["none", "none", "rr", "rr", "sdl", "sdl", "sgi", "sgi"]
        by = {r["variant"]: r for r in table}
        assert float(by["sdl"]["mean_samples_per_student"]) == float(by["sdl"]["n_train"])
        assert float(by["sgi"]["mean_selected_peers"]) == 1.0  # K - 1 with K = 2
        # with K == M one module per student per layer already covers the grid
        assert by["rr"]["distinct_parameters"] == by["none"]["distinct_parameters"]

    def test_single_variant_plot(self, tmp_path):
        assert main(["ablate", *TOY, "--off", "sgi", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "ablation.png").exists()


class TestAnalyze:
    def test_cost_prints_six(self, tmp_path, capsys):
        assert main(["analyze", "cost", "--n-batches", "16", "-K", "8", "-p", "0.25", "--out", str(tmp_path)]) == 0
        assert capsys.readouterr().out.splitlines()[0] == "6"
        assert rows(tmp_path / "cost.csv")[0]["exact_cost"] == "5.5"

    def test_diversity_fresh_pool(self, tmp_path):
        assert main(["analyze", "diversity", *TOY, "--out", str(tmp_path)]) == 0
        dist = [float(r["distance"]) for r in rows(tmp_path / "diversity.csv")]
        assert all(np.isfinite(d) and d > 0 for d in dist)
        assert (tmp_path / "diversity.png").exists()

    def test_diversity_from_checkpoint(self, trained, tmp_path):
        code = main(["analyze", "diversity", "--checkpoint", str(trained / "final.ckpt"), "--out", str(tmp_path),
                     "--no-plot"])
        assert code == 0 and len(rows(tmp_path / "diversity.csv")) == 1

    def test_sweep_p_eight_rows(self, tmp_path):
        assert main(["analyze", "sweep-p", *TOY, "--set", "train.epochs=1", "--out", str(tmp_path)]) == 0
        table = rows(tmp_path / "sweep_p.csv")
        assert [float(r["p"]) for r in table] == [0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0]
        assert (tmp_path / "sweep_p.png").exists()

    def test_perturb(self, tmp_path):
        code = main(["analyze", "perturb", *TOY, "--sigmas", "0,0.05", "--trials", "2", "--out", str(tmp_path)])
        assert code == 0
        table = rows(tmp_path / "perturbation.csv")
        assert {r["model"] for r in table} == {"cgl", "baseline"}
        assert all(float(r["drop"]) == 0.0 for r in table if float(r["sigma"]) == 0.0)

    def test_sweep_sharing(self, tmp_path):
        code = main(["analyze", "sweep-sharing", *TOY, "--modules", "1,2", "--forced", "1", "--out", str(tmp_path)])
        assert code == 0 and len(rows(tmp_path / "sweep_sharing.csv")) == 3

    def test_sweep_sharing_needs_settings(self, tmp_path):
        assert main(["analyze", "sweep-sharing", *TOY, "--out", str(tmp_path)]) == 2

    def test_transfer(self, tmp_path):
        code = main(["analyze", "transfer", *TOY, "--n-structures", "3", "--set-b", "data.spread=0.8",
                     "--out", str(tmp_path)])
        assert code == 0
        table = rows(tmp_path / "transfer.csv")
        assert sorted(int(r["rank_a"]) for r in table) == [1, 2, 3]
        assert (tmp_path / "structure_0.txt").exists()

    def test_subsets(self, tmp_path):
        assert main(["analyze", "subsets", *TOY, "--seeds", "0,1", "--out", str(tmp_path), "--no-plot"]) == 0
        assert len(rows(tmp_path / "subsets.csv")) == 2

    def test_help_documents_schemas(self, capsys):
        with pytest.raises(SystemExit):
            main(["analyze", "--help"])
        assert "sweep_p.csv" in capsys.readouterr().out


class TestGenData:
    ARGS = ["gen-data", "blobs", "--classes", "8", "--n-per-class", "500", "--dim", "16", "--seed", "7"]

    def test_row_count(self, tmp_path):
        assert main([*self.ARGS, "--out", str(tmp_path)]) == 0
        assert len((tmp_path / "train.csv").read_text().splitlines()) == 4001

    def test_same_seed_same_bytes(self, tmp_path):
        main([*self.ARGS, "--out", str(tmp_path / "a")])
        main([*self.ARGS, "--out", str(tmp_path / "b")])
        assert (tmp_path / "a" / "train.csv").read_bytes() == (tmp_path / "b" / "train.csv").read_bytes()

    def test_metadata_regenerates(self, tmp_path):
        main([*self.ARGS, "--test-per-class", "10", "--out", str(tmp_path / "a")])
        main(["gen-data", "blobs", "--from-metadata", str(tmp_path / "a" / "metadata.yaml"), "--out",
              str(tmp_path / "b")])
        for name in ("train.csv", "test.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        d = load_csv(tmp_path / "b" / "train.csv")
        ref = synth_blobs(500, 8, 16, 1.2, [7, 1])
        np.testing.assert_array_equal(d.features, ref.features)

    def test_trains_from_generated_csv(self, tmp_path):
        main(["gen-data", "blobs", "--classes", "3", "--n-per-class", "30", "--dim", "4", "--test-per-class", "5",
              "--out", str(tmp_path / "d")])
        code = main(["train", *TOY, "--set", "data.kind=csv", "--set", f"data.train_path={tmp_path}/d/train.csv",
                     "--set", f"data.test_path={tmp_path}/d/test.csv", "--out", str(tmp_path / "r")])
        assert code == 0

    def test_unwritable_exit_1(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert main([*self.ARGS, "--out", str(blocker / "x")]) == 1

    def test_bad_params_exit_2(self, tmp_path):
        assert main(["gen-data", "blobs", "--classes", "0", "--out", str(tmp_path)]) == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "cgl", "analyze", "cost", "--no-plot", "--out", "/tmp/cgl-cost"],
                         capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("6")
