import pytest

from protomtl.cli import build_parser, main
from protomtl.evaluation import read_report
from protomtl.utils import read_csv
from .conftest import TINY_CONFIG_TEXT


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Generate, train and evaluate a tiny run through the command line."""
    root = tmp_path_factory.mktemp("cli")
    data, run = root / "data", root / "run"
    config = root / "tiny.txt"
    config.write_text(TINY_CONFIG_TEXT)
    codes = [
        main(
            ["generate-data", "--out", str(data), "--n", "12", "--n-test", "4"]
            + ["--hw", "16", "--seed", "0"]
        ),
        main(["train", "--config", str(config), "--data", str(data), "--out", str(run)]),
        main(
            ["evaluate", "--checkpoint", str(run / "checkpoint.pmtl")]
            + ["--data", str(data), "--out", str(root / "report.csv")]
        ),
    ]
    return root, codes


class TestParser:
    """Tests for argument parsing and usage errors."""

    def test_no_command(self, capsys):
        """Test running without a subcommand is a usage error."""
        assert main([]) == 2
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag(self):
        """Test unknown flags are usage errors."""
        assert main(["train", "--bogus"]) == 2

    def test_help(self):
        """Test --help exits successfully."""
        assert main(["--help"]) == 0

    def test_seed_list(self):
        """Test comma-separated seeds are parsed."""
        parser = build_parser()
        args = parser.parse_args(["ablate", "--data", "d", "--out", "o", "--seeds", "3,4"])
        assert args.seeds == [3, 4]

    def test_missing_input_creates_nothing(self, tmp_path, capsys):
        """Test a missing input is a usage error and writes no output."""
        out = tmp_path / "run"
        code = main(["train", "--data", str(tmp_path / "absent"), "--out", str(out)])
        assert code == 2
        assert not out.exists()
        assert "no such file" in capsys.readouterr().err

    @pytest.mark.parametrize(
        "extra",
        [
            ["--protocol", "random-label"],
            ["--protocol", "random-label", "--max-labels", "4"],
            ["--protocol", "one-label", "--max-labels", "2"],
        ],
    )
    def test_bad_label_cap_writes_nothing(self, tmp_path, capsys, extra):
        """Test an unusable label cap is a usage error raised before generation."""
        out = tmp_path / "data"
        code = main(["generate-data", "--out", str(out), "--n", "2", "--n-test", "0"] + extra)
        assert code == 2
        assert not out.exists()
        assert "max-labels" in capsys.readouterr().err

    def test_random_label_with_cap(self, tmp_path):
        """Test random-label with a valid cap generates a dataset."""
        out = tmp_path / "data"
        code = main(
            ["generate-data", "--out", str(out), "--n", "2", "--n-test", "0", "--hw", "16"]
            + ["--protocol", "random-label", "--max-labels", "2"]
        )
        assert code == 0
        assert (out / "manifest.txt").exists()


class TestPipeline:
    """Tests for the end-to-end command-line workflow."""

    def test_exit_codes(self, pipeline):
        """Test generate-data, train and evaluate succeed."""
        _, codes = pipeline
        assert codes == [0, 0, 0]

    def test_run_outputs(self, pipeline):
        """Test the run directory holds checkpoint, metrics and config."""
        root, _ = pipeline
        for name in ("checkpoint.pmtl", "metrics.csv", "config.txt"):
            assert (root / "run" / name).exists()
        assert len(read_csv(root / "run" / "metrics.csv")) == 1

    def test_report(self, pipeline):
        """Test the evaluation report covers every task."""
        root, _ = pipeline
        report = read_report(root / "report.csv")
        assert report.tasks == ["semseg", "depth", "normal"]
        assert report.protocol == "one-label"

    def test_baseline_comparison(self, pipeline):
        """Test comparing against a report of the same run gives zero deltas."""
        root, _ = pipeline
        code = main(
            ["evaluate", "--checkpoint", str(root / "run" / "checkpoint.pmtl")]
            + ["--data", str(root / "data"), "--out", str(root / "again.csv")]
            + ["--baseline", str(root / "report.csv")]
        )
        assert code == 0
        rows = read_csv(root / "again_comparison.csv")
        deltas = {r["task"]: float(r["delta"]) for r in rows}
        assert deltas["semseg"] == deltas["depth"] == deltas["normal"] == 0.0
        assert deltas["mean_rank_baseline"] == deltas["mean_rank_this"] == 1.5

    def test_inspect_prototype(self, pipeline):
        """Test the inspection dumps including attention."""
        root, _ = pipeline
        out = root / "inspect"
        code = main(
            ["inspect-prototype", "--checkpoint", str(root / "run" / "checkpoint.pmtl")]
            + ["--data", str(root / "data"), "--out", str(out), "--attention"]
        )
        assert code == 0
        assert {p.name for p in out.iterdir()} == {
            "affinity.csv",
            "prototype.csv",
            "prototype_similarity.csv",
            "attention.csv",
        }

    def test_resume(self, pipeline):
        """Test resuming for one more epoch extends the history."""
        root, _ = pipeline
        code = main(
            ["train", "--config", str(root / "tiny.txt"), "--data", str(root / "data")]
            + ["--out", str(root / "resumed"), "--epochs", "2"]
            + ["--resume", str(root / "run" / "checkpoint.pmtl")]
        )
        assert code == 0
        assert len(read_csv(root / "resumed" / "metrics.csv")) == 2

    def test_ablate(self, pipeline, capsys):
        """Test a one-seed loss ablation prints ranks and writes its tables."""
        root, _ = pipeline
        out = root / "ablation"
        code = main(
            ["ablate", "--config", str(root / "tiny.txt"), "--data", str(root / "data")]
            + ["--out", str(out), "--seeds", "0"]
        )
        assert code == 0
        assert len(capsys.readouterr().out.strip().splitlines()) == 4
        assert len(read_csv(out / "ablation.csv")) == 4

    def test_corrupt_checkpoint(self, pipeline, tmp_path, capsys):
        """Test a corrupted checkpoint is a runtime failure."""
        root, _ = pipeline
        broken = tmp_path / "broken.pmtl"
        broken.write_bytes((root / "run" / "checkpoint.pmtl").read_bytes()[:100])
        code = main(
            ["evaluate", "--checkpoint", str(broken), "--data", str(root / "data")]
            + ["--out", str(tmp_path / "r.csv")]
        )
        assert code == 1
        assert "error" in capsys.readouterr().err
        assert not (tmp_path / "r.csv").exists()


class TestGradcheckCommand:
    """Tests for the gradcheck subcommand."""

    def test_passes(self, capsys):
        """Test the suite passes and prints one line per check."""
        assert main(["gradcheck"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 7
        assert all(line.endswith("ok") for line in lines)

    def test_impossible_tolerance_fails(self):
        """Test a zero tolerance fails every check."""
        assert main(["gradcheck", "--tolerance", "0"]) == 1
