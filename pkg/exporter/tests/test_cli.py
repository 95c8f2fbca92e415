import shutil
import subprocess
import sys

import numpy as np

from cald_exporter import cli

from conftest import read_cald


def run(capsys, argv):
    rc = cli.main(argv)
    captured = capsys.readouterr()
    return rc, captured.out, captured.err


class TestExport:
    def test_success_prints_shape_and_accuracy(self, capsys, checkpoint,
                                               image_root, tmp_path):
        out = tmp_path / "cli.cald"
        rc, stdout, _ = run(capsys, ["export", "--model", str(checkpoint),
                                     "--dataset", str(image_root),
                                     "--split", "test", "--out", str(out)])
        assert rc == 0
        assert "n=10 d=16 k=2" in stdout
        printed = float(stdout.split("accuracy ")[1].strip())
        data = read_cald(out)
        assert printed == float(
            (np.argmax(data.logits, axis=1) == data.labels).mean())

    def test_cli_and_api_write_identical_bytes(self, capsys, exported,
                                               tmp_path):
        out = tmp_path / "again.cald"
        rc, _, _ = run(capsys, ["export", "--model", exported.job.model,
                                "--dataset", exported.job.dataset,
                                "--split", "test", "--out", str(out)])
        assert rc == 0
        assert out.read_bytes() == exported.path.read_bytes()

    def test_batch_size_flag_is_accepted(self, capsys, checkpoint, image_root,
                                         tmp_path):
        out = tmp_path / "b.cald"
        rc, _, _ = run(capsys, ["export", "--model", str(checkpoint),
                                "--dataset", str(image_root), "--split", "val",
                                "--out", str(out), "--batch-size", "1"])
        assert rc == 0
        assert read_cald(out).n == 4


class TestExitCodes:
    def test_unknown_model_is_2(self, capsys, image_root, tmp_path):
        rc, _, err = run(capsys, ["export", "--model", "no-such-model",
                                  "--dataset", str(image_root),
                                  "--split", "test",
                                  "--out", str(tmp_path / "x.cald")])
        assert rc == 2
        assert "unknown model" in err

    def test_unknown_dataset_is_2(self, capsys, checkpoint, tmp_path):
        rc, _, err = run(capsys, ["export", "--model", str(checkpoint),
                                  "--dataset", str(tmp_path / "nope"),
                                  "--split", "test",
                                  "--out", str(tmp_path / "x.cald")])
        assert rc == 2
        assert "unknown dataset" in err

    def test_unwritable_output_is_2(self, capsys, checkpoint, image_root,
                                    tmp_path):
        rc, _, err = run(capsys, ["export", "--model", str(checkpoint),
                                  "--dataset", str(image_root),
                                  "--split", "test",
                                  "--out", str(tmp_path / "missing" / "x.cald")])
        assert rc == 2

    def test_bad_split_choice_is_1(self, capsys, checkpoint, image_root,
                                   tmp_path):
        rc, _, _ = run(capsys, ["export", "--model", str(checkpoint),
                                "--dataset", str(image_root),
                                "--split", "dev",
                                "--out", str(tmp_path / "x.cald")])
        assert rc == 1

    def test_missing_required_flag_is_1(self, capsys):
        rc, _, _ = run(capsys, ["export", "--model", "m"])
        assert rc == 1

    def test_unknown_subcommand_is_1(self, capsys):
        rc, _, _ = run(capsys, ["impord"])
        assert rc == 1

    def test_help_is_0(self, capsys):
        rc, stdout, _ = run(capsys, ["--help"])
        assert rc == 0
        assert "export" in stdout


class TestBoundary:
    def test_importing_the_exporter_never_imports_the_toolkit(self):
        """The only shared surface is the CALD byte format."""
        code = ("import cald_exporter, cald_exporter.cli, cald_exporter.jobs; "
                "import sys; "
                "sys.exit(1 if [m for m in sys.modules "
                "if m.startswith('adacal')] else 0)")
        proc = subprocess.run([sys.executable, "-c", code])
        assert proc.returncode == 0

    def test_console_script_exists(self):
        script = shutil.which("cald-export")
        assert script is not None
        proc = subprocess.run([script, "--help"], capture_output=True,
                              text=True)
        assert proc.returncode == 0
        assert "export" in proc.stdout
