import filecmp
import json

import pytest
from PIL import Image

from drgan import cli
from drgan.errors import NumericError

TINY = [
    "--profile", "smoke",
    "--set", "generator.base_channels=4",
    "--set", "generator.n_residual_blocks=1",
    "--set", "generator.style_dim=16",
    "--set", "generator.mapping_hidden=16",
    "--set", "disc.base_channels=4",
    "--set", "batch_gan=2",
    "--set", "epochs_stage1=1",
    "--set", "epochs_stage2=1",
    "--set", "epochs_pretrain=1",
    "--set", "grader_base_channels=4",
]


@pytest.fixture
def run_dir(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.RUN_DIR_ENV, str(tmp_path / "run"))
    return tmp_path / "run"


def dirs_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    files = [p.relative_to(a) for p in a.rglob("*") if p.is_file()]
    return all((a / f).read_bytes() == (b / f).read_bytes() for f in files)


def test_gen_data_balanced_and_deterministic(run_dir, tmp_path):
    assert cli.main(["gen-data", "--per-grade", "2", "--resolution", "64", "--seed", "4"]) == 0
    assert len(list((run_dir / "data").iterdir())) == 10
    assert cli.main(["gen-data", "--per-grade", "2", "--resolution", "64", "--seed", "4", "--out", str(tmp_path / "again")]) == 0
    assert dirs_equal(run_dir / "data", tmp_path / "again")
    echo = json.loads((run_dir / "gen-data.resolved.json").read_text())
    assert echo["config"]["seed"] == 4 and echo["command"] == "gen-data"


def test_gen_data_imbalanced(run_dir):
    assert cli.main(["gen-data", "--imbalanced", "eyepacs", "--total", "1000", "--resolution", "64"]) == 0
    grades = [json.loads(p.read_text())["grade"] for p in (run_dir / "data").glob("*/meta.json")]
    assert [grades.count(g) for g in range(5)] == [737, 69, 149, 23, 22]


def test_full_pipeline(run_dir, tmp_path):
    # SWD needs 16 images per side
    assert cli.main(["gen-data", "--per-grade", "4", "--resolution", "64"]) == 0
    data = str(run_dir / "data")
    assert cli.main(["pretrain-grader", "--data", data] + TINY) == 0
    assert (run_dir / "grader" / "grader.bin").is_file()
    assert cli.main(["fit-spaces", "--data", data] + TINY) == 0
    assert cli.main(["train", "--data", data, "--spaces", str(run_dir / "grade_spaces.json"), "--ablate", "no_sca"] + TINY) == 0
    echo = json.loads((run_dir / "train.resolved.json").read_text())
    assert echo["config"]["ablation.no_sca"] is True

    assert cli.main(["synthesize", "--per-grade", "3"]) == 0
    images = list((run_dir / "synth" / "images").glob("*/image.png"))
    assert len(images) == 15
    grids = sorted(p.name for p in (run_dir / "synth" / "grids").iterdir())
    assert grids == [f"grade_{g}.png" for g in range(5)]
    with Image.open(run_dir / "synth" / "grids" / "grade_0.png") as im:
        assert im.size == (3 * 64, 64)
    for p in (run_dir / "synth" / "images").glob("*g3_*/meta.json"):
        assert json.loads(p.read_text())["grade"] == 3

    assert cli.main(["synthesize", "--per-grade", "3", "--out", str(tmp_path / "s2")]) == 0
    assert dirs_equal(run_dir / "synth" / "images", tmp_path / "s2" / "images")

    out = tmp_path / "self.json"
    assert cli.main(["evaluate", "--real", data, "--fake", data, "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["fid"] == pytest.approx(0.0, abs=1e-8)
    assert report["swd_avg"] == pytest.approx(0.0, abs=1e-9)


def test_resume_continues_step_counter(run_dir):
    assert cli.main(["gen-data", "--per-grade", "2", "--resolution", "64"]) == 0
    data = str(run_dir / "data")
    args = ["train", "--data", data] + TINY
    with pytest.warns(UserWarning):
        assert cli.main(args) == 0
    ck1 = run_dir / "checkpoints" / "epoch_001"
    assert json.loads((ck1 / "manifest.json").read_text())["step"] == 5
    assert cli.main(["train", "--data", data, "--resume", str(ck1)]) == 0
    assert json.loads((run_dir / "checkpoints" / "epoch_002" / "manifest.json").read_text())["step"] == 10
    steps = [int(r.split(",")[0]) for r in (run_dir / "train_log.csv").read_text().splitlines()[1:]]
    assert steps == list(range(1, 11))


def test_ab_harness_emits_paired_reports(run_dir, tmp_path):
    assert cli.main(["gen-data", "--per-grade", "2", "--resolution", "64", "--seed", "1"]) == 0
    assert cli.main(["gen-data", "--per-grade", "1", "--resolution", "64", "--seed", "2", "--out", str(tmp_path / "test")]) == 0
    out = tmp_path / "ab" / "report.json"
    argv = ["evaluate", "--real", str(run_dir / "data"), "--test", str(tmp_path / "test"), "--seeds", "0", "1",
            "--out", str(out), "--set", "epochs_pretrain=1", "--set", "grader_base_channels=4"]
    assert cli.main(argv) == 0
    for name in ("ab_real_seed0.json", "ab_realfake_seed0.json", "ab_real_seed1.json", "ab_deltas.json", "report.csv"):
        assert (out.parent / name).is_file()
    deltas = json.loads((out.parent / "ab_deltas.json").read_text())
    assert [d["accuracy"] for d in deltas] == [0.0, 0.0]


def test_missing_directory_is_exit_2(run_dir, tmp_path, capsys):
    assert cli.main(["evaluate", "--real", str(tmp_path / "nowhere")]) == 2
    assert "nowhere" in capsys.readouterr().err


def test_bad_config_is_exit_2(run_dir, tmp_path):
    assert cli.main(["gen-data", "--set", "no_such_key=1"]) == 2
    assert cli.main(["gen-data", "--set", "lr_gan=-1"]) == 2


def test_numeric_abort_is_exit_3(run_dir, monkeypatch, capsys):
    import drgan.trainer

    assert cli.main(["gen-data", "--per-grade", "2", "--resolution", "64"]) == 0

    def boom(*a, **k):
        raise NumericError("non-finite loss", "ckpt/epoch_001")

    monkeypatch.setattr(drgan.trainer, "train", boom)
    assert cli.main(["train", "--data", str(run_dir / "data")] + TINY) == 3
    err = capsys.readouterr().err
    assert "non-finite" in err and "ckpt/epoch_001" in err


def test_synthesize_without_checkpoint_is_exit_2(run_dir):
    assert cli.main(["synthesize"]) == 2


def test_contact_sheet_layout():
    import numpy as np

    imgs = [np.full((4, 4, 3), i / 10, dtype=np.float32) for i in range(10)]
    sheet = cli.contact_sheet(imgs, columns=4)
    assert sheet.size == (16, 12)
    arr = np.asarray(sheet)
    assert arr[4, 4, 0] == round(0.5 * 255)
