import pytest

from vqprompt.cli import main
from vqprompt.metrics import read_final_metrics

SMALL_CONFIG = """\
[data]
tasks = 2
samples_per_class = 40
pretrain_classes = 4
pretrain_samples_per_class = 60

[backbone]
pretrain_epochs = 3

[train]
seed = 77
epochs = 2
calibration_epochs = 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """generate -> pretrain once; several tests run from the same artifacts."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "exp.ini"
    config.write_text(SMALL_CONFIG)
    data = root / "data"
    ckpt = root / "backbone.ckpt"
    assert main(["generate", "--config", str(config), "--out", str(data)]) == 0
    assert main([
        "pretrain", "--config", str(config), "--data", str(data),
        "--out", str(ckpt),
    ]) == 0
    return config, data, ckpt, root


def _run(config, data, ckpt, out, mode=None, seed=None):
    argv = ["run", "--config", str(config), "--data", str(data),
            "--backbone", str(ckpt), "--out", str(out)]
    if mode:
        argv += ["--mode", mode]
    if seed is not None:
        argv += ["--seed", str(seed)]
    return main(argv)


def test_generate_writes_layout(workspace):
    _, data, _, _ = workspace
    names = {p.name for p in data.iterdir()}
    assert {"pretrain_train.bin", "pretrain_test.bin", "manifest.txt",
            "task_01_train.bin", "task_02_test.bin", "config.ini"} <= names


def test_run_emits_artifacts_and_snapshot(workspace):
    config, data, ckpt, root = workspace
    out = root / "run_vq"
    assert _run(config, data, ckpt, out) == 0
    assert (out / "metrics.csv").exists()
    assert (out / "config.ini").exists()
    final_faa, final_caa = read_final_metrics(out / "metrics.csv")
    assert 0.0 <= final_faa <= 1.0 and 0.0 <= final_caa <= 1.0


def test_identical_runs_are_byte_identical(workspace):
    config, data, ckpt, root = workspace
    first = root / "rep_a"
    second = root / "rep_b"
    assert _run(config, data, ckpt, first) == 0
    assert _run(config, data, ckpt, second) == 0
    assert (first / "metrics.csv").read_bytes() == (second / "metrics.csv").read_bytes()
    assert (first / "accuracy_matrix.csv").read_bytes() == \
        (second / "accuracy_matrix.csv").read_bytes()


def test_snapshot_reruns_identically(workspace):
    config, data, ckpt, root = workspace
    original = root / "orig"
    assert _run(config, data, ckpt, original) == 0
    replay = root / "replay"
    assert _run(original / "config.ini", data, ckpt, replay) == 0
    assert (original / "metrics.csv").read_bytes() == (replay / "metrics.csv").read_bytes()


def test_mode_flag_switches_calibration(workspace):
    config, data, ckpt, root = workspace
    out = root / "run_vqs"
    assert _run(config, data, ckpt, out, mode="vq-s") == 0
    snapshot = (out / "config.ini").read_text()
    assert "mode = vq-s" in snapshot


def test_report_degenerate_std_zero(workspace, capsys):
    config, data, ckpt, root = workspace
    runs = []
    for name in ("ra", "rb", "rc"):
        out = root / f"report_{name}"
        assert _run(config, data, ckpt, out) == 0
        runs.append(str(out))
    report = root / "report.csv"
    assert main(["report", *runs, "--out", str(report)]) == 0
    lines = report.read_text().splitlines()
    assert lines[0] == "mode,runs,faa_mean,faa_std,caa_mean,caa_std"
    assert len(lines) == 2
    mode, count, _, faa_std, _, caa_std = lines[1].split(",")
    assert mode == "vq" and count == "3"
    assert float(faa_std) == 0.0 and float(caa_std) == 0.0


def test_report_groups_modes(workspace):
    config, data, ckpt, root = workspace
    a = root / "grp_vq"
    b = root / "grp_none"
    assert _run(config, data, ckpt, a, mode="vq") == 0
    assert _run(config, data, ckpt, b, mode="none") == 0
    report = root / "grouped.csv"
    assert main(["report", str(a), str(b), "--out", str(report)]) == 0
    lines = report.read_text().splitlines()
    assert len(lines) == 3
    assert lines[1].startswith("none,1,") and lines[2].startswith("vq,1,")


def test_overlapping_tasks_exit_nonzero(workspace, tmp_path, capsys):
    config, data, ckpt, root = workspace
    import shutil
    broken = tmp_path / "broken_data"
    shutil.copytree(data, broken)
    # duplicate task 1 as task 2: label sets now overlap
    shutil.copyfile(broken / "task_01_train.bin", broken / "task_02_train.bin")
    shutil.copyfile(broken / "task_01_test.bin", broken / "task_02_test.bin")
    code = _run(config, broken, ckpt, tmp_path / "broken_run")
    captured = capsys.readouterr()
    assert code == 1
    assert "error:" in captured.err
    assert captured.err.count("\n") == 1  # single-line diagnostic


def test_unknown_config_key_exit_nonzero(workspace, tmp_path, capsys):
    _, data, ckpt, _ = workspace
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nseed = 1\nbanana = 2\n")
    code = _run(bad, data, ckpt, tmp_path / "bad_run")
    captured = capsys.readouterr()
    assert code == 1 and "banana" in captured.err


def test_missing_seed_exit_nonzero(workspace, tmp_path, capsys):
    _, data, ckpt, _ = workspace
    bad = tmp_path / "noseed.ini"
    bad.write_text("[train]\nepochs = 1\n")
    code = _run(bad, data, ckpt, tmp_path / "noseed_run")
    captured = capsys.readouterr()
    assert code == 1 and "seed" in captured.err


def test_missing_data_directory_exit_nonzero(workspace, tmp_path, capsys):
    config, _, ckpt, _ = workspace
    code = _run(config, tmp_path / "nowhere", ckpt, tmp_path / "out")
    captured = capsys.readouterr()
    assert code == 1 and captured.err.startswith("error:")
    assert captured.err.count("\n") == 1


def test_report_on_incomplete_run_dir_exit_nonzero(tmp_path, capsys):
    bare = tmp_path / "bare_run"
    bare.mkdir()
    code = main(["report", str(bare)])
    captured = capsys.readouterr()
    assert code == 1 and captured.err.startswith("error:")
    assert captured.err.count("\n") == 1


def test_single_task_run_under_a_minute(frozen_backbone, tmp_path):
    # default training settings, one task: the whole command stays well
    # inside the smoke budget
    import time

    from vqprompt.checkpoint import save_backbone

    backbone, _ = frozen_backbone
    ckpt = tmp_path / "backbone.ckpt"
    save_backbone(ckpt, backbone)
    config = tmp_path / "exp.ini"
    config.write_text("[data]\ntasks = 1\n\n[train]\nseed = 88\n")
    data = tmp_path / "data"
    assert main(["generate", "--config", str(config), "--out", str(data)]) == 0
    started = time.time()
    assert _run(config, data, ckpt, tmp_path / "run") == 0
    assert time.time() - started < 60.0


def test_sweep_emits_grid_csvs(workspace, tmp_path):
    config_path, data, ckpt, _ = workspace
    sweep_config = tmp_path / "sweep.ini"
    sweep_config.write_text(
        "[train]\nseed = 77\nepochs = 1\ncalibration_epochs = 1\n\n"
        "[ablation]\nlambda_q_grid = 0.0,0.4\nlambda_c_grid = 0.1\n"
        "pool_size_grid = 4\nprompt_length_grid = 4,8\n"
    )
    out = tmp_path / "sweep"
    assert main([
        "sweep", "--config", str(sweep_config), "--data", str(data),
        "--backbone", str(ckpt), "--out", str(out),
    ]) == 0
    weights = (out / "sweep_loss_weights.csv").read_text().splitlines()
    assert weights[0] == "lambda_q,lambda_c,faa,caa"
    assert len(weights) == 1 + 2 * 1
    sizes = (out / "sweep_prompt_size.csv").read_text().splitlines()
    assert sizes[0] == "pool_size,prompt_length,faa,caa"
    assert len(sizes) == 1 + 1 * 2
    assert (out / "config.ini").exists()
