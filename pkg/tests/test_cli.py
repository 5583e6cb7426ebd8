"""Command line interface: exit codes, output formats, pipeline smoke."""

import json

import numpy as np
import pytest

from ppcn.cli import main


@pytest.fixture()
def quiet_errstate():
    with np.errstate(all="ignore"):
        yield


# ---------------------------------------------------------------------------
# global flags and simple commands

def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.startswith("ppcn ")


@pytest.mark.parametrize("structure,count", [
    ("4-8-16-8-3", "347"),
    ("4-128-96-48-32-3", "19347"),
    ("4-3", "15"),
])
def test_count_params_prints_count(capsys, structure, count):
    assert main(["count-params", "--structure", structure]) == 0
    assert capsys.readouterr().out.strip() == count


def test_count_params_rejects_single_layer():
    assert main(["count-params", "--structure", "4"]) == 2


def test_unknown_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


# ---------------------------------------------------------------------------
# thread environment

def test_malformed_thread_env_rejected(monkeypatch):
    monkeypatch.setenv("PPCN_THREADS", "lots")
    assert main(["count-params", "--structure", "4-3"]) == 2


def test_negative_thread_env_rejected(monkeypatch):
    monkeypatch.setenv("PPCN_THREADS", "-2")
    assert main(["count-params", "--structure", "4-3"]) == 2


def test_valid_thread_env_accepted(monkeypatch):
    monkeypatch.setenv("PPCN_THREADS", "1")
    assert main(["count-params", "--structure", "4-3"]) == 0


# ---------------------------------------------------------------------------
# gen-data

def test_gen_data_validations(tmp_path):
    out = str(tmp_path / "ds")
    assert main(["gen-data", "--out", out, "--count", "0"]) == 2
    assert main(["gen-data", "--out", out, "--count", "2", "--size", "64"]) == 2
    assert main(["gen-data", "--out", out, "--count", "2", "--noise", "-1"]) == 2
    assert main(["gen-data", "--out", out, "--count", "2", "--seed", "-1"]) == 2


def test_gen_data_count_message(caplog, tmp_path):
    main(["gen-data", "--out", str(tmp_path / "ds"), "--count", "0"])
    assert any("count must be >= 1" in r.message for r in caplog.records)


def test_gen_data_unknown_family_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--out", str(tmp_path / "ds"), "--count", "2",
              "--scene-family", "forest"])
    assert exc.value.code == 2


def test_gen_data_writes_dataset_and_manifest(tmp_path):
    out = tmp_path / "ds"
    assert main(["-q", "gen-data", "--out", str(out), "--count", "3",
                 "--size", "16x16", "--seed", "5"]) == 0
    assert (out / "manifest.json").is_file()
    assert (out / "samples" / "sample_00002_raw.ptns").is_file()
    run = json.loads((out / "run_manifest.json").read_text())
    assert run["command"] == "gen-data"
    assert run["config"]["count"] == 3
    assert "dataset" in run["format_versions"]


def test_gen_data_rerun_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["-q", "gen-data", "--out", str(out), "--count", "3",
                     "--size", "16x16", "--seed", "9"]) == 0
    for p in sorted(a.rglob("*")):
        if p.is_file():
            rel = p.relative_to(a)
            assert p.read_bytes() == (b / rel).read_bytes(), str(rel)


# ---------------------------------------------------------------------------
# fit / eval / export pipeline

def run_fit(out, data, *extra):
    return main(["-q", "fit", "--data", str(data), "--out", str(out),
                 "--structure", "4-6-3", "--epochs", "2", "--seed", "0",
                 *extra])


def test_fit_pipeline(tmp_path, mixed12_dir, capsys):
    out = tmp_path / "run"
    assert run_fit(out, mixed12_dir) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2
    assert lines[0].startswith("epoch=2 split=train loss=")
    assert lines[1].startswith("epoch=2 split=val loss=")

    csv = (out / "metrics.csv").read_text().splitlines()
    assert csv[0] == "epoch,split,loss,accuracy,seconds"
    assert len(csv) == 5
    assert (out / "checkpoints" / "final" / "checkpoint.json").is_file()

    run = json.loads((out / "run_manifest.json").read_text())
    assert run["command"] == "fit"
    assert run["config"]["structure"] == "4-6-3"
    assert "metrics.csv" in run["outputs"]
    assert run["outputs"] == sorted(run["outputs"])


def test_fit_requires_data(tmp_path):
    assert main(["-q", "fit", "--out", str(tmp_path / "r"),
                 "--structure", "4-6-3"]) == 2


def test_fit_rerun_is_byte_identical(tmp_path, mixed12_dir):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_fit(a, mixed12_dir) == 0
    assert run_fit(b, mixed12_dir) == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "run_manifest.json").read_bytes() == (b / "run_manifest.json").read_bytes()
    fa, fb = a / "checkpoints" / "final", b / "checkpoints" / "final"
    assert (fa / "checkpoint.json").read_bytes() == (fb / "checkpoint.json").read_bytes()
    for p in sorted((fa / "arrays").iterdir()):
        assert p.read_bytes() == (fb / "arrays" / p.name).read_bytes(), p.name


def test_eval_matches_logged_val_row(tmp_path, mixed12_dir, capsys):
    out = tmp_path / "run"
    assert run_fit(out, mixed12_dir) == 0
    fit_out = capsys.readouterr().out.strip().splitlines()
    val_line = [l for l in fit_out if "split=val" in l][0]
    logged_loss = val_line.split("loss=")[1].split()[0]

    assert main(["-q", "eval", "--checkpoint", str(out / "checkpoints" / "final"),
                 "--data", str(mixed12_dir), "--split", "val"]) == 0
    eval_line = capsys.readouterr().out.strip()
    assert f"loss={logged_loss}" in eval_line
    assert "epoch=2" in eval_line


def test_eval_missing_checkpoint_is_io_error(tmp_path, mixed12_dir):
    assert main(["-q", "eval", "--checkpoint", str(tmp_path / "nope"),
                 "--data", str(mixed12_dir)]) == 3


def test_eval_missing_dataset_is_io_error(tmp_path, mixed12_dir):
    out = tmp_path / "run"
    assert run_fit(out, mixed12_dir) == 0
    assert main(["-q", "eval", "--checkpoint", str(out / "checkpoints" / "final"),
                 "--data", str(tmp_path / "nodata")]) == 3


def test_export_writes_planes_and_images(tmp_path, mixed12_dir):
    from PIL import Image
    from ppcn.ptns import read_ptns

    run = tmp_path / "run"
    assert run_fit(run, mixed12_dir) == 0
    out = tmp_path / "export"
    assert main(["-q", "export", "--checkpoint", str(run / "checkpoints" / "final"),
                 "--input", str(mixed12_dir), "--index", "1",
                 "--out", str(out)]) == 0
    for k in range(3):
        assert (out / f"out_ch{k}.ptns").is_file()
        assert (out / f"out_ch{k}.png").is_file()

    plane = read_ptns(out / "out_ch0.ptns")
    assert plane.shape == (32, 32)
    img = Image.open(out / "out_ch0.png")
    assert img.size == (32, 32) and img.mode == "L"
    lo, hi = float(plane.min()), float(plane.max())
    expect = np.rint((plane.astype(np.float64) - lo) / (hi - lo) * 255).astype(np.uint8)
    assert np.array_equal(np.asarray(img), expect)


def test_export_png16(tmp_path, mixed12_dir):
    from PIL import Image

    run = tmp_path / "run"
    assert run_fit(run, mixed12_dir) == 0
    out = tmp_path / "export16"
    assert main(["-q", "export", "--checkpoint", str(run / "checkpoints" / "final"),
                 "--input", str(mixed12_dir), "--out", str(out),
                 "--format", "png16"]) == 0
    img = Image.open(out / "out_ch0.png")
    assert img.mode == "I;16"
    assert np.asarray(img).dtype == np.uint16


def test_export_rejects_baseline_checkpoint(tmp_path, distinct20_dir, caplog):
    run = tmp_path / "run"
    assert main(["-q", "train-joint", "--data", str(distinct20_dir),
                 "--out", str(run), "--strategy", "s0_only", "--epochs", "1",
                 "--head-channels", "4,4"]) == 0
    assert main(["-q", "export", "--checkpoint", str(run / "checkpoints" / "final"),
                 "--input", str(distinct20_dir), "--out", str(tmp_path / "x")]) == 2
    assert any("no fusion network" in r.message for r in caplog.records)


def test_export_bad_index(tmp_path, mixed12_dir):
    run = tmp_path / "run"
    assert run_fit(run, mixed12_dir) == 0
    assert main(["-q", "export", "--checkpoint", str(run / "checkpoints" / "final"),
                 "--input", str(mixed12_dir), "--index", "99",
                 "--out", str(tmp_path / "x")]) == 2


# ---------------------------------------------------------------------------
# numerics exit code

def test_divergent_fit_returns_numerics_code(tmp_path, mixed12_dir, quiet_errstate):
    assert main(["-q", "fit", "--data", str(mixed12_dir),
                 "--out", str(tmp_path / "run"), "--structure", "4-3",
                 "--epochs", "2", "--lr", "1e45"]) == 4


# ---------------------------------------------------------------------------
# resume

def test_resume_continues_and_matches_full_run(tmp_path, mixed12_dir):
    full = tmp_path / "full"
    assert main(["-q", "fit", "--data", str(mixed12_dir), "--out", str(full),
                 "--structure", "4-6-3", "--epochs", "4", "--seed", "0"]) == 0

    short = tmp_path / "short"
    assert run_fit(short, mixed12_dir) == 0     # epochs 2
    resumed = tmp_path / "resumed"
    assert main(["-q", "fit", "--resume", str(short / "checkpoints" / "final"),
                 "--out", str(resumed), "--epochs", "4"]) == 0

    csv = (resumed / "metrics.csv").read_text().splitlines()
    assert [l.split(",")[0] for l in csv[1:]] == ["3", "3", "4", "4"]
    full_csv = (full / "metrics.csv").read_text().splitlines()
    assert csv[1:] == full_csv[5:]              # epochs 3..4 rows byte-equal

    fa = full / "checkpoints" / "final" / "arrays"
    fb = resumed / "checkpoints" / "final" / "arrays"
    for p in sorted(fa.iterdir()):
        assert p.read_bytes() == (fb / p.name).read_bytes(), p.name


def test_resume_rejects_other_overrides(tmp_path, mixed12_dir):
    short = tmp_path / "short"
    assert run_fit(short, mixed12_dir) == 0
    assert main(["-q", "fit", "--resume", str(short / "checkpoints" / "final"),
                 "--out", str(tmp_path / "r"), "--epochs", "4",
                 "--lr", "0.5"]) == 2


# ---------------------------------------------------------------------------
# sweep

def test_sweep_strategies(tmp_path, distinct20_dir, capsys):
    out = tmp_path / "sw"
    assert main(["-q", "sweep", "--data", str(distinct20_dir), "--out", str(out),
                 "--structure", "4-6-3", "--epochs", "1", "--head-channels", "4,4",
                 "--strategies", "ppcn,s0_only"]) == 0
    printed = capsys.readouterr().out.strip().splitlines()
    assert len(printed) == 2
    assert printed[0].startswith("label=ppcn seed=0 split=val")
    csv = (out / "sweep.csv").read_text().splitlines()
    assert csv[0] == "label,seed,split,loss,accuracy,iou_class1,iou_class2"
    assert len(csv) == 3
    assert (out / "run_ppcn_seed0" / "metrics.csv").is_file()
    assert (out / "run_s0_only_seed0" / "metrics.csv").is_file()


def test_sweep_outputs_axis_fit_mode(tmp_path, mixed12_dir, capsys):
    out = tmp_path / "sw"
    assert main(["-q", "sweep", "--mode", "fit", "--data", str(mixed12_dir),
                 "--out", str(out), "--structure", "4-6-3", "--epochs", "1",
                 "--outputs", "3", "--seeds", "0,1"]) == 0
    printed = capsys.readouterr().out.strip().splitlines()
    assert [l.split()[0] for l in printed] == ["label=x3", "label=x3"]
    csv = (out / "sweep.csv").read_text().splitlines()
    assert len(csv) == 3


def test_sweep_rejects_resume(tmp_path, mixed12_dir):
    assert main(["-q", "sweep", "--data", str(mixed12_dir),
                 "--out", str(tmp_path / "sw"), "--structure", "4-6-3",
                 "--outputs", "3", "--resume", "somewhere"]) == 2


def test_sweep_requires_an_axis(tmp_path, mixed12_dir):
    with pytest.raises(SystemExit) as exc:
        main(["-q", "sweep", "--data", str(mixed12_dir),
              "--out", str(tmp_path / "sw"), "--structure", "4-6-3"])
    assert exc.value.code == 2


# ---------------------------------------------------------------------------
# run manifest canonical form

def test_run_manifest_is_canonical_json(tmp_path, mixed12_dir):
    out = tmp_path / "run"
    assert run_fit(out, mixed12_dir) == 0
    raw = (out / "run_manifest.json").read_text()
    doc = json.loads(raw)
    assert raw == json.dumps(doc, sort_keys=True, separators=(",", ": "), indent=1) + "\n"
    assert set(doc) == {"command", "config", "format_versions", "outputs", "tool_version"}
    assert "run_manifest.json" not in doc["outputs"]
