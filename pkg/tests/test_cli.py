import json

import numpy as np
import pytest

from isfno import cli
from isfno import datasets as ds
from isfno import models as md


def run(argv):
    return cli.main(argv)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    code = run(["gen-data", "--family", "ks", "--beta", "10", "--n-seq", "3",
                "--grid", "64", "--snapshots", "8", "--dt", "0.15",
                "--seed", "5", "--out", str(out)])
    assert code == 0
    return out / "dataset.isfn"


def test_gen_data_produces_loadable_file(small_dataset):
    dataset = ds.load(small_dataset)
    assert dataset.data.shape == (3, 8, 64, 1)
    manifest = json.loads((small_dataset.parent / "manifest.json").read_text())
    assert manifest["command"] == "gen-data"
    assert manifest["config"]["dataset"]["seed"] == 5
    assert "version" in manifest


def test_gen_data_same_seed_identical(tmp_path):
    args = ["gen-data", "--family", "ks", "--beta", "4", "--n-seq", "2",
            "--grid", "32", "--snapshots", "4", "--dt", "0.15", "--seed", "9"]
    assert run(args + ["--out", str(tmp_path / "a")]) == 0
    assert run(args + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "dataset.isfn").read_bytes()
    b = (tmp_path / "b" / "dataset.isfn").read_bytes()
    assert a == b


def test_gen_data_reproducible_from_manifest(tmp_path):
    first = tmp_path / "first"
    assert run(["gen-data", "--family", "kdv", "--grid", "64", "--n-seq", "2",
                "--snapshots", "4", "--dt", "0.01",
                "--sampler", "soliton_superposition",
                "--seed", "3", "--out", str(first)]) == 0
    second = tmp_path / "second"
    assert run(["gen-data", "--config", str(first / "manifest.json"),
                "--out", str(second)]) == 0
    assert (first / "dataset.isfn").read_bytes() == (second / "dataset.isfn").read_bytes()


def test_missing_required_flag_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        run(["train", "--data", "whatever.isfn"])  # no --variant
    assert exc.value.code == 2


def test_unknown_variant_lists_valid_names(capsys):
    with pytest.raises(SystemExit) as exc:
        run(["train", "--variant", "bogus", "--data", "x.isfn"])
    assert exc.value.code == 2
    err = capsys.readouterr().err
    for name in md.VARIANTS:
        assert name in err


def test_train_rollout_autocorr_pipeline(small_dataset, tmp_path, capsys):
    train_out = tmp_path / "train"
    code = run(["train", "--variant", "isfno_o", "--data", str(small_dataset),
                "--epochs", "2", "--horizon", "2", "--width", "2", "--kmax", "4",
                "--hidden", "4", "--batch-size", "8", "--seed", "0",
                "--out", str(train_out)])
    assert code == 0
    ckpt = train_out / "model.isfm"
    assert ckpt.exists()
    report_lines = (train_out / "report.csv").read_text().strip().splitlines()
    assert len(report_lines) == 2 + 1  # header + one row per epoch
    capsys.readouterr()

    roll_out = tmp_path / "roll"
    code = run(["rollout", "--checkpoint", str(ckpt), "--data", str(small_dataset),
                "--steps", "6", "--ensemble", "2", "--out", str(roll_out)])
    assert code == 0
    curve_lines = (roll_out / "horizon_error.csv").read_text().strip().splitlines()
    assert len(curve_lines) == 6 + 1
    traj = ds.load(roll_out / "rollout.isfn")
    assert traj.data.shape == (1, 7, 64, 1)
    capsys.readouterr()

    ac_out = tmp_path / "ac"
    code = run(["autocorr", "--checkpoint", str(ckpt), "--data", str(small_dataset),
                "--window-start", "2", "--window-end", "6", "--ensemble", "1",
                "--out", str(ac_out)])
    assert code == 0
    lines = (ac_out / "autocorr.csv").read_text().strip().splitlines()
    first = lines[1].split(",")
    assert first[0] == "0" and float(first[1]) == pytest.approx(1.0)


def test_rollout_identity_model_repeats_ic(small_dataset, tmp_path, capsys):
    # a freshly built reversible model is the identity; rollout echoes the IC
    spec = md.ModelSpec("isfno_prime", d_v=1, width=2, kmax=(4,), n_steps=2, hidden=4)
    model = md.build(spec, seed=1)
    ckpt = tmp_path / "ident.isfm"
    md.save_checkpoint(model, ckpt)
    out = tmp_path / "roll"
    code = run(["rollout", "--checkpoint", str(ckpt), "--data", str(small_dataset),
                "--steps", "4", "--ensemble", "1", "--out", str(out)])
    assert code == 0
    traj = ds.load(out / "rollout.isfn").data[0]
    for j in range(1, 5):
        assert np.array_equal(traj[j], traj[0])


def test_ist_demo_prints_eigenvalue(tmp_path, capsys):
    out = tmp_path / "ist"
    code = run(["ist-demo", "--s", "2.0", "--c", "20.0", "--grid", "512",
                "--length", "40", "--out", str(out)])
    assert code == 0
    printed = capsys.readouterr().out
    line = [l for l in printed.splitlines() if l.startswith("discrete eigenvalues")][0]
    # the s=2 soliton's bound state sits at -s/4
    eig = float(line.split(":")[1].split()[0])
    assert eig == pytest.approx(-0.5, abs=1e-3)
    fields = ds.load(out / "ist_fields.isfn")
    assert fields.data.shape[1] == 6


def test_ist_demo_empty_spectrum(tmp_path, capsys):
    out = tmp_path / "ist0"
    code = run(["ist-demo", "--empty", "--grid", "64", "--length", "40",
                "--out", str(out)])
    assert code == 0
    printed = capsys.readouterr().out
    assert "(empty spectrum)" in printed
    fields = ds.load(out / "ist_fields.isfn")
    assert np.all(fields.data == 0.0)


def test_inspect_prints_headers(small_dataset, tmp_path, capsys):
    spec = md.ModelSpec("fno", d_v=1, width=2, kmax=(2,), n_steps=1, hidden=4)
    ckpt = tmp_path / "m.isfm"
    md.save_checkpoint(md.build(spec, seed=0), ckpt)
    assert run(["inspect", str(small_dataset), str(ckpt)]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    kinds = [json.loads(line)["kind"] for line in out if line.startswith("{")]
    assert kinds == ["ISFN", "ISFM"]
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"ZZZZ123")
    assert run(["inspect", str(bad)]) == cli.EXIT_IO


def test_io_error_exit_code(tmp_path):
    assert run(["inspect", str(tmp_path / "missing.isfn")]) == cli.EXIT_IO


def test_threads_flag_preserves_determinism(tmp_path):
    args = ["gen-data", "--family", "ks", "--beta", "4", "--n-seq", "4",
            "--grid", "32", "--snapshots", "4", "--dt", "0.15", "--seed", "2"]
    assert run(args + ["--threads", "1", "--out", str(tmp_path / "s")]) == 0
    assert run(args + ["--threads", "4", "--out", str(tmp_path / "t")]) == 0
    assert ((tmp_path / "s" / "dataset.isfn").read_bytes()
            == (tmp_path / "t" / "dataset.isfn").read_bytes())
