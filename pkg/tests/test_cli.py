import json
import subprocess
import sys

import numpy as np
import pytest

from dotfactor import cli, dotvae, metrics
from dotfactor import synthdata as sd

SMALL = dict(epochs=2, batch_size=64, K=3, d=2, enc_hidden=[32], dec_hidden=[32],
             disc_hidden=[8], warmup_epochs=1)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen-data", "--kind", "dsprites-mini", "--out", str(root / "data")]) == 0
    (root / "cfg.json").write_text(json.dumps(SMALL))
    assert cli.main(["train", "--data", str(root / "data"), "--config", str(root / "cfg.json"),
                     "--out", str(root / "run"), "--seed", "3"]) == 0
    return root


def test_gen_data_files_and_determinism(workdir, tmp_path):
    for name in ("grid.json", "images.bin", "factors.bin"):
        assert (workdir / "data" / name).exists()
    assert cli.main(["gen-data", "--kind", "dsprites-mini", "--out", str(tmp_path / "again")]) == 0
    for name in ("grid.json", "images.bin", "factors.bin"):
        assert (workdir / "data" / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_gen_data_refuses_non_empty_dir_without_force(workdir):
    assert cli.main(["gen-data", "--kind", "dsprites-mini", "--out", str(workdir / "data")]) == 2


def test_unknown_kind_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["gen-data", "--kind", "mnist", "--out", str(tmp_path)])
    assert exc.value.code == 2


def test_console_entry_point_exit_codes(tmp_path):
    run = lambda *a: subprocess.run([sys.executable, "-m", "dotfactor.cli", *a],  # noqa: E731
                                    capture_output=True, text=True)
    assert run("gen-data", "--kind", "nope", "--out", str(tmp_path)).returncode == 2
    assert run("eval", "--checkpoint", str(tmp_path / "missing")).returncode == 2
    assert run("report", str(tmp_path / "missing.json")).returncode == 2


def test_train_writes_log_and_checkpoint(workdir):
    run = workdir / "run"
    rows = (run / "train_log.csv").read_text().splitlines()
    assert rows[0] == "epoch,loss_elbo,loss_cycle,loss_adv_enc,loss_disc,kl_z,kl_c,active_set"
    assert len(rows) == 1 + SMALL["epochs"]
    cfg = json.loads((run / "run_config.json").read_text())
    assert cfg["seed"] == 3 and cfg["K"] == 3
    model, meta = dotvae.load_checkpoint(run / "checkpoint")
    assert model.config.K == 3 and meta["step"] == SMALL["epochs"]


def test_train_lambda_gamma_flags_match_library_fit(workdir, tmp_path):
    from dotfactor import trainer

    assert cli.main(["train", "--data", str(workdir / "data"), "--config", str(workdir / "cfg.json"),
                     "--out", str(tmp_path / "vae"), "--lambda", "0", "--gamma", "0"]) == 0
    cfg = trainer.TrainConfig.from_json({**SMALL, "lam": 0.0, "gamma": 0.0})
    ref = trainer.fit(cfg, sd.load_dataset(workdir / "data"))
    assert trainer.read_log(tmp_path / "vae" / "train_log.csv") == ref.log


def test_train_rejects_bad_config(workdir, tmp_path):
    (tmp_path / "bad.json").write_text(json.dumps({"not_a_field": 1}))
    assert cli.main(["train", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")]) == 2


def test_eval_report_roundtrip(workdir, capsys):
    out = workdir / "report.json"
    assert cli.main(["eval", "--checkpoint", str(workdir / "run" / "checkpoint"),
                     "--data", str(workdir / "data"), "--out", str(out), "--n-seeds", "2",
                     "--M", "200", "--label", "small"]) == 0
    report = metrics.MetricReport.load(out)
    raw = json.loads(out.read_text())
    for name in metrics.METRIC_NAMES:
        assert set(raw[name]) >= {"mean", "std", "seeds"} and raw[name]["seeds"] == [0, 1]
        assert 0.0 <= raw[name]["mean"] <= 1.0
    capsys.readouterr()
    assert cli.main(["report", str(out)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    body = lines[2:]
    assert len(body) == 6
    for line, (_, key) in zip(body, cli.REPORT_ROWS):
        mean = float(line.split()[-3])
        assert abs(mean - report.mean(key)) <= 5e-4 + 1e-12  # half a unit in the 3rd decimal


def test_eval_is_deterministic(workdir, tmp_path):
    args = ["eval", "--checkpoint", str(workdir / "run" / "checkpoint"), "--data",
            str(workdir / "data"), "--n-seeds", "1", "--M", "100"]
    assert cli.main(args + ["--out", str(tmp_path / "a.json")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b.json")]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def _fake_report(label, mig):
    scores = {n: {"mean": 0.5, "std": 0.0, "seeds": [0], "values": [0.5]} for n in metrics.METRIC_NAMES}
    scores["mig"] = {"mean": mig, "std": 0.0, "seeds": [0], "values": [mig]}
    return metrics.MetricReport(scores, [], [], [], {}, label)


def test_multi_report_sorted_by_mig(tmp_path, capsys):
    paths = []
    for label, mig in (("low", 0.1), ("high", 0.7), ("mid", 0.4)):
        _fake_report(label, mig).save(tmp_path / f"{label}.json")
        paths.append(str(tmp_path / f"{label}.json"))
    assert cli.main(["report", *paths]) == 0
    body = capsys.readouterr().out.strip().splitlines()[2:]
    assert [line.split()[0] for line in body] == ["high", "mid", "low"]


def test_traverse_layout(workdir):
    out = workdir / "trav"
    assert cli.main(["traverse", "--checkpoint", str(workdir / "run" / "checkpoint"),
                     "--data", str(workdir / "data"), "--out", str(out), "--images", "0,5"]) == 0
    for i in (0, 5):
        raw = (out / f"traverse_{i}.pgm").read_bytes()
        assert raw.startswith(b"P5\n")
        grid = cli.read_pnm(out / f"traverse_{i}.pgm")
        K, H, W = 3, 32, 32
        assert grid.shape == ((K + 2) * (H + 1) - 1, 7 * (W + 1) - 1)
        # separators are black and row 1 holds the original image
        assert (grid[H, :] == 0).all() and (grid[:, W] == 0).all()
        ds = sd.load_dataset(workdir / "data")
        np.testing.assert_array_equal(grid[:H, :W], np.rint(ds.images[i] * 255).astype(np.uint8))


def test_traverse_at_posterior_mean_reproduces_reconstruction(workdir):
    model, _ = dotvae.load_checkpoint(workdir / "run" / "checkpoint")
    image = sd.load_dataset(workdir / "data").images[7]
    mu = model.encode_means(image.reshape(1, -1))[0]
    for j in (1, 2, 3):
        grid = cli.traversal_grid(model, image, dims=[j], values=[mu[j - 1]])
        np.testing.assert_array_equal(grid[2 * 33:2 * 33 + 32], grid[33:33 + 32])


def test_traverse_dim_out_of_range(workdir, tmp_path):
    assert cli.main(["traverse", "--checkpoint", str(workdir / "run" / "checkpoint"),
                     "--data", str(workdir / "data"), "--out", str(tmp_path), "--dims", "4"]) == 2


def test_pnm_roundtrip(tmp_path):
    g = np.arange(12, dtype=np.uint8).reshape(3, 4)
    cli.write_pnm(tmp_path / "a.pgm", g)
    assert (tmp_path / "a.pgm").read_bytes() == b"P5\n4 3\n255\n" + g.tobytes()
    np.testing.assert_array_equal(cli.read_pnm(tmp_path / "a.pgm"), g)
    rgb = np.arange(24, dtype=np.uint8).reshape(2, 4, 3)
    cli.write_pnm(tmp_path / "b.ppm", rgb)
    np.testing.assert_array_equal(cli.read_pnm(tmp_path / "b.ppm"), rgb)


def test_threads_env_validation(monkeypatch, tmp_path):
    monkeypatch.setenv("DOTFACTOR_THREADS", "zero")
    assert cli.main(["gen-data", "--kind", "dsprites-mini", "--out", str(tmp_path / "x")]) == 2
    monkeypatch.setenv("DOTFACTOR_THREADS", "1")
    assert cli.main(["gen-data", "--kind", "dsprites-mini", "--out", str(tmp_path / "y")]) == 0
