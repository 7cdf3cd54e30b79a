import csv

import numpy as np
import pytest

from queuenet.cli import main
from queuenet.control import DEFAULT_BAND
from queuenet.filter import run_day
from queuenet.gainnet import GainNet
from queuenet.io import load_day, read_section_config, save_model


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "scn.yaml").write_text("n_steps: 720\n")
    assert main(["simulate", "--scenario", str(root / "scn.yaml"), "--seed", "3", "--out", str(root / "day")]) == 0
    return root


def files(root, *names):
    return [str(root / "day" / n) for n in names]


def test_simulate_writes_day_and_config(sim_dir):
    for name in ("counts.csv", "afcd.csv", "truth.csv", "scenario.yaml", "section.yaml"):
        assert (sim_dir / "day" / name).exists()
    assert len(read_csv(sim_dir / "day" / "counts.csv")) == 720


def test_evaluate_identical_gives_zero(sim_dir, tmp_path):
    truth = sim_dir / "day" / "truth.csv"
    est = tmp_path / "est.csv"
    rows = read_csv(truth)
    with open(est, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_iso", "prior_m", "posterior_m"])
        for r in rows:
            w.writerow([r["t_iso"], r["queue_m"], r["queue_m"]])
    out = tmp_path / "m.csv"
    assert main(["evaluate", "--truth", str(truth), "--estimate", f"same={est}", "--out", str(out)]) == 0
    row = next(r for r in read_csv(out) if r["scope"] == "all_day")
    assert float(row["rmse_m"]) == 0.0 and float(row["mae_m"]) == 0.0


def test_estimate_then_evaluate_with_baselines(sim_dir, tmp_path):
    counts, afcd, section, truth = files(sim_dir, "counts.csv", "afcd.csv", "section.yaml", "truth.csv")
    est = tmp_path / "qekf.csv"
    trace = tmp_path / "trace.csv"
    assert main(["estimate", "--counts", counts, "--afcd", afcd, "--section", section, "--out", str(est),
                 "--trace", str(trace)]) == 0
    assert len(read_csv(est)) == 720 and "gain_0" in read_csv(trace)[0]
    out = tmp_path / "m.csv"
    assert main(["evaluate", "--truth", truth, "--estimate", f"QEKF={est}", "--baselines", "--afcd", afcd,
                 "--section", section, "--out", str(out)]) == 0
    methods = {r["method"] for r in read_csv(out)}
    assert methods == {"QEKF", "OSD", "ISC"}


def test_derive_control_and_fit_regimes(sim_dir, tmp_path):
    counts, afcd, section = files(sim_dir, "counts.csv", "afcd.csv", "section.yaml")
    assert main(["derive-control", "--counts", counts, "--section", section, "--mode", "online",
                 "--out", str(tmp_path / "u.csv")]) == 0
    assert len(read_csv(tmp_path / "u.csv")) == 720
    assert main(["fit-regimes", "--afcd", afcd, "--section", section, "--histogram", str(tmp_path / "h.csv"),
                 "--out", str(tmp_path / "s.yaml")]) == 0
    _, reg = read_section_config(tmp_path / "s.yaml")
    assert reg.v_free > reg.v_jam


@pytest.mark.parametrize("variant", ["qnet", "qekf"])
def test_realtime_equals_online_batch(sim_dir, tmp_path, variant):
    counts, afcd, section = files(sim_dir, "counts.csv", "afcd.csv", "section.yaml")
    extra = []
    if variant == "qnet":
        save_model(tmp_path / "m.npz", GainNet(seed=4), variant="qnet", band=list(DEFAULT_BAND))
        extra = ["--checkpoint", str(tmp_path / "m.npz")]
    out = tmp_path / "rt.csv"
    assert main(["realtime", "--counts", counts, "--afcd", afcd, "--section", section, "--out", str(out)]
                + extra) == 0
    geo, reg = read_section_config(section)
    day = load_day(counts, afcd, n_segments=geo.n_segments)
    net = GainNet(seed=4) if variant == "qnet" else None
    ref = run_day(day, geo, reg, variant, net=net, mode="online", band=DEFAULT_BAND)
    rows = read_csv(out)
    np.testing.assert_array_equal([float(r["posterior_m"]) for r in rows], ref.posterior_m)
    assert rows[0]["t_iso"] == day.t0.isoformat()


def test_train_smoke(sim_dir, tmp_path):
    (tmp_path / "m.yaml").write_text(f"section: {sim_dir}/day/section.yaml\ntrain: [{sim_dir}/day]\n"
                                     f"validation: [{sim_dir}/day]\n")
    ckpt = tmp_path / "model.npz"
    assert main(["train", "--manifest", str(tmp_path / "m.yaml"), "--out", str(ckpt), "--epochs", "1"]) == 0
    assert ckpt.exists() and len(read_csv(tmp_path / "model_metrics.csv")) == 1


class TestExitCodes:
    def test_usage(self, capsys):
        assert main([]) == 2
        assert main(["estimate", "--counts", "x"]) == 2
        assert main(["derive-control", "--counts", "c", "--section", "s", "--out", "o", "--band", "x"]) == 2

    def test_help(self, capsys):
        assert main(["--help"]) == 0

    def test_missing_file(self, tmp_path, capsys):
        assert main(["derive-control", "--counts", str(tmp_path / "no.csv"), "--section", str(tmp_path / "s"),
                     "--out", str(tmp_path / "u.csv")]) == 3
        assert "data error" in capsys.readouterr().err

    def test_misaligned_evaluate(self, sim_dir, tmp_path):
        est = tmp_path / "e.csv"
        est.write_text("t_iso,prior_m,posterior_m\n2020-01-01T00:00:00,0,0\n")
        assert main(["evaluate", "--truth", files(sim_dir, "truth.csv")[0], "--estimate", str(est),
                     "--out", str(tmp_path / "m.csv")]) == 3

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_failure(self, sim_dir, tmp_path, capsys):
        counts, afcd, section = files(sim_dir, "counts.csv", "afcd.csv", "section.yaml")
        net = GainNet(seed=0)
        net.store.param("d.fc_out.W")[...] = np.inf
        save_model(tmp_path / "bad.npz", net, variant="qnet")
        assert main(["estimate", "--counts", counts, "--afcd", afcd, "--section", section,
                     "--checkpoint", str(tmp_path / "bad.npz"), "--out", str(tmp_path / "e.csv")]) == 4
        assert "numeric error" in capsys.readouterr().err
