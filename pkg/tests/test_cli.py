import json
import subprocess
import sys

import pytest

from cirl_lab.cli import main, parse_seeds
from cirl_lab.errors import SchemaError
from cirl_lab.plotting import render

TINY = {"swarm": {"n_init": 2, "n_particles": 2, "n_iters": 2, "n_episodes": 1}}


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return str(p)


def test_parse_seeds():
    assert parse_seeds("0..3") == [0, 1, 2, 3]
    assert parse_seeds("5") == [5]
    assert parse_seeds("1,4") == [1, 4]


def test_train_writes_policies_and_curves(tmp_path, tiny_config, capsys):
    out = tmp_path / "run"
    rc = main(["train", "--agent", "cirl", "--seeds", "0..1", "--config", tiny_config,
               "--out", str(out)])
    assert rc == 0
    for s in (0, 1):
        assert (out / f"seed-{s}" / "policy.json").exists()
        assert (out / f"seed-{s}" / "learning_curve.csv").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["config_hash"]) == 64
    assert json.loads((out / "config.json").read_text())["seeds"] == [0, 1]
    assert "initial best" in capsys.readouterr().out


def test_train_rerun_byte_identical(tmp_path, tiny_config):
    for name in ("a", "b"):
        assert main(["train", "--agent", "rl", "--seeds", "3", "--config", tiny_config,
                     "--out", str(tmp_path / name)]) == 0
    for rel in ("seed-3/learning_curve.csv", "seed-3/policy.json"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_outputs_are_write_once(tmp_path, tiny_config):
    args = ["train", "--seeds", "0", "--config", tiny_config, "--out", str(tmp_path / "r")]
    assert main(args) == 0
    assert main(args) == 3


def test_default_root_from_environment(tmp_path, tiny_config, monkeypatch):
    monkeypatch.setenv("CIRL_LAB_OUT", str(tmp_path / "root"))
    assert main(["train", "--seeds", "0", "--config", tiny_config]) == 0
    runs = list((tmp_path / "root").iterdir())
    assert len(runs) == 1 and runs[0].name.startswith("train-")


def test_evaluate_summary_and_gain_csv(tmp_path, tiny_config):
    assert main(["train", "--seeds", "0", "--config", tiny_config,
                 "--out", str(tmp_path / "t")]) == 0
    policy = str(tmp_path / "t" / "seed-0" / "policy.json")
    summaries = []
    for name in ("e1", "e2"):
        assert main(["evaluate", "--policy", policy, "--scenario", "test", "--seeds", "7",
                     "--out", str(tmp_path / name)]) == 0
        summaries.append((tmp_path / name / "summary.json").read_text())
    assert summaries[0] == summaries[1]
    s = json.loads(summaries[0])
    assert set(s) == {"mean", "std", "per_seed"} and list(s["per_seed"]) == ["7"]
    gains = (tmp_path / "e1" / "seed-7" / "test" / "gains.csv").read_text().splitlines()
    assert gains[0] == "step,kp_cb,ti_cb,td_cb,kp_v,ti_v,td_v" and len(gains) == 121
    traj = (tmp_path / "e1" / "seed-7" / "test" / "trajectory.csv").read_text().splitlines()
    assert traj[0].startswith("step,time_min,c_a")


def test_tune_pid_writes_reference(tmp_path):
    cfg = tmp_path / "de.json"
    cfg.write_text(json.dumps({"de": {"pop_size": 4, "generations": 1}, "n_e": 1,
                               "scenario": "test"}))
    assert main(["tune-pid", "--config", str(cfg), "--out", str(tmp_path / "pid")]) == 0
    ref = json.loads((tmp_path / "pid" / "reference_gains.json").read_text())
    assert ref["cb_loop"]["kp"] == 3.09
    gains = str(tmp_path / "pid" / "gains.json")
    assert main(["evaluate", "--gains", gains, "--seeds", "0",
                 "--out", str(tmp_path / "ev")]) == 0


def test_rga_command(tmp_path, capsys):
    assert main(["rga", "--out", str(tmp_path / "rga")]) == 0
    out = capsys.readouterr().out
    assert "c_b <-> t_c" in out and "vol <-> f_in" in out
    lam = json.loads((tmp_path / "rga" / "rga.json").read_text())["rga"]
    for row in lam:
        assert sum(row) == pytest.approx(1.0, abs=1e-6)


def test_scenario_emit(tmp_path):
    out = tmp_path / "sc.json"
    assert main(["scenario", "emit", "training", "--out", str(out)]) == 0
    assert len(json.loads(out.read_text())) == 3
    assert main(["train", "--seeds", "0", "--scenario", str(out), "--config", "/nonexistent"]) == 2


def test_exit_codes(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"swarm": {"n_particle": 3}}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert main(["evaluate", "--policy", str(tmp_path / "missing.json"),
                 "--out", str(tmp_path / "y")]) == 3
    assert main(["train", "--seeds", "0", "--scenario", "nope", "--out", str(tmp_path / "z")]) == 3
    with pytest.raises(SystemExit) as exc:
        main(["train", "--agent", "dqn"])
    assert exc.value.code == 2


def test_divergence_exit_code(tmp_path):
    # an absurd feed step makes the reactor run away within one control interval
    sc = tmp_path / "sc.json"
    sc.write_text(json.dumps({"schedule": [[120, 0.5, 100.0]], "disturbance": [[0, 1e300]],
                              "n_s": 120}))
    gains = tmp_path / "g.json"
    gains.write_text(json.dumps({"cb_loop": {"kp": 1, "tau_i": 1, "tau_d": 0},
                                 "v_loop": {"kp": 0.5, "tau_i": 1, "tau_d": 0}}))
    assert main(["evaluate", "--gains", str(gains), "--scenario", str(sc), "--seeds", "0",
                 "--out", str(tmp_path / "d")]) == 4


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "cirl_lab", "--version"], capture_output=True,
                         text=True)
    assert res.returncode == 0 and res.stdout.strip()


class TestPlot:
    header = "step,time_min,c_a,c_b,c_c,temp,vol,cb_meas,t_meas,v_meas,cb_sp,v_sp,t_c,f_in,reward\n"

    def csv(self, scale=1.0):
        rows = [self.header]
        for k in range(5):
            rows.append(f"{k},{k * 0.2},0.1,{0.1 * k * scale},0,350,100,0.1,350,100,0.3,100,"
                        f"{300 + k},100,-0.1\n")
        return "".join(rows).encode()

    def test_identical_bytes(self):
        a = render([("x", self.csv())])
        b = render([("x", self.csv())])
        assert a == b and a.startswith("<svg")

    def test_missing_column_named(self):
        data = self.csv().replace(b",t_c,", b",tc,")
        with pytest.raises(SchemaError, match="'t_c'"):
            render([("x", data)])

    def test_overlay_three_controllers(self):
        svg = render([("cirl", self.csv(1)), ("pid", self.csv(2)), ("rl", self.csv(3))])
        for label in ("cirl", "pid", "rl"):
            assert f"<title>{label}</title>" in svg
        # five panels, three controllers each
        assert svg.count("<polyline") == 5 * 3 + 2

    def test_learning_and_gain_kinds(self):
        lc = b"iteration,best_fitness,mean_fitness,min_fitness,wall_time_s\n0,-3,-5,-9,\n1,-2,-4,-8,\n"
        assert "best fitness" in render([("a", lc)])
        g = b"step,kp_cb,ti_cb,td_cb,kp_v,ti_v,td_v\n0,1,2,3,0.1,0.2,0.3\n1,1,2,3,0.1,0.2,0.3\n"
        assert render([("a", g)]).count("<polyline") == 6

    def test_cli_plot(self, tmp_path):
        p = tmp_path / "traj.csv"
        p.write_bytes(self.csv())
        assert main(["plot", str(p), "--out", str(tmp_path / "fig.svg")]) == 0
        assert (tmp_path / "fig.svg").read_text().startswith("<svg")
        bad = tmp_path / "bad.csv"
        bad.write_bytes(b"step,foo\n0,1\n")
        assert main(["plot", str(bad), "--out", str(tmp_path / "bad.svg")]) == 3
