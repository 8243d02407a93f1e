import csv
import hashlib
import json
from pathlib import Path

import pytest

from mecmorl import checks, cli
from mecmorl.config import ConfigError, ExperimentConfig

ROOT = Path(__file__).resolve().parents[1]
DESK = str(ROOT / "configs" / "desk.cfg")

TINY = ["trainer.n_epochs=2", "trainer.n_envs=2", "trainer.batch_size=16",
        "trainer.encoder_widths=(8,)", "trainer.trunk_widths=(8,)", "trainer.head_widths=()",
        "trainer.n_bins=6", "trainer.calibrate_alpha=False", "trainer.alpha_e=40.0",
        "sim.num_steps=6", "eval.episodes=2", "eval.n_preferences=3",
        "baseline.random_grid=3", "baseline.sa_budget=5", "baseline.linucb_episodes=1"]


def _tiny(cmd, out, *extra):
    args = [cmd, "--config", DESK, "--out", str(out), "--quiet"]
    for s in TINY:
        args += ["--set", s]
    return args + list(extra)


class TestConfig:
    def test_round_trip(self):
        cfg = ExperimentConfig.load(DESK)
        again = ExperimentConfig.loads(cfg.dumps())
        assert again == cfg
        assert again.dumps() == cfg.dumps()

    def test_missing_seed(self):
        with pytest.raises(ConfigError, match="seed"):
            ExperimentConfig.loads("trainer.n_epochs = 3")

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            ExperimentConfig.loads("experiment.seed = 0\ntrainer.bogus = 1")

    def test_duplicate_key(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.loads("experiment.seed = 0\nexperiment.seed = 1")

    def test_override(self):
        cfg = ExperimentConfig.load(DESK).override(["trainer.n_epochs=7", "sim.num_steps=9"])
        assert cfg.trainer.n_epochs == 7 and cfg.sim.num_steps == 9

    def test_eval_grid(self):
        cfg = ExperimentConfig.load(DESK)
        prefs = cfg.eval_preferences()
        assert len(prefs) == 11 and prefs[0] == (0.0, 1.0)
        assert cfg.eval_context().num_edges == 2


class TestExitCodes:
    def test_missing_seed_exits_1(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("trainer.n_epochs = 3\n")
        assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
        assert "seed" in capsys.readouterr().err

    def test_unknown_scheme_lists_valid(self, tmp_path, capsys):
        code = cli.main(["baseline", "--config", DESK, "--scheme", "greedy",
                         "--out", str(tmp_path)])
        assert code == 1
        err = capsys.readouterr().err
        assert all(s in err for s in cli.SCHEMES)

    def test_check_passes(self, capsys):
        assert cli.main(["check", "--quick", "--suite", "balance", "--suite", "masks"]) == 0
        assert "2/2 suites passed" in capsys.readouterr().out

    def test_check_failure_exits_2(self, monkeypatch, tmp_path):
        from mecmorl.checks import CheckResult

        def broken(seed=0):
            return CheckResult("broken", False, 1, "forced", ["case 0"], 0.0)
        monkeypatch.setitem(checks.SUITES, "broken", broken)
        assert cli.main(["check", "--suite", "broken"]) == 2

    def test_unknown_suite(self, capsys):
        assert cli.main(["check", "--suite", "nope"]) == 1
        assert "delay-oracle" in capsys.readouterr().err


class TestCommands:
    def test_train_eval_front(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env"))
        out = tmp_path / "train"
        assert cli.main(_tiny("train", out)) == 0
        for name in ("policy.ckpt", "training_log.csv", "training_curve.csv", "manifest.json",
                     "checksums.sha256", "curve_scalar_reward.svg"):
            assert (out / name).exists(), name
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 0 and manifest["command"] == "train"
        log = list(csv.DictReader(open(out / "training_log.csv")))
        assert len(log) == 4

        for line in (out / "checksums.sha256").read_text().split("\n"):
            if line:
                digest, name = line.split()
                assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest

        ev = tmp_path / "eval"
        assert cli.main(_tiny("eval", ev, "--checkpoint", str(out / "policy.ckpt"))) == 0
        rows = list(csv.DictReader(open(ev / "eval.csv")))
        assert len(rows) == 3
        assert [float(r["omega_t"]) for r in rows] == [0.0, 0.5, 1.0]

        fr = tmp_path / "front"
        assert cli.main(_tiny("front", fr, "--checkpoint", str(out / "policy.ckpt"))) == 0
        hv = {r["scheme"]: float(r["hv"]) for r in csv.DictReader(open(fr / "hypervolume.csv"))}
        assert set(hv) == {"gmorl", "random"}
        assert (fr / "front.svg").read_text().startswith("<?xml")

    def test_eval_rejects_too_many_edges(self, tmp_path, capsys):
        out = tmp_path / "t"
        cli.main(_tiny("train", out))
        code = cli.main(_tiny("eval", tmp_path / "e", "--checkpoint", str(out / "policy.ckpt"),
                              "--set", "eval.num_edges=5"))
        assert code == 1
        assert "e_max" in capsys.readouterr().err

    @pytest.mark.parametrize("scheme", ["random", "sa", "linucb"])
    def test_baselines(self, tmp_path, scheme):
        assert cli.main(_tiny("baseline", tmp_path, "--scheme", scheme)) == 0
        rows = list(csv.DictReader(open(tmp_path / f"baseline_{scheme}.csv")))
        assert len(rows) == 3
        assert all(r["scheme"] == scheme for r in rows)

    def test_default_output_dir_under_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path))
        args = ["baseline", "--config", DESK, "--scheme", "random", "--quiet"]
        for s in TINY:
            args += ["--set", s]
        assert cli.main(args) == 0
        assert (tmp_path / "runs" / "desk" / "baseline_random.csv").exists()

    def test_manifest_reused_as_config(self, tmp_path):
        first = tmp_path / "a"
        assert cli.main(_tiny("baseline", first, "--scheme", "random")) == 0
        second = tmp_path / "b"
        assert cli.main(["baseline", "--config", str(first / "manifest.json"), "--scheme",
                         "random", "--out", str(second)]) == 0
        assert ((first / "baseline_random.csv").read_bytes()
                == (second / "baseline_random.csv").read_bytes())

    def test_manifest_written_before_results(self, tmp_path, monkeypatch):
        seen = {}
        real = cli.cmd_baseline

        def spy(cfg, args, run):
            seen["manifest"] = (run.dir / "manifest.json").exists()
            return real(cfg, args, run)
        monkeypatch.setitem(cli.COMMANDS, "baseline", spy)
        assert cli.main(_tiny("baseline", tmp_path, "--scheme", "random")) == 0
        assert seen["manifest"]
