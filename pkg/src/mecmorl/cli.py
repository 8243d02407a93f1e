"""Command line entry point: ``mecmorl {train,eval,front,baseline,check}``."""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig

SCHEMES = ("linucb", "sa", "random", "multipolicy")
EXIT_OK, EXIT_CONFIG, EXIT_CHECK = 0, 1, 2
OUTPUT_ENV = "MECMORL_OUTPUT"


# ----------------------------------------------------------------- run plumbing

class Run:
    """Output directory with a manifest written up front and checksums at the end."""

    def __init__(self, cfg: ExperimentConfig, command: str, out: str | None, extra: dict):
        root = Path(os.environ.get(OUTPUT_ENV, "."))
        self.dir = Path(out) if out else root / cfg.experiment.output_dir
        self.dir.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.artifacts: list[str] = []
        manifest = {
            "command": command,
            "seed": cfg.experiment.seed,
            "version": __version__,
            "started": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            "config_text": cfg.dumps(),
            "config": cfg.to_dict(),
            "arguments": extra,
        }
        path = self.dir / "manifest.json"
        if path.exists():
            path.unlink()
        path.write_text(json.dumps(manifest, indent=2, default=list) + "\n")
        path.chmod(0o444)

    def path(self, name: str) -> Path:
        self.artifacts.append(name)
        return self.dir / name

    def finish(self):
        lines = []
        for name in self.artifacts:
            digest = hashlib.sha256((self.dir / name).read_bytes()).hexdigest()
            lines.append(f"{digest}  {name}")
        (self.dir / "checksums.sha256").write_text("\n".join(lines) + "\n")


def load_config(path: str, overrides) -> ExperimentConfig:
    """Read a config file, or the config embedded in a run manifest."""
    p = Path(path)
    if p.suffix == ".json":
        try:
            text = json.loads(p.read_text())["config_text"]
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"cannot read manifest {path}: {exc}") from None
        cfg = ExperimentConfig.loads(text)
    else:
        cfg = ExperimentConfig.load(p)
    return cfg.override(overrides) if overrides else cfg


def reward_scales(cfg: ExperimentConfig) -> tuple[float, float]:
    from .sac import calibrate_reward_scales
    t = cfg.trainer
    if not t.calibrate_alpha:
        return t.alpha_t, t.alpha_e
    return calibrate_reward_scales(cfg.training_space(), cfg.sim, t.e_max, t.n_bins,
                                   t.calibration_episodes, cfg.experiment.seed, t.alpha_t)


def _svg(fig, path):
    import matplotlib
    matplotlib.rcParams["svg.hashsalt"] = "mecmorl"
    fig.savefig(path, format="svg", metadata={"Date": None})


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


# ----------------------------------------------------------------- commands

def cmd_train(cfg: ExperimentConfig, args, run: Run) -> int:
    from .estimators import GMORLScheduler
    from .sac import epoch_curve, write_training_log

    est = GMORLScheduler(cfg.trainer, cfg.sim, cfg.experiment.seed)
    n = cfg.trainer.n_epochs

    def progress(epoch, log):
        if not args.quiet and (epoch + 1) % max(1, n // 10) == 0:
            tail = [r["scalar_reward"] for r in log if r["epoch"] == epoch]
            print(f"epoch {epoch + 1}/{n}  mean scalar reward {np.mean(tail):.3f}", flush=True)

    est.fit(cfg.training_space(), progress=progress)
    est.save(run.path("policy.ckpt"))
    write_training_log(est.training_log_, run.path("training_log.csv"))
    curve = epoch_curve(est.training_log_)
    keys = [k for k in curve if k != "epoch"]
    with open(run.path("training_curve.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch"] + keys)
        for i, e in enumerate(curve["epoch"]):
            w.writerow([int(e)] + [repr(float(curve[k][i])) for k in keys])
    plt = _plt()
    for key, label in (("scalar_reward", "scalarized reward"), ("delay_total", "total delay (s)"),
                       ("energy_total", "total energy (J)")):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(curve["epoch"], curve[key], alpha=0.3, label="epoch mean")
        ax.plot(curve["epoch"], curve[key + "_smooth"], label="moving average")
        ax.set_xlabel("epoch")
        ax.set_ylabel(label)
        ax.legend()
        fig.tight_layout()
        _svg(fig, run.path(f"curve_{key}.svg"))
        plt.close(fig)
    return EXIT_OK


def _gmorl_points(cfg, checkpoint):
    from .estimators import GMORLScheduler
    est = GMORLScheduler.from_checkpoint(checkpoint, cfg.sim)
    if cfg.eval.num_edges > est.agent_.spec.e_max:
        raise ConfigError(f"eval context has {cfg.eval.num_edges} edge servers but the "
                          f"checkpoint supports e_max={est.agent_.spec.e_max}")
    return est.front(cfg.eval_context(), cfg.eval_preferences(), cfg.eval.episodes,
                     cfg.eval.seed)


def cmd_eval(cfg: ExperimentConfig, args, run: Run) -> int:
    from .pareto import write_front_csv
    points, size = _gmorl_points(cfg, args.checkpoint)
    write_front_csv(run.path("eval.csv"), points, size)
    if args.contexts:
        _generalization(cfg, args, run)
    return EXIT_OK


def _generalization(cfg, args, run):
    from .estimators import GMORLScheduler
    from .momdp import ContextSpace, sample_context
    est = GMORLScheduler.from_checkpoint(args.checkpoint, cfg.sim)
    space = cfg.testing_space()
    e_max = est.agent_.spec.e_max
    space = ContextSpace(space.preference_set, tuple(e for e in space.edge_counts if e <= e_max),
                         space.cloud_freq_range, space.edge_freq_range)
    rng = np.random.default_rng([cfg.eval.seed, 61])
    with open(run.path("generalization.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["context", "num_edges", "cloud_ghz", "mean_edge_ghz", "omega_t", "omega_e",
                    "delay_s", "energy_j"])
        for k in range(args.contexts):
            ctx = sample_context(rng, space, int(rng.integers(len(space.preference_set))))
            r = est.evaluate(ctx, cfg.eval.episodes, cfg.eval.seed)
            w.writerow([k, ctx.num_edges, repr(ctx.freqs[0] / 1e9),
                        repr(float(np.mean(ctx.freqs[1:])) / 1e9), repr(ctx.preference[0]),
                        repr(ctx.preference[1]), repr(r.delay), repr(r.energy)])


def random_grid(cfg) -> list[float]:
    n = cfg.baseline.random_grid
    return [i / (n - 1) for i in range(n)] if n > 1 else [0.5]


def baseline_points(cfg: ExperimentConfig, scheme: str, run: Run | None = None):
    from . import estimators as est_mod
    ctx = cfg.eval_context()
    prefs = cfg.eval_preferences()
    b, e, seed = cfg.baseline, cfg.eval, cfg.experiment.seed
    if scheme == "random":
        est = est_mod.RandomScheduler(sim_config=cfg.sim, random_state=seed)
        return est.front(ctx, random_grid(cfg), e.episodes, e.seed)
    alpha_t, alpha_e = reward_scales(cfg)
    if scheme == "linucb":
        est = est_mod.LinUCBScheduler(b.linucb_alpha, b.linucb_episodes, cfg.trainer.e_max,
                                      cfg.trainer.n_bins, alpha_t, alpha_e, cfg.sim, seed)
        space = cfg.training_space()
        est.fit(space)
        return est.front(ctx, prefs, e.episodes, e.seed)
    if scheme == "sa":
        est = est_mod.SAScheduler(b.sa_budget, b.sa_cooling, b.sa_calibration, b.sa_search_seed,
                                  alpha_t, alpha_e, cfg.sim, seed)
        return est.front(ctx, prefs, e.episodes, e.seed)
    if scheme == "multipolicy":
        from dataclasses import replace
        tcfg = replace(cfg.trainer, alpha_t=alpha_t, alpha_e=alpha_e, calibrate_alpha=False)
        est = est_mod.MultiPolicyScheduler(prefs, tcfg, cfg.sim, seed).fit(ctx)
        if run is not None:
            for i, (w, agent) in enumerate(est.agents_.items()):
                agent.save(run.path(f"multipolicy_{i:03d}.ckpt"), {"preference": list(w)})
        return est.front(ctx, prefs, e.episodes, e.seed)
    raise ConfigError(f"unknown scheme {scheme!r}; valid schemes: {', '.join(SCHEMES)}")


def cmd_baseline(cfg: ExperimentConfig, args, run: Run) -> int:
    from .pareto import write_front_csv
    points, size = baseline_points(cfg, args.scheme, run)
    write_front_csv(run.path(f"baseline_{args.scheme}.csv"), points, size)
    return EXIT_OK


def cmd_front(cfg: ExperimentConfig, args, run: Run) -> int:
    from .pareto import (hypervolume, pareto_front, read_front_csv, reference_point,
                         write_front_csv, write_hv_csv)
    groups: dict[str, list] = {}
    size = None
    for ck in args.checkpoint:
        pts, size = _gmorl_points(cfg, ck)
        label = "gmorl" if len(args.checkpoint) == 1 else f"gmorl:{Path(ck).stem}"
        groups[label] = [p.__class__(p.delay, p.energy, p.preference, label) for p in pts]
    if not args.no_random:
        groups["random"], rsize = baseline_points(cfg, "random")
        size = size or rsize
    for path in args.compare:
        pts = read_front_csv(path)
        for p in pts:
            groups.setdefault(p.label, []).append(p)
    if not groups:
        raise ConfigError("nothing to plot: give --checkpoint or --compare")
    fronts = {k: pareto_front(v) for k, v in groups.items()}
    ref = reference_point(list(fronts.values()))
    all_points = [p for v in groups.values() for p in v]
    if size is None:
        from .sim import balanced_mean_size
        c = cfg.eval_context()
        size = balanced_mean_size(cfg.sim.step_duration, c.freqs, cfg.sim.cycles_per_bit,
                                  cfg.sim.arrival_rate, cfg.sim.num_users)
    write_front_csv(run.path("front.csv"), all_points, size)
    write_hv_csv(run.path("hypervolume.csv"), fronts, ref)
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for i, (name, pts) in enumerate(groups.items()):
        col = f"C{i}"
        ax.scatter([p.delay for p in pts], [p.energy for p in pts], s=10, alpha=0.35, color=col)
        f = fronts[name]
        ax.plot([p.delay for p in f], [p.energy for p in f], "-o", ms=3, color=col,
                label=f"{name} (HV {hypervolume(f, ref):.4g})")
    ax.scatter([ref.delay], [ref.energy], marker="x", color="k", label="reference")
    ax.set_xlabel("mean total delay (s)")
    ax.set_ylabel("mean total energy (J)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _svg(fig, run.path("front.svg"))
    plt.close(fig)
    return EXIT_OK


def cmd_check(cfg, args, run: Run | None) -> int:
    from .checks import SUITES, run_all
    unknown = [s for s in args.suite if s not in SUITES]
    if unknown:
        raise ConfigError(f"unknown suite(s) {', '.join(unknown)}; valid suites: {', '.join(SUITES)}")
    seed = cfg.experiment.seed if cfg is not None else 0
    results = run_all(seed=seed, quick=args.quick, only=args.suite or None)
    lines = [r.line() for r in results]
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} suites passed")
    report = "\n".join(lines)
    print(report)
    if run is not None:
        run.path("check_report.txt").write_text(report + "\n")
    return EXIT_CHECK if n_fail else EXIT_OK


# ----------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mecmorl", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS thread limit (1 gives bit-exact reruns); default from config")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required,
                        help="config file, or a manifest.json from an earlier run")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config entry (repeatable)")
        sp.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV}/experiment.output_dir)")
        sp.add_argument("--quiet", action="store_true")

    common(sub.add_parser("train", help="train one preference-conditioned policy"))
    sp = sub.add_parser("eval", help="evaluate a checkpoint over the preference grid")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--contexts", type=int, default=0,
                    help="also evaluate on this many random test contexts")
    sp = sub.add_parser("front", help="fronts, hypervolumes and plot")
    common(sp)
    sp.add_argument("--checkpoint", action="append", default=[])
    sp.add_argument("--compare", action="append", default=[], help="extra front CSV files")
    sp.add_argument("--no-random", action="store_true", help="skip the random-p sweep")
    sp = sub.add_parser("baseline", help="run a comparison scheduler")
    common(sp)
    sp.add_argument("--scheme", required=True, help="one of: " + ", ".join(SCHEMES))
    sp = sub.add_parser("check", help="run the self-check suites")
    common(sp, config_required=False)
    sp.add_argument("--quick", action="store_true", help="smaller case counts")
    sp.add_argument("--suite", action="append", default=[], help="run only the named suite")
    return p


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "front": cmd_front,
            "baseline": cmd_baseline, "check": cmd_check}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "baseline" and args.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {args.scheme!r}; valid schemes: {', '.join(SCHEMES)}")
        cfg = load_config(args.config, args.set) if args.config else None
        threads = args.threads or (cfg.experiment.threads if cfg else 1)
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=threads):
            if cfg is None:
                return cmd_check(None, args, None)
            extra = {k: v for k, v in vars(args).items() if k not in ("set",)}
            extra["overrides"] = args.set
            run = Run(cfg, args.command, args.out, extra)
            code = COMMANDS[args.command](cfg, args, run)
            run.finish()
            return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
