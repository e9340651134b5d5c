"""``mmsa`` command line: train, evaluate, ablate, verify, plot."""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import VARIANTS, Config, ConfigError, make_ablation
from .envsuite import make_env
from .plotting import ci_half_width, eval_curve, plot_runs
from .tensorcore import load_checkpoint, restore_groups
from .trainer import Learner, evaluate, train
from .verify import FAULTS, format_report, run_verification_suite

log = logging.getLogger("mmsa")

MANIFEST = "manifest.json"
METRICS = "metrics.jsonl"
CHECKPOINT = "checkpoint.bin"
DESIGN_AXES = {
    "horizon": ("wm.rollout_horizon", (1, 2, 3, 10)),
    "lr": ("train.lr", (1e-4, 5e-4, 1e-3, 5e-3)),
    "norm": ("sale.normalizer", ("avgl1", "none", "layernorm")),
}
DEFAULT_ABLATION_SEEDS = (1, 2, 3)


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def out_root(arg) -> Path:
    return Path(arg or os.environ.get("MMSA_OUT_DIR") or "runs")


def load_config(path=None, overrides=(), seed=None) -> Config:
    """Defaults, then a config file (or a run manifest), then ``--set`` pairs, then ``--seed``."""
    cfg = Config()
    if path:
        p = Path(path)
        if p.is_dir():
            p = p / MANIFEST
        text = p.read_text(encoding="utf-8")
        if p.suffix == ".json":
            cfg = Config.from_text(json.loads(text)["config_text"])
        else:
            cfg = Config.from_text(text)
    cfg.apply_overrides(overrides)
    if seed is not None:
        cfg.set("train.seed", seed)
    return cfg


def write_manifest(run_dir: Path, cfg: Config, label: str, **extra) -> dict:
    man = {
        "format": "mmsa-run/1",
        "version": __version__,
        "label": label,
        "config": cfg.as_dict(),
        "config_text": cfg.to_text(),
        "config_hash": cfg.content_hash(),
        "overrides": cfg.overrides,
        "seeds": [cfg["train.seed"]],
        "layout": {"manifest": MANIFEST, "metrics": METRICS, "checkpoint": CHECKPOINT},
    }
    man.update(extra)
    (run_dir / MANIFEST).write_text(json.dumps(man, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return man


def run_training(cfg: Config, run_dir: Path, label: str | None = None):
    """One run with manifest bookkeeping; partial outputs stay on disk if training fails."""
    run_dir.mkdir(parents=True, exist_ok=True)
    label = label or cfg["train.variant"]
    started = _now()
    write_manifest(run_dir, cfg, label, started=started, status="running")

    def progress(rec):
        log.info("%s seed %d: step %d return %.4f", label, cfg["train.seed"], rec["step"], rec["mean_return"])

    try:
        res = train(cfg, out_dir=run_dir, progress=progress)
    except BaseException as exc:
        write_manifest(run_dir, cfg, label, started=started, finished=_now(), status="failed",
                       error=f"{type(exc).__name__}: {exc}")
        raise
    write_manifest(run_dir, cfg, label, started=started, finished=_now(), status="complete",
                   env_steps=res.env_steps, train_steps=res.train_steps, stopped_early=res.stopped_early)
    return res


def default_run_name(cfg: Config) -> str:
    env = cfg["env.name"].replace(":", "_").replace("/", "_")
    return f"{env}-{cfg['train.variant']}-seed{cfg['train.seed']}-{cfg.content_hash()[:8]}"


# -- subcommands ----------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set, args.seed)
    run_dir = Path(args.out) if args.out else out_root(None) / default_run_name(cfg)
    res = run_training(cfg, run_dir)
    final = res.evals[-1]["mean_return"] if res.evals else float("nan")
    print(f"{run_dir}: {res.env_steps} env steps, {res.train_steps} train steps, final return {final:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    if not args.run:
        raise ConfigError("evaluate needs --run DIR (a finished run directory)")
    run_dir = Path(args.run)
    cfg = load_config(run_dir / MANIFEST, args.set, None)
    env = make_env(cfg["env.name"], cfg["env.episode_limit"], cfg["train.gamma"])
    learner = Learner(cfg, env, np.random.default_rng(0))
    restore_groups(learner.groups, load_checkpoint(run_dir / CHECKPOINT))
    n = args.episodes or cfg["train.test_episodes"]
    seed = cfg["train.seed"] if args.seed is None else args.seed
    mean, rets = evaluate(env, learner.agent, n, np.random.default_rng(seed))
    out = {"run": str(run_dir), "episodes": n, "seed": seed, "mean_return": mean, "returns": rets}
    print(json.dumps(out) if args.json else f"mean greedy return over {n} episodes: {mean:.4f}")
    return 0


def _grid(base: Config, args):
    """(series label, config) for every run of an ablation or design grid."""
    seeds = args.seeds or ([args.seed] if args.seed is not None else list(DEFAULT_ABLATION_SEEDS))
    cells = []
    if args.design:
        key, values = DESIGN_AXES[args.design]
        for v in values:
            cells.append((f"{args.design}={v}", base.copy().set(key, v)))
    else:
        for variant in args.variants or VARIANTS:
            cells.append((variant, make_ablation(base, variant)))
    for label, cfg in cells:
        for s in seeds:
            yield label, cfg.copy().set("train.seed", s)


def summarize(groups: dict) -> list[dict]:
    """Per series: final greedy return across seeds with a 95% normal interval."""
    rows = []
    for label, dirs in groups.items():
        finals = [float(eval_curve(d)[1][-1]) for d in dirs]
        mean = float(np.mean(finals))
        half = ci_half_width(finals)
        std = float(np.std(finals, ddof=1)) if len(finals) > 1 else 0.0
        rows.append({"series": label, "n": len(finals), "mean": mean, "std": std, "ci95_half": half,
                     "ci_low": mean - half, "ci_high": mean + half,
                     "finals": ";".join(repr(f) for f in finals)})
    return rows


def write_summary(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["series", "n", "mean", "std", "ci95_half", "ci_low", "ci_high", "finals"])
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def cmd_ablate(args) -> int:
    base = load_config(args.config, args.set, None)
    root = out_root(args.out)
    groups: dict = {}
    for label, cfg in _grid(base, args):
        run_dir = root / label.replace("=", "_") / f"seed{cfg['train.seed']}"
        run_training(cfg, run_dir, label)
        groups.setdefault(label, []).append(run_dir)
    rows = summarize(groups)
    write_summary(rows, root / "summary.csv")
    plot_runs(groups, root, title=f"{base['env.name']} {'design: ' + args.design if args.design else 'ablation'}")
    for r in rows:
        print(f"{r['series']:<16} final {r['mean']:.4f} ± {r['ci95_half']:.4f} (n={r['n']})")
    print(f"summary: {root / 'summary.csv'}")
    return 0


def cmd_verify(args) -> int:
    try:
        report = run_verification_suite(seed=0 if args.seed is None else args.seed, only=args.only or None,
                                        inject=args.inject, quick=args.quick)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text if args.json else format_report(report))
    return 0 if report["passed"] else 1


def _collect_runs(paths) -> dict:
    """Group run directories by manifest label; directories without a manifest are searched one level down."""
    groups: dict = {}
    for p in map(Path, paths):
        cands = [p] if (p / METRICS).exists() else sorted(q.parent for q in p.rglob(METRICS))
        if not cands:
            raise ConfigError(f"{p}: no {METRICS} found")
        for d in cands:
            label = d.name
            if (d / MANIFEST).exists():
                label = json.loads((d / MANIFEST).read_text(encoding="utf-8")).get("label", label)
            groups.setdefault(label, []).append(d)
    return groups


def cmd_plot(args) -> int:
    groups = _collect_runs(args.runs)
    out = out_root(args.out)
    aggs = plot_runs(groups, out, title=args.title or "")
    print(f"{out / 'curves.svg'}: {len(aggs)} series")
    return 0


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file (key = value lines) or a run manifest")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="random seed (sets train.seed)")
    common.add_argument("--out", help="output directory (default $MMSA_OUT_DIR or ./runs)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="mmsa", description="Model-based multi-agent RL with learned embeddings.")
    p.add_argument("--version", action="version", version=f"mmsa {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="train one run")

    ev = sub.add_parser("evaluate", parents=[common], help="greedy evaluation of a finished run")
    ev.add_argument("--run", help="run directory holding manifest.json and checkpoint.bin")
    ev.add_argument("--episodes", type=int, help="number of greedy episodes (default train.test_episodes)")
    ev.add_argument("--json", action="store_true", help="print a JSON record")

    ab = sub.add_parser("ablate", parents=[common], help="ablation variants or a design grid across seeds")
    ab.add_argument("--seeds", type=int, nargs="+", help=f"seeds (default {' '.join(map(str, DEFAULT_ABLATION_SEEDS))})")
    ab.add_argument("--variants", nargs="+", choices=VARIANTS, help="subset of variants (default all five)")
    ab.add_argument("--design", choices=sorted(DESIGN_AXES), help="sweep one design axis instead of the variants")

    ve = sub.add_parser("verify", parents=[common], help="run the invariant and oracle suite")
    ve.add_argument("--only", action="append", help="restrict to checks with this name prefix (repeatable)")
    ve.add_argument("--json", action="store_true", help="print the JSON report")
    ve.add_argument("--quick", action="store_true", help="fewer random draws per check")
    ve.add_argument("--inject", choices=FAULTS, help="plant a known fault to see the suite catch it")

    pl = sub.add_parser("plot", parents=[common], help="mean curve and 95%% band per series")
    pl.add_argument("runs", nargs="+", help="run directories or roots containing them")
    pl.add_argument("--title", help="figure title")
    return p


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "ablate": cmd_ablate, "verify": cmd_verify,
            "plot": cmd_plot}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"mmsa {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
