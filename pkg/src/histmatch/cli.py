"""``histmatch`` command line.

Exit codes: 0 success, 2 configuration error, 3 stage run out of order,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

from . import config as config_mod
from .errors import ConfigError, HistmatchError


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="pipeline configuration (YAML); defaults when omitted")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--jobs", type=int, help="maximum worker processes")
    common.add_argument("--out", type=Path, help="run directory (overrides run_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="histmatch", description="History matching and ABC calibration of an "
                                "agent-based epidemic model.")
    sub = p.add_subparsers(dest="command", required=True)
    init = sub.add_parser("init", help="write a template configuration")
    init.add_argument("path", type=Path, nargs="?", default=Path("histmatch.yaml"))
    init.add_argument("--force", action="store_true", help="overwrite an existing file")
    sub.add_parser("truth", parents=[common], help="simulate synthetic observed data")
    w = sub.add_parser("wave", parents=[common], help="run one history-matching wave")
    w.add_argument("n", type=int)
    n = sub.add_parser("nroy", parents=[common], help="re-filter a wave and export NROY tables")
    n.add_argument("--wave", type=int, help="wave to export (default: last finished)")
    sub.add_parser("abc", parents=[common], help="fit priors and run the ABC sampler")
    sub.add_parser("ppc", parents=[common], help="posterior predictive simulations")
    sub.add_parser("counterfactual", parents=[common], help="paired testing-expansion comparison")
    sub.add_parser("report", parents=[common], help="summarise the finished waves")
    sub.add_parser("run", parents=[common], help="every stage in order, resuming from checkpoints")
    return p


def _config(args) -> config_mod.PipelineConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.PipelineConfig()
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.jobs is not None:
        kw["jobs"] = args.jobs
    if args.out is not None:
        kw["run_dir"] = str(args.out)
    if kw:
        cfg = cfg.replace(**kw)
        config_mod.validate(cfg)
    return cfg


def _print_table(rows) -> None:
    cols = ["wave", "n_targets", "cutoff", "nroy_count", "volume_pct"]
    print(" ".join(f"{c:>10}" for c in cols))
    for r in rows:
        print(" ".join(f"{r[c]:>10}" for c in cols))


def _dispatch(args) -> int:
    if args.command == "init":
        if args.path.exists() and not args.force:
            raise ConfigError(f"{args.path} exists; pass --force to overwrite")
        args.path.write_text(config_mod.template())
        print(f"wrote {args.path}")
        return 0

    from .pipeline import Pipeline

    pipe = Pipeline(_config(args))
    cmd = args.command
    if cmd == "truth":
        out = pipe.truth()
        print(f"wrote {pipe.observed_path} ({out.horizon} days, {int(out.new_diagnoses.sum())} diagnoses)")
    elif cmd == "wave":
        res = pipe.wave(args.n)
        print(f"wave {args.n}: {len(res.nroy)} NROY points, {100 * res.volume_fraction:.2f}% of the grid")
    elif cmd == "nroy":
        s = pipe.export_nroy(args.wave)
        print(f"wave {s['wave']}: {s['nroy_count']} of {s['grid_size']} points ({s['volume_pct']:.2f}%); "
              f"exports in {pipe.dir / 'exports'}")
    elif cmd == "abc":
        post = pipe.abc()
        summ = post.summary()
        print(f"epsilon {post.epsilon:.4g}; acceptance {', '.join(f'{a:.3f}' for a in post.acceptance_rates)}")
        for name, s in summ["parameters"].items():
            print(f"  {name:>8}: median {s['median']:.4g}  90% [{s['q05']:.4g}, {s['q95']:.4g}]")
    elif cmd == "ppc":
        pipe.ppc()
        print(f"bands in {pipe.dir / 'ppc' / 'bands.csv'}")
    elif cmd == "counterfactual":
        res = pipe.counterfactual()
        t, p = res.paired_test()
        print(f"mean active-infection reduction over days {res.window[0]}-{res.window[1]}: "
              f"{res.reduction():.2f} (paired t {t:.2f}, one-sided p {p:.3g})")
    elif cmd == "report":
        _print_table(pipe.report())
    elif cmd == "run":
        pipe.run_all()
        _print_table(pipe.report())
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    warnings.simplefilter("default")
    try:
        return _dispatch(args)
    except HistmatchError as exc:
        print(f"histmatch: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
