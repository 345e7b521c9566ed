"""Command-line entry point: ``boosted-ukf {datagen,train,run,report}``.

Exit codes: 0 success, 2 usage error, 3 numerical failure.  The global
seed falls back to ``$BOOSTED_UKF_SEED`` (then 0) when ``--seed`` is not
given.  A TOML file passed with ``--config`` supplies defaults for the
``[data]``, ``[lrw]``, ``[wfm]``, ``[filter]`` and ``[run]`` tables;
explicit flags win over file values.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .boosted import FILTERS, BoostedConfig, FilterError, VirtualSensor, run_summary
from .dynamics import REGIMES
from .experiment import (
    TABLE_REGIMES,
    ResultTable,
    monte_carlo,
    preprocess,
    provenance,
    run_single,
)
from .lrw import LrwConfig
from .numerics import NumericalDivergence, RngStream
from .sensing import WeightedDataset, build_dataset
from .wfm import DegenerateBatchError, FlowTrainConfig, GaussianBelief

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("boosted_ukf")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

FULL_MC = 50
CI_SCALE = {"horizon": 100.0, "mc_runs": 5, "wfm_epochs": 2000, "n": 500}


class UsageError(Exception):
    pass


def _env_seed() -> int:
    raw = os.environ.get("BOOSTED_UKF_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"BOOSTED_UKF_SEED must be an integer, got {raw!r}")


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}")


def _pick(arg, table: dict, key: str, default):
    if arg is not None:
        return arg
    return table.get(key, default)


def _build(cls, table: dict, **overrides):
    known = {f.name for f in fields(cls)}
    unknown = set(table) - known
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    vals = {k: (tuple(v) if isinstance(v, list) else v) for k, v in table.items()}
    vals.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**vals)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc))


def _write_json(path: Path, data: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1, default=lambda o: np.asarray(o).tolist()))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_datagen(args) -> int:
    conf = _load_config(args.config).get("data", {})
    n = _pick(args.n, conf, "n", CI_SCALE["n"] if args.ci_scale else 2000)
    sigma = _pick(args.sigma, conf, "sigma", 1e-3)
    seed = args.seed
    if n < 1:
        raise UsageError("n must be at least 1")
    if sigma < 0:
        raise UsageError("sigma must be non-negative")
    ds = build_dataset(int(n), float(sigma), RngStream(seed))
    data = ds.to_json()
    data.update(provenance(seed, {"n": n, "sigma": sigma}))
    out = Path(args.out)
    _write_json(out, data)
    log.info("wrote %d samples to %s", len(ds), out)
    return EXIT_OK


def cmd_train(args) -> int:
    conf = _load_config(args.config)
    try:
        ds = WeightedDataset.load(args.dataset)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read dataset {args.dataset}: {exc}")
    lrw_cfg = _build(LrwConfig, conf.get("lrw", {}), epochs=args.lrw_epochs)
    wfm_epochs = args.wfm_epochs
    if wfm_epochs is None and args.ci_scale and "epochs" not in conf.get("wfm", {}):
        wfm_epochs = CI_SCALE["wfm_epochs"]
    hidden = tuple(args.wfm_hidden) if args.wfm_hidden else None
    wfm_table = dict(conf.get("wfm", {}))
    m = _pick(args.samples, wfm_table, "samples", 2000)
    wfm_table.pop("samples", None)
    flow_cfg = _build(FlowTrainConfig, wfm_table, epochs=wfm_epochs, hidden=hidden)
    seed = args.seed
    cfg_all = {"lrw": asdict(lrw_cfg), "wfm": asdict(flow_cfg), "samples": m,
               "dataset": ds.meta}
    prov = provenance(seed, cfg_all)

    lrw, flow, summary = preprocess(ds, lrw_cfg, flow_cfg, seed, m=m)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "weights.json", {**prov, "weights": lrw.weight_table(ds)})
    flow_json = flow.to_json()
    flow_json.update(prov)
    _write_json(out / "flow.json", flow_json)
    _write_json(out / "summary.json", {**summary.to_json(m=m, seed=seed), **prov})
    log.info("mu_wfm = %s", np.round(summary.mean, 3).tolist())
    return EXIT_OK


def _parse_list(raw: str | None, allowed, what: str) -> list[str] | None:
    if raw is None:
        return None
    items = [s.strip().lower() for s in raw.split(",") if s.strip()]
    bad = [s for s in items if s not in allowed]
    if bad or not items:
        raise UsageError(f"unknown {what}: {bad or raw!r}; choose from {', '.join(allowed)}")
    return items


def cmd_run(args) -> int:
    conf = _load_config(args.config)
    run_conf = conf.get("run", {})
    filters = _parse_list(args.filters, FILTERS, "filter") or run_conf.get("filters", ["ukf", "boosted"])
    regimes = _parse_list(args.regimes, REGIMES, "regime") or run_conf.get("regimes", ["windowed"])
    horizon = _pick(args.horizon, run_conf, "horizon", CI_SCALE["horizon"] if args.ci_scale else None)
    cfg = _build(BoostedConfig, conf.get("filter", {}), horizon=horizon, dt=args.dt,
                 enkf_size=args.enkf_size)
    mc = args.mc
    if args.full_mc:
        mc = FULL_MC
    if mc is None and args.seeds is None:
        mc = run_conf.get("mc", CI_SCALE["mc_runs"] if args.ci_scale else FULL_MC)
    if mc is not None and mc < 1:
        raise UsageError("--mc must be at least 1")

    vs = None
    if "boosted" in filters:
        path = args.vs or run_conf.get("vs")
        if path is None:
            raise UsageError("the boosted filter needs --vs SUMMARY.json from `train`")
        try:
            belief = GaussianBelief.from_json(json.loads(Path(path).read_text()))
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot read virtual-sensor summary {path}: {exc}")
        vs = VirtualSensor(belief.mean, belief.cov, period=args.vs_period, start=args.vs_start)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed
    run_cfg = {"filter": cfg.to_dict(), "filters": filters, "regimes": regimes, "mc": mc,
               "seeds": args.seeds, "vs": None if vs is None else
               {"z": vs.z, "R": vs.R, "period": vs.period, "start": vs.start}}
    prov = provenance(seed, run_cfg)

    if mc:
        def progress(k, g, r, tr):
            log.info("mc %d %s %s err%% %s", r, g, k, np.round(tr.rel_err_pct(), 3).tolist())
        errors = monte_carlo(filters, regimes, cfg, int(mc), seed, vs=vs, on_run=progress)
    else:
        try:
            seeds = [int(s) for s in args.seeds.split(",")]
        except ValueError:
            raise UsageError(f"--seeds must be a comma list of integers, got {args.seeds!r}")
        errors = {k: {g: np.empty((len(seeds), 3)) for g in regimes} for k in filters}
        for i, s in enumerate(seeds):
            for g in regimes:
                for k in filters:
                    tr = run_single(k, g, cfg, s, vs=vs if k == "boosted" else None,
                                    record_every=args.record_every)
                    errors[k][g][i] = tr.rel_err_pct()
                    stem = out / f"trace_{k}_{g}_seed{s}"
                    tr.to_csv(stem.with_suffix(".csv"))
                    _write_json(stem.with_suffix(".json"),
                                {**run_summary(tr, g, s), **provenance(s, run_cfg)})
                    log.info("%s %s seed %d err%% %s", g, k, s,
                             np.round(tr.rel_err_pct(), 3).tolist())
    table = ResultTable(errors, prov)
    table.save(out / "results.json")
    print(table.format_text())
    return EXIT_OK


def cmd_report(args) -> int:
    if not args.results:
        raise UsageError("report needs at least one results file")
    tables = []
    for p in args.results:
        try:
            tables.append(ResultTable.load(p))
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot read results {p}: {exc}")
    table = ResultTable.merge(tables)
    print(table.format_text(args.digits))
    if args.csv:
        rows = table.to_csv_rows()
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["filter"])
            w.writeheader()
            w.writerows(rows)
    return EXIT_OK


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="boosted-ukf", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None,
                        help="global seed (default: $BOOSTED_UKF_SEED or 0)")
        sp.add_argument("--config", help="TOML file with default settings")
        sp.add_argument("--ci-scale", action="store_true",
                        help="shrink horizon, Monte Carlo count, WFM epochs and dataset size")

    d = sub.add_parser("datagen", help="simulate and score surrogate inertias")
    common(d)
    d.add_argument("--sigma", type=float, default=None, help="gyro noise std (default 1e-3)")
    d.add_argument("-n", "--n", type=int, default=None, help="number of samples (default 2000)")
    d.add_argument("-o", "--out", default="dataset.json")
    d.set_defaults(func=cmd_datagen)

    t = sub.add_parser("train", help="LRW weights, weighted flow and its Gaussian summary")
    common(t)
    t.add_argument("dataset")
    t.add_argument("-o", "--out-dir", default="train_out")
    t.add_argument("--lrw-epochs", type=int, default=None)
    t.add_argument("--wfm-epochs", type=int, default=None)
    t.add_argument("--wfm-hidden", type=int, nargs="+", default=None)
    t.add_argument("--samples", type=int, default=None, help="flow samples for the summary")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("run", help="run filters over excitation regimes")
    common(r)
    r.add_argument("--filters", help=f"comma list from {','.join(FILTERS)}")
    r.add_argument("--regimes", help=f"comma list from {','.join(TABLE_REGIMES)} (or zero)")
    r.add_argument("--seeds", help="comma list of seeds for single runs (writes traces)")
    r.add_argument("--mc", type=int, default=None,
                   help=f"Monte Carlo realizations (default {FULL_MC}, or 5 with --ci-scale)")
    r.add_argument("--full-mc", action="store_true", help=f"force {FULL_MC} realizations")
    r.add_argument("--vs", help="summary.json from `train` (needed for boosted)")
    r.add_argument("--vs-period", type=int, default=1)
    r.add_argument("--vs-start", type=int, default=0)
    r.add_argument("--horizon", type=float, default=None)
    r.add_argument("--dt", type=float, default=None)
    r.add_argument("--enkf-size", type=int, default=None)
    r.add_argument("--record-every", type=int, default=10)
    r.add_argument("-o", "--out-dir", default="run_out")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="tabulate results files")
    rep.add_argument("results", nargs="*")
    rep.add_argument("--csv", help="also write a long-format CSV")
    rep.add_argument("--digits", type=int, default=2)
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        if getattr(args, "seed", 0) is None:
            args.seed = _env_seed()
        return args.func(args)
    except UsageError as exc:
        print(f"boosted-ukf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalDivergence, FilterError, DegenerateBatchError,
            np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"boosted-ukf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
