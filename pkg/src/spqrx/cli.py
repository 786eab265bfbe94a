"""Command-line interface.

Subcommands: ``simulate``, ``fit``, ``predict``, ``ale``, ``vi``,
``diagnose``, ``bench`` and ``bootstrap``.  Model settings come from a JSON
file passed with ``--config`` (see :func:`spqrx.io.load_config`).  The worker
thread count is taken from ``--threads``, else the ``SPQRX_THREADS``
environment variable, else the config file.

Exit codes: 0 success, 2 configuration or argument error, 3 data error,
4 numerical failure (training restarts exhausted).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import evaluate as ev
from . import interpret as ip
from . import regression as reg
from .distributions import BlendSpec
from .io import (ConfigError, DataError, RunConfig, load_config, load_model, read_csv,
                 save_model, write_csv)
from .simulate import DESIGNS, SimSpec, generate

THREADS_ENV = "SPQRX_THREADS"
LOG_HEADER = ["fit", "stage", "epoch", "train_loss", "val_loss", "restarts", "lr"]


def _threads(args, cfg: RunConfig) -> int:
    if getattr(args, "threads", None) is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be positive")
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV}={env!r} is not an integer") from None
        if n < 1:
            raise ConfigError(f"{THREADS_ENV} must be positive")
        return n
    return cfg.threads


def _taus(values) -> list:
    out = []
    for v in values or []:
        for part in str(v).split(","):
            part = part.strip()
            if part:
                try:
                    out.append(float(part))
                except ValueError:
                    raise ConfigError(f"bad tau value {part!r}") from None
    for t in out:
        if not 0.0 < t < 1.0:
            raise ConfigError(f"tau={t} is outside (0, 1)")
    return out


def _dataset(X, y, path) -> reg.Dataset:
    if y is None:
        raise DataError(f"{path} has no response column")
    bad = np.flatnonzero(y <= 0)
    if bad.size:
        raise DataError(f"{path}: row {bad[0] + 1} has nonpositive response {y[bad[0]]!r}; "
                        "responses must be positive")
    return reg.Dataset(X, y)


def _load_model(path):
    model = load_model(path)
    return model, model.metadata.get("covariates")


def _covariates(path, names, response):
    X, y, cols = read_csv(path, response=response, columns=names)
    return X, y, cols


def _fmt_tau(t: float) -> str:
    return repr(float(t))


# ---------------------------------------------------------------------------
# Commands


def cmd_simulate(args) -> int:
    data, truth = generate(SimSpec(args.design, args.n, args.seed))
    out = Path(args.out)
    header = [f"x{i + 1}" for i in range(data.p)] + ["y"]
    write_csv(out, header, np.column_stack([data.X, data.y]).tolist())
    side = {**truth.to_dict(), "n": args.n, "seed": args.seed}
    Path(str(out) + ".truth.json").write_text(json.dumps(side, indent=1) + "\n", encoding="utf-8")
    return 0


def _history_rows(fit_id, stage, history):
    return [[fit_id, stage, h["epoch"], h["train_loss"], h["val_loss"], h["restarts"], h["lr"]]
            for h in history]


def cmd_fit(args) -> int:
    cfg = load_config(args.config)
    threads = _threads(args, cfg)
    sqrt = cfg.sqrt or args.sqrt
    mode = args.mode or cfg.mode
    training = cfg.training if args.seed is None else replace(cfg.training, seed=args.seed)
    X, y, names = read_csv(args.train, response=cfg.response, columns=cfg.columns)
    data = _dataset(X, y, args.train)
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    rows = []
    if cfg.grid:
        def on_fit(i, cell, model):
            rows.extend(_history_rows(i, mode, model.metadata["history"]))
        model, table = reg.grid_search(data, cfg.grid, mode, cfg.architecture, cfg.blend,
                                       training, sqrt, threads=threads, log=log, on_fit=on_fit)
        model.metadata["grid"] = table
    else:
        model = reg.fit_spqr(data, cfg.architecture, training, sqrt, log)
        rows.extend(_history_rows(0, "spqr", model.metadata["history"]))
        if mode == "spqrx":
            model = reg.fit_spqrx(data, cfg.architecture, cfg.blend, training, sqrt,
                                  pretrained=model, log=log)
            rows.extend(_history_rows(0, "spqrx", model.metadata["history"]))
    model.metadata["covariates"] = names
    model.metadata["response"] = cfg.response
    save_model(model, args.out)
    log_path = args.log or str(args.out) + ".log.csv"
    write_csv(log_path, LOG_HEADER, rows)
    return 0


def cmd_predict(args) -> int:
    model, names = _load_model(args.model)
    response = model.metadata.get("response", "y")
    X, y, _ = _covariates(args.data, names, response)
    taus = _taus(args.tau)
    if not (taus or args.cdf or args.density):
        raise ConfigError("nothing to predict: give --tau, --cdf or --density")
    header, cols = ["row"], [np.arange(1, X.shape[0] + 1)]
    if taus:
        Q = model.quantile(X, taus)
        header += [f"q_{_fmt_tau(t)}" for t in taus]
        cols += list(Q.T)
    if args.cdf or args.density:
        if y is None:
            raise DataError(f"{args.data} has no {response!r} column for --cdf/--density")
        if args.cdf:
            header.append("cdf")
            cols.append(model.cdf(X, y))
        if args.density:
            header.append("density")
            cols.append(model.pdf(X, y))
    rows = [[int(r)] + [float(c[i]) for c in cols[1:]] for i, r in enumerate(cols[0])]
    write_csv(args.out, header, rows)
    return 0


def _interp_target(args, model):
    if args.xi:
        if model.mode != "spqrx":
            raise ConfigError("--xi needs an spqrx model; SPQR models have no shape function")
        return None, ["xi"]
    taus = _taus(args.tau) or list(ip.DEFAULT_TAUS)
    return taus, [f"q_{_fmt_tau(t)}" for t in taus]


def _covariate_index(names, which):
    if which is None:
        return list(range(len(names)))
    idx = []
    for w in which:
        if w in names:
            idx.append(names.index(w))
        else:
            raise ConfigError(f"unknown covariate {w!r}; have {names}")
    return idx


def cmd_ale(args) -> int:
    model, names = _load_model(args.model)
    X, _, names = _covariates(args.data, names, None)
    taus, out_names = _interp_target(args, model)
    rows = []
    for j in _covariate_index(names, args.covariate):
        prof = (ip.ale_xi(model, X, j, args.bins) if taus is None
                else ip.ale_quantile(model, X, j, taus, args.bins))
        for e, eff in zip(prof.edges, prof.effects):
            rows.append([names[j], float(e)] + [float(v) for v in eff])
    write_csv(args.out, ["covariate", "x"] + out_names, rows)
    return 0


def cmd_vi(args) -> int:
    model, names = _load_model(args.model)
    X, _, names = _covariates(args.data, names, None)
    taus, out_names = _interp_target(args, model)
    res = (ip.vi_xi(model, X, args.bins) if taus is None
           else ip.vi_quantile_profile(model, X, taus, args.bins))
    rows = [[label] + [float(v) for v in res.scores[l]] for l, label in enumerate(
        ["xi"] if taus is None else [_fmt_tau(t) for t in taus])]
    write_csv(args.out, ["output"] + list(names), rows)
    return 0


def cmd_diagnose(args) -> int:
    model, names = _load_model(args.model)
    response = model.metadata.get("response", "y")
    X, y, _ = _covariates(args.data, names, response)
    if y is None:
        raise DataError(f"{args.data} has no {response!r} column")
    u = ev.pit(model, X, y)
    prefix = args.out
    write_csv(f"{prefix}_pit.csv", ["row", "pit", "degenerate"],
              [[i + 1, float(v), int(d)] for i, (v, d) in enumerate(zip(u.values, u.degenerate))])
    pp = ev.pp_uniform(u)
    write_csv(f"{prefix}_pp.csv", ["theoretical", "empirical"],
              zip(pp.theoretical.tolist(), pp.empirical.tolist()))
    qq = ev.qq_exponential(u)
    write_csv(f"{prefix}_qq.csv", ["theoretical", "empirical"],
              zip(qq.theoretical.tolist(), qq.empirical.tolist()))
    stat, p = ev.ks_uniform(u)
    summary = {"n": int(u.values.size), "degenerate": u.n_degenerate, "qq_excluded": qq.excluded,
               "ks_statistic": stat, "ks_pvalue": p, "mode": model.mode}
    text = json.dumps(summary, indent=1)
    Path(f"{prefix}_summary.json").write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def _bench_cells(cfg: RunConfig):
    import itertools
    keys = [k for k in reg.GRID_KEYS if k in cfg.grid]
    for combo in itertools.product(*(cfg.grid[k] for k in keys)):
        cell = dict(zip(keys, combo))
        hidden = cell.get("hidden", cfg.architecture.hidden)
        hidden = (hidden,) if np.isscalar(hidden) else tuple(hidden)
        arch = replace(cfg.architecture, num_basis=int(cell.get("num_basis", cfg.architecture.num_basis)),
                       hidden=hidden, activation=cell.get("activation", cfg.architecture.activation))
        blend = BlendSpec(float(cell.get("p_a", cfg.blend.p_a)), float(cell.get("p_b", cfg.blend.p_b)),
                          float(cell.get("c1", cfg.blend.c1)), cfg.blend.c2)
        yield arch, blend


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    threads = _threads(args, cfg)
    if args.replicates < 1:
        raise ConfigError("--replicates must be positive")
    for d in args.design:
        if d not in DESIGNS:
            raise ConfigError(f"unknown design {d!r}; choose from {sorted(DESIGNS)}")
    seeds = np.random.SeedSequence(args.seed).generate_state(args.replicates).tolist()
    header = ["design", "n", "num_basis", "hidden", "activation", "p_a", "p_b", "c1",
              "replicates", "failed"]
    for m in ("spqr", "spqrx"):
        for metric in ("iwd", "tiwd"):
            header += [f"{metric}_{m}_median", f"{metric}_{m}_q25", f"{metric}_{m}_q75"]
    out_rows, rep_rows = [], []
    for design in args.design:
        for arch, blend in _bench_cells(cfg):
            def one(s):
                try:
                    return ev.run_experiment(design, args.n, int(s), arch, blend, cfg.training,
                                             n_test=args.n_test)
                except reg.TrainingError:
                    return None
            if threads > 1:
                with ThreadPoolExecutor(max_workers=threads) as ex:
                    res = list(ex.map(one, seeds))
            else:
                res = [one(s) for s in seeds]
            ok = [r for r in res if r is not None]
            row = [design, args.n, arch.num_basis, "x".join(map(str, arch.hidden)),
                   arch.activation, blend.p_a, blend.p_b, blend.c1, len(ok), len(res) - len(ok)]
            for m in ("spqr", "spqrx"):
                for metric in ("iwd", "tiwd"):
                    vals = np.array([r[f"{metric}_{m}"].value for r in ok])
                    row += ([float(np.median(vals)), float(np.quantile(vals, 0.25)),
                             float(np.quantile(vals, 0.75))] if vals.size else [math.nan] * 3)
            out_rows.append(row)
            for s, r in zip(seeds, res):
                if r is not None:
                    rep_rows.append(row[:8] + [s] + [r[f"{metric}_{m}"].value
                                                     for m in ("spqr", "spqrx")
                                                     for metric in ("iwd", "tiwd")])
    write_csv(args.out, header, out_rows)
    if args.replicate_out:
        write_csv(args.replicate_out, header[:8] + ["seed", "iwd_spqr", "tiwd_spqr", "iwd_spqrx",
                                                    "tiwd_spqrx"], rep_rows)
    return 0


def cmd_bootstrap(args) -> int:
    cfg = load_config(args.config)
    threads = _threads(args, cfg)
    mode = args.mode or cfg.mode
    X, y, names = read_csv(args.train, response=cfg.response, columns=cfg.columns)
    data = _dataset(X, y, args.train)
    if args.at:
        Xe, _, _ = read_csv(args.at, response=None, columns=names)
    else:
        Xe = data.X
    taus = _taus(args.tau) or [0.5, 0.9, 0.99]
    if mode == "spqr" and max(taus) > reg.SPQR_MAX_TAU:
        raise ConfigError(f"SPQR quantiles above tau={reg.SPQR_MAX_TAU} are not available")
    sqrt = cfg.sqrt or args.sqrt

    def fit(d, seed):
        t = replace(cfg.training, seed=seed)
        m = reg.fit_spqr(d, cfg.architecture, t, sqrt)
        if mode == "spqrx":
            m = reg.fit_spqrx(d, cfg.architecture, cfg.blend, t, sqrt, pretrained=m)
        return m

    funcs = {f"q_{_fmt_tau(t)}": (lambda m, t=t: m.quantile(Xe, t)) for t in taus}
    if mode == "spqrx":
        funcs["xi"] = lambda m: m.xi(Xe)
    res = ev.bootstrap(data, fit, args.n_boot, args.seed, funcs, args.level, threads)
    if not res.models:
        raise reg.TrainingError("every bootstrap replicate failed")
    rows = []
    for name in funcs:
        med = np.median(res.estimates[name], axis=0)
        lo, hi = res.intervals[name]
        rows += [[i + 1, name, float(med[i]), float(lo[i]), float(hi[i])] for i in range(Xe.shape[0])]
    write_csv(args.out, ["row", "functional", "median", "lower", "upper"], rows)
    for f in res.failures:
        print(f, file=sys.stderr)
    print(f"{len(res.models)} of {args.n_boot} replicates succeeded", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spqrx", description="Neural spline density regression "
                                "with generalized Pareto tails.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, threads=True):
        if config:
            sp.add_argument("--config", help="JSON run configuration")
        if threads:
            sp.add_argument("--threads", type=int, default=None,
                            help=f"worker threads (overrides {THREADS_ENV} and the config)")

    s = sub.add_parser("simulate", help="draw a synthetic dataset")
    s.add_argument("--design", required=True, choices=sorted(DESIGNS))
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit", help="train a model from a CSV")
    s.add_argument("train")
    s.add_argument("--out", required=True, help="model file to write")
    s.add_argument("--log", help="training log CSV (default: <out>.log.csv)")
    s.add_argument("--mode", choices=["spqr", "spqrx"])
    s.add_argument("--seed", type=int)
    s.add_argument("--sqrt", action="store_true", help="model the square root of the response")
    s.add_argument("--verbose", action="store_true")
    common(s)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("predict", help="quantiles, cdf or density from a saved model")
    s.add_argument("model")
    s.add_argument("data")
    s.add_argument("--out", required=True)
    s.add_argument("--tau", nargs="*", help="quantile levels (space or comma separated)")
    s.add_argument("--cdf", action="store_true", help="cdf at the response column")
    s.add_argument("--density", action="store_true", help="density at the response column")
    s.set_defaults(func=cmd_predict)

    for name, func, helptext in (("ale", cmd_ale, "accumulated local effect profiles"),
                                 ("vi", cmd_vi, "variable importance scores")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("model")
        s.add_argument("data")
        s.add_argument("--out", required=True)
        g = s.add_mutually_exclusive_group()
        g.add_argument("--tau", nargs="*", help="quantile levels; empty means 0.05..0.95")
        g.add_argument("--xi", action="store_true", help="use the shape function")
        s.add_argument("--bins", type=int, default=ip.DEFAULT_BINS)
        if name == "ale":
            s.add_argument("--covariate", nargs="*", help="covariate names (default: all)")
        s.set_defaults(func=func)

    s = sub.add_parser("diagnose", help="PIT, PP and QQ diagnostics on test data")
    s.add_argument("model")
    s.add_argument("data")
    s.add_argument("--out", required=True, help="output prefix")
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("bench", help="simulation benchmark table")
    s.add_argument("--design", nargs="+", default=["lognormal"])
    s.add_argument("--replicates", type=int, default=10)
    s.add_argument("--n", type=int, default=10000)
    s.add_argument("--n-test", type=int, default=5000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--replicate-out", help="per-replicate metrics CSV")
    common(s)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("bootstrap", help="bootstrap intervals for quantiles and shape")
    s.add_argument("train")
    s.add_argument("--out", required=True)
    s.add_argument("--at", help="CSV of covariates to evaluate at (default: training rows)")
    s.add_argument("--tau", nargs="*")
    s.add_argument("--n-boot", type=int, default=200)
    s.add_argument("--level", type=float, default=0.95)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mode", choices=["spqr", "spqrx"])
    s.add_argument("--sqrt", action="store_true")
    common(s)
    s.set_defaults(func=cmd_bootstrap)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except reg.TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        # library argument checks (e.g. SPQR quantiles beyond its support)
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
