"""Accuracy metrics, calibration diagnostics and bootstrap uncertainty."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import stats

from . import regression as reg
from .distributions import BlendSpec
from .regression import Architecture, Dataset, FittedModel, TrainingConfig, TrainingError

__all__ = [
    "MetricReport",
    "PIT",
    "DiagnosticPoints",
    "BootstrapResult",
    "model_quantile_fn",
    "iwd",
    "tiwd",
    "pit",
    "pp_uniform",
    "qq_exponential",
    "ks_uniform",
    "bootstrap",
    "run_experiment",
]

IWD_TAUS = 2048
TIWD_TAUS = 64
TIWD_RANGE = (0.999, 1.0)


@dataclass(frozen=True)
class MetricReport:
    """Monte-Carlo estimate of an integrated Wasserstein distance.

    ``value`` is the mean absolute quantile difference over test covariates
    and ``tau`` uniform on ``(tau_lo, tau_hi)``; ``se`` is its Monte-Carlo
    standard error computed from the per-covariate means.
    """

    name: str
    value: float
    se: float
    tau_lo: float
    tau_hi: float
    replicates: Optional[np.ndarray] = None


QuantileFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def model_quantile_fn(model: FittedModel) -> QuantileFn:
    """``(T, X) -> Q`` on the original scale for row-wise levels ``T`` (n x m).

    Unlike :meth:`FittedModel.quantile` this does not refuse extreme levels
    for SPQR: the metric is meant to expose the bounded-support behaviour.
    """
    def fn(T, X):
        X = np.atleast_2d(np.asarray(X, float))
        return model.response_scaling.inverse(reg._quantile(model, X, np.asarray(T, float)))
    return fn


def _stratified(n, m, lo, hi, rng):
    u = rng.random((n, m))
    T = lo + (hi - lo) * (np.arange(m)[None, :] + u) / m
    # stay strictly inside the interval where quantile functions can be infinite
    return np.clip(T, np.nextafter(lo, hi), np.nextafter(hi, lo))


def iwd(true_quantile: QuantileFn, model_quantile: QuantileFn, X, tau_samples: int = IWD_TAUS,
        tau_lo: float = 0.0, tau_hi: float = 1.0, seed=0, name: str = "IWD",
        chunk: int = 500) -> MetricReport:
    """Integrated conditional 1-Wasserstein distance between two quantile functions.

    Each test row gets its own stratified sample of ``tau_samples`` levels on
    ``(tau_lo, tau_hi)`` (one uniform draw per equal-width stratum), so the
    estimate averages ``|Q - Q_hat|`` over the level interval.
    """
    if not 0.0 <= tau_lo < tau_hi <= 1.0:
        raise ValueError("need 0 <= tau_lo < tau_hi <= 1")
    X = np.atleast_2d(np.asarray(X, float))
    rng = np.random.default_rng(seed)
    n = X.shape[0]
    T = _stratified(n, tau_samples, tau_lo, tau_hi, rng)
    row_means = np.empty(n)
    for s in range(0, n, chunk):
        sl = slice(s, s + chunk)
        Q = np.asarray(true_quantile(T[sl], X[sl]), float)
        Qh = np.asarray(model_quantile(T[sl], X[sl]), float)
        bad = ~(np.isfinite(Q) & np.isfinite(Qh))
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise ValueError(f"non-finite quantile at tau={T[sl][r, c]!r}, "
                             f"x={X[sl][r].tolist()} (row {s + r})")
        row_means[sl] = np.abs(Q - Qh).mean(axis=1)
    se = float(row_means.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    return MetricReport(name, float(row_means.mean()), se, tau_lo, tau_hi)


def tiwd(true_quantile: QuantileFn, model_quantile: QuantileFn, X,
         tau_samples: int = TIWD_TAUS, seed=0) -> MetricReport:
    """Tail version of :func:`iwd` on levels ``(0.999, 1)``."""
    return iwd(true_quantile, model_quantile, X, tau_samples, *TIWD_RANGE, seed=seed,
               name="tIWD")


@dataclass(frozen=True)
class PIT:
    """Probability integral transforms; ``degenerate`` marks values equal to 0 or 1."""

    values: np.ndarray
    degenerate: np.ndarray

    @property
    def n_degenerate(self) -> int:
        return int(self.degenerate.sum())


def pit(model: FittedModel, X, y) -> PIT:
    """``u_i = F(y_i | x_i)`` under the fitted model.

    SPQR assigns ``u = 1`` to responses above the training maximum; such rows
    are flagged rather than altered.
    """
    u = np.asarray(model.cdf(X, np.asarray(y, float)), float)
    return PIT(u, (u >= 1.0) | (u <= 0.0))


@dataclass(frozen=True)
class DiagnosticPoints:
    """Sorted (theoretical, empirical) pairs; ``excluded`` counts dropped points."""

    theoretical: np.ndarray
    empirical: np.ndarray
    excluded: int = 0


def _values(u):
    return np.asarray(u.values if isinstance(u, PIT) else u, float).ravel()


def pp_uniform(u) -> DiagnosticPoints:
    """Empirical PIT order statistics against uniform plotting positions ``i/(n+1)``."""
    v = np.sort(_values(u))
    n = v.size
    return DiagnosticPoints(np.arange(1, n + 1) / (n + 1), v, 0)


def qq_exponential(u) -> DiagnosticPoints:
    """PIT on standard exponential margins, ``-log(1 - u)``.

    ``u = 1`` maps to an infinite point; those are excluded and counted.
    """
    v = _values(u)
    keep = v < 1.0
    v = np.sort(v[keep])
    n = v.size
    emp = -np.log1p(-v)
    theo = -np.log1p(-np.arange(1, n + 1) / (n + 1))
    return DiagnosticPoints(theo, emp, int((~keep).sum()))


def ks_uniform(u):
    """Kolmogorov-Smirnov test of uniformity; returns ``(statistic, p_value)``."""
    res = stats.kstest(_values(u), "uniform")
    return float(res.statistic), float(res.pvalue)


# ---------------------------------------------------------------------------
# Bootstrap


@dataclass
class BootstrapResult:
    """Replicate fits with percentile intervals for requested functionals."""

    models: list
    failures: list
    estimates: dict = field(default_factory=dict)
    intervals: dict = field(default_factory=dict)
    level: float = 0.95

    @property
    def n_failed(self) -> int:
        return len(self.failures)


def bootstrap(train: Dataset, fit: Callable[[Dataset, int], FittedModel], n_boot: int,
              seed=0, functionals: Optional[dict] = None, level: float = 0.95,
              threads: int = 1) -> BootstrapResult:
    """Nonparametric bootstrap of a fitting procedure.

    Parameters
    ----------
    fit : callable
        ``fit(data, seed)``; receives a per-replicate seed so that the
        validation split is redrawn for every replicate.
    functionals : dict, optional
        ``name -> f(model)`` returning an array; percentile intervals are
        formed element-wise across the successful replicates.

    Failed replicates (training errors) are recorded and skipped.
    """
    if n_boot < 1:
        raise ValueError("n_boot must be positive")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    children = np.random.SeedSequence(seed).spawn(n_boot)

    def one(b):
        rng = np.random.default_rng(children[b])
        rows = rng.integers(0, train.n, train.n)
        fit_seed = int(children[b].generate_state(1)[0])
        try:
            return fit(train.subset(rows), fit_seed), None
        except (TrainingError, ValueError, FloatingPointError) as exc:
            return None, f"replicate {b}: {exc}"

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(one, range(n_boot)))
    else:
        results = [one(b) for b in range(n_boot)]
    models = [m for m, _ in results if m is not None]
    failures = [e for _, e in results if e is not None]
    out = BootstrapResult(models, failures, level=level)
    alpha = (1.0 - level) / 2.0
    for name, f in (functionals or {}).items():
        if not models:
            break
        vals = np.stack([np.asarray(f(m), float) for m in models])
        out.estimates[name] = vals
        out.intervals[name] = (np.quantile(vals, alpha, axis=0),
                               np.quantile(vals, 1.0 - alpha, axis=0))
    return out


# ---------------------------------------------------------------------------
# Simulation experiment


def run_experiment(design: str, n: int, seed: int, arch: Architecture = Architecture(),
                   blend: BlendSpec = BlendSpec(0.9, 0.99, 25.0),
                   config: TrainingConfig = TrainingConfig(), n_test: int = 5000,
                   iwd_taus: int = IWD_TAUS, tiwd_taus: int = TIWD_TAUS, log=None) -> dict:
    """One replicate: simulate, fit SPQR and SPQRx, score both on fresh covariates.

    The SPQRx fit is warm-started from the SPQR fit, which is also the scored
    SPQR model.  Returns the metrics and both fitted models.
    """
    from .simulate import SimSpec, generate

    children = np.random.SeedSequence(seed).generate_state(4)
    train, truth = generate(SimSpec(design, n, int(children[0])))
    test, _ = generate(SimSpec(design, n_test, int(children[1])))
    cfg = replace(config, seed=int(children[2]))
    spqr = reg.fit_spqr(train, arch, cfg, log=log)
    spqrx = reg.fit_spqrx(train, arch, blend, cfg, pretrained=spqr, log=log)
    mseed = int(children[3])
    out = {"design": design, "n": n, "seed": seed, "models": {"spqr": spqr, "spqrx": spqrx}}
    for name, model in (("spqr", spqr), ("spqrx", spqrx)):
        q = model_quantile_fn(model)
        out[f"iwd_{name}"] = iwd(truth.quantile, q, test.X, iwd_taus, seed=mseed)
        out[f"tiwd_{name}"] = tiwd(truth.quantile, q, test.X, tiwd_taus, seed=mseed)
    return out
