"""Excess log-odds, the random-effects fit, funnel limits and flags.

For each provider the excess is ``logit(o/n) - logit(e/n)`` with standard
error ``sqrt(1/o + 1/(n - o))``. Between-provider variance is estimated by
the DerSimonian-Laird method of moments; control limits sit at
``mu_hat +/- c * sqrt(s**2 + tau2_hat)`` and points are plotted against the
precision ``1/s``.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .casemix import expected_counts, pooled_rates
from .domain import FunnelChart, FunnelPoint, LimitCurve, ProviderDiagnosisStats, RandomEffectsFit
from .errors import (
    EmptySpecialty,
    FunnelError,
    InconsistentCounts,
    InconsistentStratum,
    InsufficientProviders,
    InvalidGrid,
    InvalidPopulation,
    InvalidStandardError,
)
from .ingest import ClaimTable, Dataset
from .population import _weights, allocate_matrix, compute_market_shares

log = logging.getLogger(__name__)

#: Recorded in every report so results can be traced to the formula variant.
INTERPRETATION = {
    "pooled_mean": "mu_hat = sum(w*_i y_i) / sum(w*_i), w*_i = 1/(s_i^2 + tau2_hat)",
    "limits": "mu_hat +/- c * sqrt(s^2 + tau2_hat)",
    "precision_axis": "1/s",
    "plotted_value": "raw excess y_i",
    "tau2_estimator": "DerSimonian-Laird method of moments, truncated at 0",
    "continuity_correction": "o'=o+0.5, n'=n+1 when o=0 or o>=n; same for e when e=0 or e>=n",
}

FLAG_NAMES = {0: "within", 1: "above", -1: "below"}


@dataclass(frozen=True)
class AnalysisConfig:
    sigma_levels: tuple = (2.0, 3.0)
    primary_sigma: float = 2.0
    min_observed: int = 1
    continuity_correction: bool = True
    grid_points: int = 256

    def __post_init__(self):
        levels = tuple(sorted({float(c) for c in self.sigma_levels}))
        object.__setattr__(self, "sigma_levels", levels)
        object.__setattr__(self, "primary_sigma", float(self.primary_sigma))
        if not levels or levels[0] <= 0:
            raise ValueError("sigma levels must be positive")
        if self.primary_sigma not in levels:
            raise ValueError(f"primary sigma {self.primary_sigma} not among sigma levels {levels}")
        if self.min_observed < 1:
            raise ValueError("min_observed must be at least 1")
        if self.grid_points < 200:
            raise ValueError("grid_points must be at least 200")

    def to_dict(self):
        return {
            "sigma_levels": list(self.sigma_levels),
            "primary_sigma": self.primary_sigma,
            "min_observed": self.min_observed,
            "continuity_correction": self.continuity_correction,
            "grid_points": self.grid_points,
        }


# ---------------------------------------------------------------------------
# primitives

def _raise_status(status, index, o, n, e):
    if status == kernels.BAD_POPULATION:
        raise InvalidPopulation(f"population must be positive, got {n[index]!r}")
    if status == kernels.BOUNDARY:
        raise InconsistentCounts(
            f"boundary counts o={o[index]!r}, e={e[index]!r}, n={n[index]!r} need continuity correction"
        )
    raise InconsistentCounts(f"counts o={o[index]!r}, e={e[index]!r} inconsistent with n={n[index]!r}")


def excess_arrays(o, n, e, correct=True):
    """Vectorised :func:`excess_log_odds`; returns ``(y, s, corrected_mask)``."""
    o = np.asarray(o, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    y, s, status = kernels.excess_log_odds(o, n, e, bool(correct))
    bad = np.flatnonzero(status < 0)
    if bad.size:
        i = int(bad[0])
        _raise_status(int(status[i]), i, o, n, e)
    return y, s, status == kernels.CORRECTED


def excess_log_odds(o, n, e, correct=True):
    """Excess log-odds ``y`` and its standard error ``s`` for one provider.

    >>> y, s = excess_log_odds(75, 100, 50)
    >>> round(y, 4), round(s, 4)
    (1.0986, 0.2309)
    """
    y, s, _ = excess_arrays([o], [n], [e], correct)
    return float(y[0]), float(s[0])


def _as_ys(stats, std_errors=None):
    if std_errors is not None:
        return np.asarray(stats, dtype=np.float64), np.asarray(std_errors, dtype=np.float64), None
    stats = list(stats)
    if stats and isinstance(stats[0], ProviderDiagnosisStats):
        return (
            np.array([x.excess for x in stats]),
            np.array([x.std_error for x in stats]),
            tuple(x.provider_id for x in stats),
        )
    arr = np.asarray(stats, dtype=np.float64).reshape(-1, 2)
    return arr[:, 0].copy(), arr[:, 1].copy(), None


def fit_random_effects(stats, std_errors=None, *, diagnosis_id="", provider_ids=None):
    """Method-of-moments random-effects fit.

    ``stats`` is a sequence of :class:`ProviderDiagnosisStats`, a sequence of
    ``(y, s)`` pairs, or an array of ``y`` with ``std_errors`` given separately.
    """
    y, s, ids = _as_ys(stats, std_errors)
    k = y.shape[0]
    if k < 2:
        raise InsufficientProviders(f"need at least 2 providers, got {k}")
    if not np.all(np.isfinite(s) & (s > 0)):
        raise InvalidStandardError("every standard error must be positive and finite")
    if not np.all(np.isfinite(y)):
        raise InvalidStandardError("every excess must be finite")
    mu, tau2, q, w, shrunk = kernels.dl_fit(y, s)
    ids = tuple(provider_ids) if provider_ids is not None else (ids or tuple(str(i) for i in range(k)))
    return RandomEffectsFit(
        diagnosis_id,
        float(mu),
        float(tau2),
        float(q),
        k,
        ids,
        tuple(y.tolist()),
        tuple(w.tolist()),
        tuple(shrunk.tolist()),
    )


def precision_grid(std_errors, points=256):
    """Evenly spaced precisions spanning the providers' ``1/s``, plus each provider's own."""
    p = 1.0 / np.asarray(std_errors, dtype=np.float64)
    if p.size == 0:
        raise InvalidGrid("no providers to span")
    lo, hi = float(p.min()), float(p.max())
    if lo == hi:
        lo, hi = 0.9 * lo, 1.1 * hi
    return np.unique(np.concatenate([np.linspace(lo, hi, points), p]))


def funnel_limits(fit, precision_grid, sigma_levels=(2.0, 3.0)):
    """Limit curves ``mu_hat +/- c*sqrt(1/p**2 + tau2_hat)`` on the grid, one per ``c``.

    ``fit`` is a :class:`RandomEffectsFit` or a ``(mu_hat, tau2_hat)`` pair.
    """
    mu, tau2 = (fit.mu_hat, fit.tau2_hat) if isinstance(fit, RandomEffectsFit) else fit
    grid = np.asarray(precision_grid, dtype=np.float64)
    if grid.size == 0:
        raise InvalidGrid("precision grid is empty")
    if not np.all(np.isfinite(grid) & (grid > 0)):
        raise InvalidGrid("precisions must be positive and finite")
    sd = np.sqrt(1.0 / (grid * grid) + tau2)
    curves = []
    for c in sorted(float(c) for c in sigma_levels):
        half = c * sd
        curves.append(LimitCurve(c, tuple(grid.tolist()), tuple((mu - half).tolist()),
                                 tuple((mu + half).tolist())))
    return tuple(curves)


def flag_providers(stats, fit, primary_sigma=2.0, std_errors=None):
    """Flag each provider as ``within``, ``above`` or ``below`` the ``c = primary_sigma`` limits."""
    y, s, _ = _as_ys(stats, std_errors)
    codes = kernels.flag(y, s, fit.mu_hat, fit.tau2_hat, float(primary_sigma))
    return [FLAG_NAMES[int(c)] for c in codes]


def z_scores(fit, std_errors):
    """Distance of each excess from ``mu_hat`` in units of ``sqrt(s**2 + tau2_hat)``."""
    y = np.asarray(fit.excess)
    s = np.asarray(std_errors, dtype=np.float64)
    return (y - fit.mu_hat) / np.sqrt(s * s + fit.tau2_hat)


# ---------------------------------------------------------------------------
# per-diagnosis pipeline

@dataclass(frozen=True)
class DiagnosisSlice:
    """Everything needed to analyse one diagnosis, independent of the rest of the dataset.

    ``providers`` are the providers with any claim row for the diagnosis;
    ``observed``, ``share_rows`` are ``(len(providers), n_strata)`` and
    ``overall`` holds their all-strata specialty shares.
    """

    diagnosis_id: str
    specialty_id: str
    strata: tuple
    population: np.ndarray
    providers: tuple
    observed: np.ndarray
    share_rows: np.ndarray
    overall: np.ndarray
    specialty_providers: tuple = ()


@dataclass(frozen=True)
class DiagnosisResult:
    diagnosis_id: str
    specialty_id: str
    stats: tuple = ()
    fit: RandomEffectsFit | None = None
    chart: FunnelChart | None = None
    flags: dict = field(default_factory=dict)
    excluded: tuple = ()
    adjusted: tuple = ()
    skipped: str | None = None
    message: str = ""

    @property
    def analyzed(self):
        return self.skipped is None


_SKIP_CODES = (
    (InsufficientProviders, "insufficient_providers"),
    (EmptySpecialty, "empty_specialty"),
    (InconsistentStratum, "inconsistent_stratum"),
    (InvalidPopulation, "invalid_population"),
    (InconsistentCounts, "inconsistent_counts"),
    (FunnelError, "error"),
)


def analyze_diagnosis(sl: DiagnosisSlice, config: AnalysisConfig = AnalysisConfig()) -> DiagnosisResult:
    """Allocation, casemix, excess, fit, limits and flags for one diagnosis.

    Failing preconditions are reported through ``DiagnosisResult.skipped``
    rather than raised.
    """
    o_all = sl.observed.sum(axis=1)
    keep = o_all >= config.min_observed
    treating = tuple(p for p, k in zip(sl.providers, keep) if k)
    treating_set = set(treating)
    excluded = tuple(sorted((set(sl.specialty_providers) | set(sl.providers)) - treating_set))
    try:
        if len(treating) < 2:
            raise InsufficientProviders(f"{len(treating)} treating provider(s)")
        if np.isnan(sl.overall).any():
            raise EmptySpecialty(sl.specialty_id)
        obs = sl.observed[keep]
        o = o_all[keep].astype(np.float64)
        w = _weights(sl.share_rows[keep], sl.overall[keep], sl.population)
        alloc, adjusted_idx = allocate_matrix(w, sl.population, o)
        adjusted = tuple(treating[i] for i in adjusted_idx)
        for p in adjusted:
            log.warning("diagnosis %s: allocation for provider %s raised above its observed count",
                        sl.diagnosis_id, p)
        rates = pooled_rates(obs, alloc, diagnosis_id=sl.diagnosis_id, strata=sl.strata)
        e = expected_counts(rates, alloc)
        n = alloc.sum(axis=1)
        y, s, corrected = excess_arrays(o, n, e, config.continuity_correction)
        fit = fit_random_effects(y, s, diagnosis_id=sl.diagnosis_id, provider_ids=treating)
    except FunnelError as exc:
        code = next(c for cls, c in _SKIP_CODES if isinstance(exc, cls))
        return DiagnosisResult(sl.diagnosis_id, sl.specialty_id, excluded=excluded, skipped=code,
                               message=str(exc))

    codes = kernels.flag(y, s, fit.mu_hat, fit.tau2_hat, config.primary_sigma)
    flags = {p: FLAG_NAMES[int(c)] for p, c in zip(treating, codes)}
    stats = tuple(
        ProviderDiagnosisStats(p, sl.diagnosis_id, int(oi), float(ni), float(ei), float(yi), float(si),
                               bool(ci))
        for p, oi, ni, ei, yi, si, ci in zip(treating, o.tolist(), n.tolist(), e.tolist(),
                                             y.tolist(), s.tolist(), corrected.tolist())
    )
    grid = precision_grid(s, config.grid_points)
    curves = funnel_limits(fit, grid, config.sigma_levels)
    points = tuple(
        FunnelPoint(p, 1.0 / si, yi, flags[p]) for p, yi, si in zip(treating, y.tolist(), s.tolist())
    )
    chart = FunnelChart(sl.diagnosis_id, points, fit.mu_hat, fit.tau2_hat, curves, config.sigma_levels,
                        config.primary_sigma)
    return DiagnosisResult(sl.diagnosis_id, sl.specialty_id, stats, fit, chart, flags, excluded, adjusted)


class _Prepared:
    """Claim rows grouped by diagnosis plus the market-share table."""

    def __init__(self, table: ClaimTable):
        self.table = table
        self.shares = compute_market_shares(table, strict=False)
        order = np.argsort(table.diagnosis_idx, kind="stable")
        self.order = order
        self.bounds = np.searchsorted(table.diagnosis_idx[order], np.arange(len(table.diagnoses) + 1))
        self.population = table.population.astype(np.float64)

    def slice(self, d) -> DiagnosisSlice:
        t = self.table
        rows = self.order[self.bounds[d]:self.bounds[d + 1]]
        prov = t.provider_idx[rows]
        uniq, inv = np.unique(prov, return_inverse=True)
        observed = np.zeros((uniq.size, len(t.strata)), dtype=np.int64)
        np.add.at(observed, (inv, t.stratum_idx[rows]), t.count[rows])
        sp = int(t.diagnosis_specialty[d])
        share = self.shares.shares[sp]
        spec_providers = np.flatnonzero(self.shares.overall[sp] > 0)
        return DiagnosisSlice(
            t.diagnoses[d],
            t.specialties[sp],
            t.strata,
            self.population,
            tuple(t.providers[i] for i in uniq),
            observed,
            share[:, uniq].T.copy(),
            self.shares.overall[sp, uniq].copy(),
            tuple(t.providers[i] for i in spec_providers),
        )


_worker_state = {}


def _init_worker(table, config):
    _worker_state["prep"] = _Prepared(table)
    _worker_state["config"] = config


def _run_chunk(indices):
    prep, config = _worker_state["prep"], _worker_state["config"]
    return [analyze_diagnosis(prep.slice(d), config) for d in indices]


def analyze_dataset(data: Dataset | ClaimTable, config: AnalysisConfig = AnalysisConfig(), *,
                    workers=1, diagnoses=None):
    """Analyse every diagnosis (or the ids in ``diagnoses``), sorted by diagnosis id.

    Results do not depend on ``workers``; each diagnosis is computed
    independently and results are collected in id order.
    """
    table = data if isinstance(data, ClaimTable) else ClaimTable.from_dataset(data)
    idx = list(range(len(table.diagnoses)))
    if diagnoses is not None:
        wanted = set(diagnoses)
        idx = [i for i, d in enumerate(table.diagnoses) if d in wanted]
    workers = workers or os.cpu_count() or 1
    if workers <= 1 or len(idx) < 2:
        prep = _Prepared(table)
        return [analyze_diagnosis(prep.slice(d), config) for d in idx]
    n_chunks = min(len(idx), workers * 4)
    size = math.ceil(len(idx) / n_chunks)
    chunks = [idx[i:i + size] for i in range(0, len(idx), size)]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                             initargs=(table, config)) as pool:
        out = []
        for part in pool.map(_run_chunk, chunks):
            out.extend(part)
    return out
