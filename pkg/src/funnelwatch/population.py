"""Potential-patient populations by stratified market-share allocation.

A provider's share of a stratum is its fraction of all patients of the
specialty in that stratum. For each diagnosis the stratum's persons are split
over the providers that treated the diagnosis, in proportion to their shares
renormalized over that set.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import EmptySpecialty, InconsistentCounts, NoTreatingProviders, UnknownIdentifier
from .ingest import ClaimTable, Dataset

log = logging.getLogger(__name__)

#: providers with allocated population at or below their observed count are raised to o*(1+EPSILON)
EPSILON = 0.01


@dataclass(frozen=True)
class MarketShareTable:
    """Shares per specialty, stratum and provider.

    ``shares[sp]`` is an ``(n_strata, n_providers)`` array whose rows sum to 1
    (NaN rows mark a specialty with no patients at all). ``overall[sp]`` holds
    the all-strata shares and ``fallback[sp]`` marks strata whose row was
    taken from ``overall`` because the specialty had no volume there.
    """

    specialties: tuple
    strata: tuple
    providers: tuple
    shares: np.ndarray
    overall: np.ndarray
    fallback: np.ndarray
    volume: np.ndarray = field(repr=False)

    def share(self, specialty_id, stratum, provider_id):
        try:
            sp = self.specialties.index(specialty_id)
            s = self.strata.index(stratum)
            p = self.providers.index(provider_id)
        except ValueError as exc:
            raise UnknownIdentifier("identifier", str(exc).split(" is not")[0]) from None
        return float(self.shares[sp, s, p])

    def empty_specialties(self):
        return [self.specialties[i] for i in np.flatnonzero(np.isnan(self.overall[:, 0]))]


def _table(data):
    return data if isinstance(data, ClaimTable) else ClaimTable.from_dataset(data)


def compute_market_shares(data: Dataset | ClaimTable, *, strict=True) -> MarketShareTable:
    """Market shares per (specialty, stratum).

    Strata where the specialty has no patients fall back to the specialty's
    all-strata shares. A specialty without any patients raises
    :class:`EmptySpecialty` when ``strict``; otherwise its rows are NaN.
    """
    t = _table(data)
    n_sp, n_s, n_p = len(t.specialties), len(t.strata), len(t.providers)
    spec_idx = t.diagnosis_specialty[t.diagnosis_idx]
    flat = (spec_idx * n_s + t.stratum_idx) * n_p + t.provider_idx
    volume = np.bincount(flat, weights=t.count.astype(np.float64), minlength=n_sp * n_s * n_p)
    volume = volume.reshape(n_sp, n_s, n_p)
    by_stratum = volume.sum(axis=2)
    per_provider = volume.sum(axis=1)
    spec_total = per_provider.sum(axis=1)
    if strict:
        for sp in np.flatnonzero(spec_total == 0):
            raise EmptySpecialty(t.specialties[sp])
    with np.errstate(invalid="ignore", divide="ignore"):
        overall = per_provider / spec_total[:, None]
        shares = volume / by_stratum[:, :, None]
    fallback = by_stratum == 0
    shares = np.where(fallback[:, :, None], overall[:, None, :], shares)
    return MarketShareTable(t.specialties, t.strata, t.providers, shares, overall, fallback, volume)


@dataclass(frozen=True)
class Allocation:
    """Population allocated to each treating provider, per stratum.

    ``by_stratum`` has shape ``(k, n_strata)``; ``adjusted`` lists providers
    whose allocation was raised to stay above their observed count.
    """

    diagnosis_id: str
    providers: tuple
    strata: tuple
    by_stratum: np.ndarray
    adjusted: tuple = ()

    @property
    def totals(self):
        return self.by_stratum.sum(axis=1)

    @property
    def n(self):
        return dict(zip(self.providers, self.totals.tolist()))


def _weights(share_rows, overall_row, pop):
    """Renormalize shares over the treating set; strata they never saw use overall shares."""
    colsum = share_rows.sum(axis=0)
    w = share_rows.copy()
    empty = colsum <= 0
    if empty.any():
        ov = overall_row / overall_row.sum()
        w[:, empty] = ov[:, None]
        colsum = w.sum(axis=0)
    return w / colsum


def allocate_matrix(weights, pop, observed=None, epsilon=EPSILON):
    """Split ``pop`` (per stratum) by the ``(k, S)`` column-stochastic ``weights``.

    When ``observed`` is given, any provider whose total allocation is at or
    below its observed count is raised to ``observed * (1 + epsilon)``; the
    increase is taken from the other providers in each stratum in proportion
    to their allocations there, so stratum totals are unchanged.

    Returns ``(allocation, adjusted_indices)``.
    """
    pop = np.asarray(pop, dtype=np.float64)
    alloc = weights * pop
    if observed is None:
        return alloc, ()
    observed = np.asarray(observed, dtype=np.float64)
    totals = alloc.sum(axis=1)
    bad = set(np.flatnonzero(totals <= observed).tolist())
    if not bad:
        return alloc, ()

    # Provider i's allocation under multiplier m on its own weights:
    # sum_s pop_s * m*w_is / (m*w_is + R_is), with R_is the others' weight.
    mult = np.ones(weights.shape[0])
    target = observed * (1.0 + epsilon)
    adjusted = set()
    for _ in range(200):
        adjusted |= bad
        moved = 0.0
        for i in sorted(adjusted):
            wm = weights * mult[:, None]
            others = wm.sum(axis=0) - wm[i]
            wi = weights[i]
            reach = float(np.sum(pop[wi > 0]))
            if reach <= target[i]:
                raise InconsistentCounts(
                    f"provider index {i}: observed {observed[i]:g} cannot fit in reachable population {reach:g}"
                )

            def excess(logm, i=i, wi=wi, others=others):
                m = math.exp(logm)
                with np.errstate(invalid="ignore", divide="ignore"):
                    part = np.where(wi > 0, pop * (m * wi) / (m * wi + others), 0.0)
                return float(part.sum()) - target[i]

            lo, hi = -1.0, 1.0
            while excess(lo) > 0:
                lo *= 2.0
            while excess(hi) < 0:
                hi *= 2.0
                if hi > 700:
                    raise InconsistentCounts(f"provider index {i}: allocation cannot reach {target[i]:g}")
            new = math.exp(brentq(excess, lo, hi, xtol=1e-14, rtol=1e-15))
            moved = max(moved, abs(math.log(new / mult[i])))
            mult[i] = new
        wm = weights * mult[:, None]
        wm = wm / wm.sum(axis=0)
        alloc = wm * pop
        totals = alloc.sum(axis=1)
        bad = set(np.flatnonzero(totals <= observed).tolist()) - adjusted
        if not bad and moved < 1e-12:
            break
    return alloc, tuple(sorted(adjusted))


def allocate_population(shares: MarketShareTable, population, diagnosis_id, treating_providers,
                        *, specialty_id, observed=None):
    """Allocate the population over the providers that treated ``diagnosis_id``.

    Parameters
    ----------
    shares : MarketShareTable
    population : sequence of PopulationCell or array of persons per stratum
        Cells are summed over regions.
    treating_providers : iterable of provider ids
    specialty_id : str
        Specialty whose shares apply to the diagnosis.
    observed : mapping of provider id to observed count, optional
        Enables the raise-to-observed correction.
    """
    treating = tuple(sorted(treating_providers))
    if not treating:
        raise NoTreatingProviders(f"diagnosis {diagnosis_id!r} has no treating providers")
    if specialty_id not in shares.specialties:
        raise UnknownIdentifier("specialty", specialty_id)
    p_ix = {p: i for i, p in enumerate(shares.providers)}
    for p in treating:
        if p not in p_ix:
            raise UnknownIdentifier("provider", p)
    sp = shares.specialties.index(specialty_id)
    if np.isnan(shares.overall[sp, 0]):
        raise EmptySpecialty(specialty_id)
    if isinstance(population, np.ndarray):
        pop = population.astype(np.float64)
    else:
        s_ix = {s: i for i, s in enumerate(shares.strata)}
        pop = np.zeros(len(shares.strata))
        for cell in population:
            if cell.stratum not in s_ix:
                raise UnknownIdentifier("stratum", cell.stratum)
            pop[s_ix[cell.stratum]] += cell.person_count
    idx = np.array([p_ix[p] for p in treating])
    rows = shares.shares[sp][:, idx].T
    if np.all(shares.overall[sp, idx] == 0):
        raise NoTreatingProviders(
            f"diagnosis {diagnosis_id!r}: treating providers have no {specialty_id!r} volume"
        )
    w = _weights(rows, shares.overall[sp, idx], pop)
    obs = None if observed is None else np.array([observed[p] for p in treating], dtype=np.float64)
    alloc, adjusted = allocate_matrix(w, pop, obs)
    names = tuple(treating[i] for i in adjusted)
    for name in names:
        log.warning("diagnosis %s: allocation for provider %s raised above its observed count",
                    diagnosis_id, name)
    return Allocation(diagnosis_id, treating, shares.strata, alloc, names)
