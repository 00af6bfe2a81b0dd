"""Expected counts by indirect standardization over casemix strata.

Stratum rates are pooled over all treating providers of a diagnosis and
applied to each provider's own allocated population, so the expected counts
of a diagnosis sum to its observed total.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InconsistentStratum, InvariantError


@dataclass(frozen=True)
class StratumRates:
    diagnosis_id: str
    strata: tuple
    rates: np.ndarray
    empty: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rates, dtype=np.float64)
        if r.shape != (len(self.strata),):
            raise InvariantError("rates", "one rate per stratum required")
        if np.any(~np.isfinite(r)) or np.any(r < 0) or np.any(r > 1):
            raise InvariantError("rates", "every rate must lie in [0, 1]")

    def rate(self, stratum):
        return float(self.rates[self.strata.index(stratum)])

    def to_dict(self):
        return {
            "diagnosis_id": self.diagnosis_id,
            "rates": {f"{s.sex}/{s.age_group}/{s.ses}": float(r) for s, r in zip(self.strata, self.rates)},
            "empty": [f"{s.sex}/{s.age_group}/{s.ses}" for s, e in zip(self.strata, self.empty) if e],
        }


def pooled_rates(observed, allocations, *, diagnosis_id="", strata=()):
    """Pooled rate per stratum: observed patients over allocated persons.

    Parameters
    ----------
    observed : array (k, n_strata)
        Patients per treating provider and stratum.
    allocations : array (k, n_strata)
        Population allocated to the same providers.
    """
    o = np.asarray(observed, dtype=np.float64).sum(axis=0)
    n = np.asarray(allocations, dtype=np.float64).sum(axis=0)
    empty = n <= 0
    bad = np.flatnonzero((o > n) | (empty & (o > 0)))
    if bad.size:
        i = int(bad[0])
        label = strata[i] if strata else i
        raise InconsistentStratum(
            f"diagnosis {diagnosis_id!r}, stratum {label}: {o[i]:g} observed in {n[i]:g} persons"
        )
    rates = np.divide(o, n, out=np.zeros_like(o), where=~empty)
    # float rounding can put a full stratum at 1 + ulp
    rates = np.minimum(rates, 1.0)
    return StratumRates(diagnosis_id, tuple(strata) or tuple(range(len(o))), rates, empty)


def expected_counts(rates: StratumRates, provider_allocations):
    """``e_i = sum_s rate_s * n_is`` for each row of ``provider_allocations``."""
    alloc = np.asarray(provider_allocations, dtype=np.float64)
    return (alloc * rates.rates).sum(axis=1)
