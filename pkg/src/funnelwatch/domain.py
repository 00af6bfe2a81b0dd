"""Core data types shared by every other module.

All types are frozen dataclasses holding tuples, so instances are immutable
and safe to share between threads and processes. Each type validates its own
invariants on construction and raises :class:`~funnelwatch.errors.InvariantError`
naming the offending field. ``to_dict``/``from_dict`` give a lossless
JSON-friendly form.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .errors import InvariantError

SEX_LABELS = ("female", "male", "unknown")
SES_LABELS = ("low", "middle", "high")
DEFAULT_AGE_GROUPS = tuple(f"{lo}-{lo + 4}" for lo in range(0, 90, 5)) + ("90+",)

FLAGS = ("within", "above", "below")

_LEADING_INT = re.compile(r"^\s*(\d+)")


def _age_order(label):
    m = _LEADING_INT.match(label)
    return (0, int(m.group(1)), label) if m else (1, 0, label)


def _require(cond, field_name, message):
    if not cond:
        raise InvariantError(field_name, message)


def _finite(x):
    return isinstance(x, (int, float)) and math.isfinite(x)


@dataclass(frozen=True, slots=True)
class StratumKey:
    sex: str
    age_group: str
    ses: str

    def __post_init__(self):
        _require(self.sex in SEX_LABELS, "sex", f"{self.sex!r} not in {SEX_LABELS}")
        _require(self.ses in SES_LABELS, "ses", f"{self.ses!r} not in {SES_LABELS}")
        _require(
            isinstance(self.age_group, str) and self.age_group.strip() != "",
            "age_group",
            "must be a non-empty label",
        )

    def sort_key(self):
        return (SEX_LABELS.index(self.sex), _age_order(self.age_group), SES_LABELS.index(self.ses))

    def to_dict(self):
        return {"sex": self.sex, "age_group": self.age_group, "ses": self.ses}

    @classmethod
    def from_dict(cls, d):
        return cls(d["sex"], d["age_group"], d["ses"])


@dataclass(frozen=True, slots=True)
class StrataScheme:
    """Closed label sets for the three casemix adjusters."""

    sex: tuple = SEX_LABELS
    age_groups: tuple = DEFAULT_AGE_GROUPS
    ses: tuple = SES_LABELS

    def __post_init__(self):
        for name in ("sex", "age_groups", "ses"):
            labels = getattr(self, name)
            _require(len(labels) > 0, name, "label set is empty")
            _require(len(set(labels)) == len(labels), name, "duplicate labels")
        _require(set(self.sex) <= set(SEX_LABELS), "sex", f"labels must come from {SEX_LABELS}")
        _require(set(self.ses) <= set(SES_LABELS), "ses", f"labels must come from {SES_LABELS}")

    def check(self, stratum: StratumKey):
        """Return the name of the first field whose label is undeclared, else None."""
        if stratum.sex not in self.sex:
            return "sex"
        if stratum.age_group not in self.age_groups:
            return "age_group"
        if stratum.ses not in self.ses:
            return "ses"
        return None

    def strata(self):
        return tuple(
            StratumKey(sx, ag, ses) for sx in self.sex for ag in self.age_groups for ses in self.ses
        )

    def order(self, stratum: StratumKey):
        return (
            self.sex.index(stratum.sex),
            self.age_groups.index(stratum.age_group),
            self.ses.index(stratum.ses),
        )


@dataclass(frozen=True, slots=True)
class ClaimAggregate:
    provider_id: str
    diagnosis_id: str
    specialty_id: str
    stratum: StratumKey
    patient_count: int

    def __post_init__(self):
        for name in ("provider_id", "diagnosis_id", "specialty_id"):
            v = getattr(self, name)
            _require(isinstance(v, str) and v != "", name, "must be a non-empty identifier")
        _require(isinstance(self.stratum, StratumKey), "stratum", "must be a StratumKey")
        _require(
            isinstance(self.patient_count, int) and not isinstance(self.patient_count, bool),
            "patient_count",
            "must be an integer",
        )
        _require(self.patient_count >= 0, "patient_count", f"negative count {self.patient_count}")

    @property
    def cell(self):
        return (self.provider_id, self.diagnosis_id, self.stratum)

    def to_dict(self):
        return {
            "provider_id": self.provider_id,
            "diagnosis_id": self.diagnosis_id,
            "specialty_id": self.specialty_id,
            "stratum": self.stratum.to_dict(),
            "patient_count": self.patient_count,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["provider_id"],
            d["diagnosis_id"],
            d["specialty_id"],
            StratumKey.from_dict(d["stratum"]),
            int(d["patient_count"]),
        )


@dataclass(frozen=True, slots=True)
class PopulationCell:
    stratum: StratumKey
    person_count: int
    region_id: str | None = None

    def __post_init__(self):
        _require(isinstance(self.stratum, StratumKey), "stratum", "must be a StratumKey")
        _require(
            isinstance(self.person_count, int) and not isinstance(self.person_count, bool),
            "person_count",
            "must be an integer",
        )
        _require(self.person_count >= 0, "person_count", f"negative count {self.person_count}")

    def to_dict(self):
        return {
            "stratum": self.stratum.to_dict(),
            "person_count": self.person_count,
            "region_id": self.region_id,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(StratumKey.from_dict(d["stratum"]), int(d["person_count"]), d.get("region_id"))


@dataclass(frozen=True, slots=True)
class ProviderDiagnosisStats:
    """Observed, population and expected counts with the derived excess.

    ``excess`` and ``std_error`` are on the log-odds scale and were computed
    from the counts after continuity correction when ``corrected`` is set.
    """

    provider_id: str
    diagnosis_id: str
    observed: int
    population: float
    expected: float
    excess: float
    std_error: float
    corrected: bool = False

    def __post_init__(self):
        _require(self.observed >= 0, "observed", "must be non-negative")
        _require(_finite(self.population) and self.population > 0, "population", "must be positive")
        _require(_finite(self.expected) and self.expected >= 0, "expected", "must be non-negative")
        _require(_finite(self.excess), "excess", "must be finite")
        _require(_finite(self.std_error) and self.std_error > 0, "std_error", "must be positive")

    @property
    def precision(self):
        return 1.0 / self.std_error

    def to_dict(self):
        return {
            "provider_id": self.provider_id,
            "diagnosis_id": self.diagnosis_id,
            "observed": self.observed,
            "population": self.population,
            "expected": self.expected,
            "excess": self.excess,
            "std_error": self.std_error,
            "corrected": self.corrected,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True, slots=True)
class RandomEffectsFit:
    """Method-of-moments random-effects fit for one diagnosis."""

    diagnosis_id: str
    mu_hat: float
    tau2_hat: float
    q_statistic: float
    k: int
    provider_ids: tuple
    excess: tuple
    weights: tuple
    shrunken: tuple

    def __post_init__(self):
        _require(_finite(self.mu_hat), "mu_hat", "must be finite")
        _require(_finite(self.tau2_hat) and self.tau2_hat >= 0, "tau2_hat", "must be >= 0")
        _require(_finite(self.q_statistic) and self.q_statistic >= 0, "q_statistic", "must be >= 0")
        for name in ("provider_ids", "excess", "weights", "shrunken"):
            _require(len(getattr(self, name)) == self.k, name, f"length must equal k={self.k}")
        _require(all(w > 0 for w in self.weights), "weights", "must be positive")
        resid = math.fsum(w * (y - self.mu_hat) for w, y in zip(self.weights, self.excess))
        scale = math.fsum(w * (abs(y) + abs(self.mu_hat)) for w, y in zip(self.weights, self.excess))
        _require(abs(resid) <= 1e-9 * scale + 1e-300, "mu_hat", "is not the weighted mean")
        for y, t in zip(self.excess, self.shrunken):
            _require(
                min(y, self.mu_hat) <= t <= max(y, self.mu_hat),
                "shrunken",
                f"estimate {t} outside [{y}, {self.mu_hat}]",
            )

    @property
    def i_squared(self):
        """Share of total variation attributed to between-provider spread."""
        if self.q_statistic <= 0:
            return 0.0
        return max(0.0, (self.q_statistic - (self.k - 1)) / self.q_statistic)

    def to_dict(self):
        return {
            "diagnosis_id": self.diagnosis_id,
            "mu_hat": self.mu_hat,
            "tau2_hat": self.tau2_hat,
            "q_statistic": self.q_statistic,
            "k": self.k,
            "provider_ids": list(self.provider_ids),
            "excess": list(self.excess),
            "weights": list(self.weights),
            "shrunken": list(self.shrunken),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["diagnosis_id"],
            d["mu_hat"],
            d["tau2_hat"],
            d["q_statistic"],
            d["k"],
            tuple(d["provider_ids"]),
            tuple(d["excess"]),
            tuple(d["weights"]),
            tuple(d["shrunken"]),
        )


@dataclass(frozen=True, slots=True)
class FunnelPoint:
    provider_id: str
    precision: float
    value: float
    flag: str = "within"

    def __post_init__(self):
        _require(_finite(self.precision) and self.precision > 0, "precision", "must be positive")
        _require(_finite(self.value), "value", "must be finite")
        _require(self.flag in FLAGS, "flag", f"{self.flag!r} not in {FLAGS}")

    def to_dict(self):
        return {
            "provider_id": self.provider_id,
            "precision": self.precision,
            "value": self.value,
            "flag": self.flag,
        }


@dataclass(frozen=True, slots=True)
class LimitCurve:
    sigma: float
    precision: tuple
    lower: tuple
    upper: tuple

    def __post_init__(self):
        _require(_finite(self.sigma) and self.sigma > 0, "sigma", "must be positive")
        n = len(self.precision)
        _require(len(self.lower) == n and len(self.upper) == n, "lower", "curve lengths differ")

    def to_dict(self):
        return {
            "sigma": self.sigma,
            "precision": list(self.precision),
            "lower": list(self.lower),
            "upper": list(self.upper),
        }


def _half_width(sigma, precision, tau2):
    return sigma * math.sqrt(1.0 / (precision * precision) + tau2)


@dataclass(frozen=True, slots=True)
class FunnelChart:
    """Points, limit curves and flags for one diagnosis; the renderable artifact."""

    diagnosis_id: str
    points: tuple
    center: float
    tau2: float
    limit_curves: tuple
    sigma_levels: tuple = (2.0, 3.0)
    primary_sigma: float = 2.0

    def __post_init__(self):
        _require(_finite(self.center), "center", "must be finite")
        _require(_finite(self.tau2) and self.tau2 >= 0, "tau2", "must be >= 0")
        _require(len(self.sigma_levels) > 0, "sigma_levels", "must not be empty")
        _require(all(c > 0 for c in self.sigma_levels), "sigma_levels", "must be positive")
        _require(list(self.sigma_levels) == sorted(set(self.sigma_levels)), "sigma_levels",
                 "must be strictly increasing")
        _require(self.primary_sigma in self.sigma_levels, "primary_sigma", "not among sigma_levels")
        _require(
            tuple(c.sigma for c in self.limit_curves) == tuple(self.sigma_levels),
            "limit_curves",
            "one curve per sigma level, in order",
        )
        for curve in self.limit_curves:
            for lo, hi in zip(curve.lower, curve.upper):
                tol = 1e-12 * (abs(self.center) + abs(hi) + abs(lo))
                _require(abs((hi - self.center) - (self.center - lo)) <= tol, "limit_curves",
                         f"curve at c={curve.sigma} is not symmetric about the center")
        for inner, outer in zip(self.limit_curves, self.limit_curves[1:]):
            _require(inner.precision == outer.precision, "limit_curves", "curves use different grids")
            _require(
                all(o < i for o, i in zip(outer.lower, inner.lower))
                and all(o > i for o, i in zip(outer.upper, inner.upper)),
                "limit_curves",
                f"c={outer.sigma} curve does not strictly contain c={inner.sigma}",
            )
        for p in self.points:
            half = _half_width(self.primary_sigma, p.precision, self.tau2)
            tol = 1e-9 * (1.0 + abs(self.center) + half)
            hi, lo = self.center + half, self.center - half
            ok = {
                "above": p.value >= hi - tol,
                "below": p.value <= lo + tol,
                "within": lo - tol <= p.value <= hi + tol,
            }[p.flag]
            _require(ok, "points", f"flag {p.flag!r} of {p.provider_id!r} inconsistent with limits")

    def flag_counts(self):
        counts = dict.fromkeys(FLAGS, 0)
        for p in self.points:
            counts[p.flag] += 1
        return counts

    def to_dict(self):
        return {
            "diagnosis_id": self.diagnosis_id,
            "points": [p.to_dict() for p in self.points],
            "center": self.center,
            "tau2": self.tau2,
            "limit_curves": [c.to_dict() for c in self.limit_curves],
            "sigma_levels": list(self.sigma_levels),
            "primary_sigma": self.primary_sigma,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["diagnosis_id"],
            tuple(FunnelPoint(**p) for p in d["points"]),
            d["center"],
            d["tau2"],
            tuple(
                LimitCurve(c["sigma"], tuple(c["precision"]), tuple(c["lower"]), tuple(c["upper"]))
                for c in d["limit_curves"]
            ),
            tuple(d["sigma_levels"]),
            d["primary_sigma"],
        )


@dataclass(frozen=True, slots=True)
class ProviderMerge:
    """Providers collapsed into ``merged_id``; ``diagnoses`` empty means all diagnoses."""

    merged_id: str
    providers: frozenset
    diagnoses: frozenset = frozenset()

    def __post_init__(self):
        _require(self.merged_id != "", "merged_id", "must be non-empty")
        _require(len(self.providers) > 0, "providers", "must name at least one provider")

    def applies_to(self, diagnosis_id):
        return not self.diagnoses or diagnosis_id in self.diagnoses

    def to_dict(self):
        return {
            "into": self.merged_id,
            "providers": sorted(self.providers),
            "diagnoses": sorted(self.diagnoses),
        }


@dataclass(frozen=True, slots=True)
class Reattribution:
    """Move patients of one diagnosis between providers, by count or by fraction."""

    from_provider: str
    to_provider: str
    diagnosis_id: str
    count: int | None = None
    fraction: float | None = None

    def __post_init__(self):
        _require((self.count is None) != (self.fraction is None), "count",
                 "exactly one of count and fraction must be given")
        if self.count is not None:
            _require(isinstance(self.count, int) and self.count >= 0, "count", "must be a non-negative integer")
        if self.fraction is not None:
            _require(_finite(self.fraction) and 0 <= self.fraction <= 1, "fraction", "must lie in [0, 1]")
        _require(self.from_provider != self.to_provider, "to_provider", "source and destination are equal")

    def to_dict(self):
        d = {"from": self.from_provider, "to": self.to_provider, "diagnosis": self.diagnosis_id}
        if self.count is not None:
            d["count"] = self.count
        else:
            d["fraction"] = self.fraction
        return d


@dataclass(frozen=True, slots=True)
class TransformSpec:
    diagnosis_groups: Mapping = field(default_factory=dict)
    provider_merges: tuple = ()
    reattributions: tuple = ()

    def __post_init__(self):
        object.__setattr__(
            self,
            "diagnosis_groups",
            {g: frozenset(members) for g, members in sorted(self.diagnosis_groups.items())},
        )
        seen = {}
        for group, members in self.diagnosis_groups.items():
            _require(len(members) > 0, "diagnosis_groups", f"group {group!r} is empty")
            for d in members:
                _require(d not in seen, "diagnosis_groups",
                         f"diagnosis {d!r} appears in groups {seen.get(d)!r} and {group!r}")
                seen[d] = group
        merged = {}
        for m in self.provider_merges:
            for p in m.providers:
                for other in merged.get(p, ()):
                    _require(
                        m.diagnoses and other.diagnoses and not (m.diagnoses & other.diagnoses),
                        "provider_merges",
                        f"provider {p!r} merged twice for the same diagnosis",
                    )
                merged.setdefault(p, []).append(m)

    @property
    def is_empty(self):
        return not self.diagnosis_groups and not self.provider_merges and not self.reattributions

    def to_dict(self):
        return {
            "diagnosis_groups": {g: sorted(m) for g, m in self.diagnosis_groups.items()},
            "provider_merges": [m.to_dict() for m in self.provider_merges],
            "reattributions": [r.to_dict() for r in self.reattributions],
        }

    @classmethod
    def from_dict(cls, d: Mapping | None):
        d = d or {}
        unknown = set(d) - {"diagnosis_groups", "provider_merges", "reattributions"}
        _require(not unknown, "transform", f"unknown sections {sorted(unknown)}")
        groups = d.get("diagnosis_groups") or {}
        _require(isinstance(groups, Mapping), "diagnosis_groups", "must be a mapping")
        merges = []
        raw_merges = d.get("provider_merges") or []
        if isinstance(raw_merges, Mapping):
            raw_merges = [{"into": k, "providers": v} for k, v in raw_merges.items()]
        for m in raw_merges:
            merges.append(
                ProviderMerge(
                    str(m["into"]),
                    frozenset(map(str, m["providers"])),
                    frozenset(map(str, m.get("diagnoses") or ())),
                )
            )
        reattr = []
        for r in d.get("reattributions") or []:
            reattr.append(
                Reattribution(
                    str(r["from"]),
                    str(r["to"]),
                    str(r["diagnosis"]),
                    count=r.get("count"),
                    fraction=r.get("fraction"),
                )
            )
        return cls(
            {str(g): frozenset(map(str, ms)) for g, ms in groups.items()},
            tuple(merges),
            tuple(reattr),
        )


def sorted_strata(strata: Iterable[StratumKey]):
    return sorted(set(strata), key=StratumKey.sort_key)
