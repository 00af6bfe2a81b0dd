"""Synthetic datasets with known ground truth for calibrating the screen.

Randomness comes from one PCG64 stream per replication, seeded through
``numpy.random.SeedSequence([seed, replication])``. Only raw 64-bit outputs
are used: uniforms are ``(raw >> 11) * 2**-53``, normals come from
Box-Muller and binomials from chunked CDF inversion
(:func:`funnelwatch.kernels.binomial_inversion`), so the draws do not depend
on numpy's distribution code.

Each provider has a catchment population per stratum. Observed counts for a
diagnosis are binomial with stratum base rate shifted on the log-odds scale
by the provider's random excess (normal, sd ``tau``) and any injected odds
multiplier. A background diagnosis per specialty supplies the specialty
volume from which market shares are computed.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import yaml
from scipy import stats as _stats

from . import kernels
from .domain import SES_LABELS, DEFAULT_AGE_GROUPS, StrataScheme, StratumKey
from .engine import AnalysisConfig, analyze_dataset
from .errors import InvalidScenario, InvariantError, SchemaError
from .ingest import ClaimTable

_INV_2_53 = 2.0 ** -53
_CHUNK_LOG_BUDGET = 600.0  # exp(-600) is far from underflow


@dataclass(frozen=True)
class Effect:
    """Odds multiplier injected for one provider in one diagnosis."""

    provider: int
    odds_multiplier: float
    diagnosis: int = 0
    volume: int | None = None

    def __post_init__(self):
        if not (math.isfinite(self.odds_multiplier) and self.odds_multiplier > 0):
            raise InvalidScenario(f"odds multiplier must be > 0, got {self.odds_multiplier}")
        if self.provider < 0:
            raise InvalidScenario("effect provider index must be non-negative")
        if self.volume is not None and self.volume < 1:
            raise InvalidScenario("effect volume must be positive")

    @property
    def direction(self):
        return "above" if self.odds_multiplier > 1 else "below" if self.odds_multiplier < 1 else "within"


@dataclass(frozen=True)
class ScenarioSpec:
    providers: int = 89
    volume_low: float = 500.0
    volume_high: float = 50_000.0
    base_rate: float = 0.01
    base_rate_spread: float = 0.0
    tau: float = 0.05
    effects: tuple = ()
    diagnoses: int = 1
    specialties: int = 1
    background_rate: float = 0.2
    casemix_strength: float = 0.5
    mix_spread: float = 1.0
    sex: tuple = ("female", "male")
    age_groups: tuple = DEFAULT_AGE_GROUPS
    ses: tuple = SES_LABELS
    seed: int = 0
    replications: int = 1

    def __post_init__(self):
        object.__setattr__(self, "effects", tuple(
            e if isinstance(e, Effect) else Effect(**e) for e in self.effects
        ))
        for name in ("sex", "age_groups", "ses"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        checks = [
            (self.providers >= 2, "providers must be at least 2"),
            (0 < self.volume_low <= self.volume_high, "need 0 < volume_low <= volume_high"),
            (0 < self.base_rate < 1, "base_rate must lie in (0, 1)"),
            (self.base_rate_spread >= 0, "base_rate_spread must be >= 0"),
            (math.isfinite(self.tau) and self.tau >= 0, "tau must be >= 0"),
            (self.diagnoses >= 1, "diagnoses must be >= 1"),
            (1 <= self.specialties <= self.diagnoses, "need 1 <= specialties <= diagnoses"),
            (0 <= self.background_rate < 1, "background_rate must lie in [0, 1)"),
            (self.replications >= 1, "replications must be >= 1"),
            (self.seed >= 0, "seed must be non-negative"),
        ]
        for ok, msg in checks:
            if not ok:
                raise InvalidScenario(msg)
        for e in self.effects:
            if e.provider >= self.providers:
                raise InvalidScenario(f"effect provider {e.provider} out of range")
            if e.diagnosis >= self.diagnoses:
                raise InvalidScenario(f"effect diagnosis {e.diagnosis} out of range")
        try:
            StrataScheme(self.sex, self.age_groups, self.ses)
        except InvariantError as exc:
            raise InvalidScenario(str(exc)) from None

    @property
    def scheme(self):
        return StrataScheme(self.sex, self.age_groups, self.ses)

    def provider_ids(self):
        width = len(str(self.providers))
        return tuple(f"P{i + 1:0{width}d}" for i in range(self.providers))

    def diagnosis_ids(self):
        width = max(3, len(str(self.diagnoses)))
        return tuple(f"D{i + 1:0{width}d}" for i in range(self.diagnoses))

    def specialty_ids(self):
        width = max(2, len(str(self.specialties)))
        return tuple(f"S{i + 1:0{width}d}" for i in range(self.specialties))

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["effects"] = [
            {k: v for k, v in vars_effect(e).items() if v is not None} for e in self.effects
        ]
        for name in ("sex", "age_groups", "ses"):
            d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidScenario(f"unknown scenario keys {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidScenario(str(exc)) from None


def vars_effect(e):
    return {"provider": e.provider, "odds_multiplier": e.odds_multiplier, "diagnosis": e.diagnosis,
            "volume": e.volume}


def load_scenario(source):
    """Parse a YAML/JSON scenario; syntax errors carry the line number."""
    text = source.read() if hasattr(source, "read") else source
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise SchemaError(f"malformed scenario: {getattr(exc, 'problem', exc)}",
                          row=mark.line + 1 if mark is not None else None) from None
    if not isinstance(doc, dict):
        raise SchemaError("scenario must be a mapping at top level", row=1)
    return ScenarioSpec.from_dict(doc)


# ---------------------------------------------------------------------------
# random stream

class Stream:
    """Uniforms, normals and binomials from a PCG64 raw stream."""

    def __init__(self, seed, replication=0):
        self.bits = np.random.PCG64(np.random.SeedSequence([int(seed), int(replication)]))

    def uniforms(self, n):
        raw = self.bits.random_raw(int(n)) if n else np.empty(0, dtype=np.uint64)
        return (np.asarray(raw, dtype=np.uint64) >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def normals(self, n):
        u = self.uniforms(2 * n).reshape(n, 2) if n else np.empty((0, 2))
        # 1 - u1 lies in (0, 1], keeping the log finite
        r = np.array([math.sqrt(-2.0 * math.log(1.0 - a)) for a in u[:, 0]])
        c = np.array([math.cos(2.0 * math.pi * b) for b in u[:, 1]])
        return r * c

    def binomial(self, n, p):
        n = np.asarray(n, dtype=np.int64).ravel()
        p = np.asarray(p, dtype=np.float64).ravel()
        q = np.minimum(p, 1.0 - p)
        chunk = np.ones(n.shape, dtype=np.int64)
        pos = q > 0
        lq = np.array([-math.log1p(-v) for v in q[pos]])
        chunk[pos] = np.maximum(1, np.floor(_CHUNK_LOG_BUDGET / lq)).astype(np.int64)
        draws = np.where(pos, -(-n // chunk), 0)
        u = self.uniforms(int(draws.sum()))
        return kernels.binomial_inversion(n, p, chunk, u)


def _exp(x):
    # libm exp, not numpy's CPU-dependent SIMD paths
    return np.array([math.exp(v) for v in np.asarray(x, dtype=np.float64).ravel()]).reshape(np.shape(x))


def _split(total, weights):
    """Largest-remainder split of each row's integer ``total`` by float ``weights``."""
    quota = weights / weights.sum(axis=1, keepdims=True) * total[:, None]
    base = np.floor(quota).astype(np.int64)
    short = total - base.sum(axis=1)
    rem = quota - base
    for i in range(base.shape[0]):
        if short[i] > 0:
            top = np.argsort(-rem[i], kind="stable")[: short[i]]
            base[i, top] += 1
    return base


def _stratum_scores(strata, age_groups):
    sex_z = {"female": 0.1, "male": -0.1, "unknown": 0.0}
    ses_z = {"low": 0.5, "middle": 0.0, "high": -0.5}
    span = max(1, len(age_groups) - 1)
    return np.array([
        sex_z[s.sex] + ses_z[s.ses] + (2.0 * age_groups.index(s.age_group) / span - 1.0)
        for s in strata
    ])


@dataclass(frozen=True)
class GroundTruth:
    providers: tuple
    diagnoses: tuple
    true_excess: np.ndarray  # (diagnoses, providers), log-odds
    deviant: tuple  # (provider_id, diagnosis_id, direction, odds_multiplier)
    volumes: np.ndarray = field(repr=False, default=None)

    def to_dict(self):
        return {
            "providers": list(self.providers),
            "diagnoses": list(self.diagnoses),
            "deviant": [
                {"provider": p, "diagnosis": d, "direction": r, "odds_multiplier": m}
                for p, d, r, m in self.deviant
            ],
            "true_excess": {
                d: dict(zip(self.providers, row.tolist())) for d, row in zip(self.diagnoses, self.true_excess)
            },
        }


def generate_table(spec: ScenarioSpec, replication=0):
    """Columnar dataset and ground truth for one replication."""
    st = Stream(spec.seed, replication)
    k = spec.providers
    strata = tuple(sorted(
        (StratumKey(sx, ag, ses) for sx in spec.sex for ag in spec.age_groups for ses in spec.ses),
        key=StratumKey.sort_key,
    ))
    n_s = len(strata)

    u = st.uniforms(k)
    lo, hi = math.log(spec.volume_low), math.log(spec.volume_high)
    volumes = np.array([math.floor(math.exp(lo + v * (hi - lo)) + 0.5) for v in u], dtype=np.int64)
    for e in spec.effects:
        if e.volume is not None:
            volumes[e.provider] = e.volume
    mix = _exp(spec.mix_spread * (2.0 * st.uniforms(k * n_s) - 1.0)).reshape(k, n_s)
    catchment = _split(volumes, mix)

    scores = _stratum_scores(strata, spec.age_groups)
    stratum_mult = _exp(spec.casemix_strength * scores)
    dx_ids = spec.diagnosis_ids()
    sp_ids = spec.specialty_ids()
    prov_ids = spec.provider_ids()
    dx_spec = np.arange(spec.diagnoses) % spec.specialties

    log_mult = np.zeros((spec.diagnoses, k))
    for e in spec.effects:
        log_mult[e.diagnosis, e.provider] += math.log(e.odds_multiplier)

    rows_p, rows_d, rows_s, rows_n = [], [], [], []
    true_excess = np.empty((spec.diagnoses, k))
    p_idx = np.repeat(np.arange(k), n_s)
    s_idx = np.tile(np.arange(n_s), k)
    flat_n = catchment.ravel()
    for d in range(spec.diagnoses):
        base = spec.base_rate * 10.0 ** (spec.base_rate_spread * (2.0 * st.uniforms(1)[0] - 1.0))
        rate = base * stratum_mult
        if np.any(rate >= 1.0):
            raise InvalidScenario(f"diagnosis {dx_ids[d]}: stratum rate reaches 1")
        excess = spec.tau * st.normals(k) + log_mult[d]
        true_excess[d] = excess
        odds = (rate / (1.0 - rate))[None, :] * _exp(excess)[:, None]
        prob = odds / (1.0 + odds)
        if not np.all((prob > 0.0) & (prob < 1.0)):
            raise InvalidScenario(f"diagnosis {dx_ids[d]}: probability outside (0, 1) after effects")
        counts = st.binomial(flat_n, prob.ravel())
        nz = counts > 0
        rows_p.append(p_idx[nz])
        rows_d.append(np.full(int(nz.sum()), d))
        rows_s.append(s_idx[nz])
        rows_n.append(counts[nz])

    diagnoses = list(dx_ids)
    diag_spec = list(dx_spec)
    if spec.background_rate > 0:
        for sp in range(spec.specialties):
            counts = st.binomial(flat_n, np.full(flat_n.shape, spec.background_rate))
            nz = counts > 0
            rows_p.append(p_idx[nz])
            rows_d.append(np.full(int(nz.sum()), len(diagnoses)))
            rows_s.append(s_idx[nz])
            rows_n.append(counts[nz])
            diagnoses.append(f"BG-{sp_ids[sp]}")
            diag_spec.append(sp)

    # labels must be sorted in the table; background ids sort after D*
    order = np.argsort(np.array(diagnoses), kind="stable")
    remap = np.empty(len(diagnoses), dtype=np.int64)
    remap[order] = np.arange(len(diagnoses))
    table = ClaimTable(
        providers=prov_ids,
        diagnoses=tuple(diagnoses[i] for i in order),
        specialties=sp_ids,
        strata=strata,
        provider_idx=np.concatenate(rows_p).astype(np.int64),
        diagnosis_idx=remap[np.concatenate(rows_d).astype(np.int64)],
        stratum_idx=np.concatenate(rows_s).astype(np.int64),
        count=np.concatenate(rows_n).astype(np.int64),
        diagnosis_specialty=np.array([diag_spec[i] for i in order], dtype=np.int64),
        population=catchment.sum(axis=0).astype(np.int64),
    )
    deviant = tuple(
        (prov_ids[e.provider], dx_ids[e.diagnosis], e.direction, e.odds_multiplier)
        for e in spec.effects if e.odds_multiplier != 1.0
    )
    truth = GroundTruth(prov_ids, dx_ids, true_excess, deviant, volumes)
    return table, truth


def generate(spec: ScenarioSpec, replication=0):
    """Synthetic :class:`~funnelwatch.ingest.Dataset` and its ground truth."""
    table, truth = generate_table(spec, replication)
    meta = {"insured_population": int(table.population.sum()), "insurer": "synthetic",
            "seed": spec.seed, "replication": replication}
    return table.to_dataset(meta, spec.scheme), truth


# ---------------------------------------------------------------------------
# replications and evaluation

@dataclass(frozen=True)
class ReplicationOutcome:
    """Flags of the analysed providers per target diagnosis in one replication."""

    replication: int
    flags: dict  # (provider_id, diagnosis_id) -> flag
    mu_hat: dict = field(default_factory=dict)
    tau2_hat: dict = field(default_factory=dict)


def run_replication(spec, replication, config=AnalysisConfig()):
    table, truth = generate_table(spec, replication)
    results = analyze_dataset(table, config, diagnoses=truth.diagnoses)
    flags, mu, tau2 = {}, {}, {}
    for r in results:
        if not r.analyzed:
            continue
        mu[r.diagnosis_id] = r.fit.mu_hat
        tau2[r.diagnosis_id] = r.fit.tau2_hat
        for p, f in r.flags.items():
            flags[(p, r.diagnosis_id)] = f
    return ReplicationOutcome(replication, flags, mu, tau2), truth


def _rep_task(args):
    spec, r, config = args
    return run_replication(spec, r, config)


def replicate(spec: ScenarioSpec, replications=None, config=AnalysisConfig(), *, workers=1):
    """Run ``replications`` independent replications; order and results ignore ``workers``."""
    n = spec.replications if replications is None else replications
    tasks = [(spec, r, config) for r in range(n)]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            pairs = list(pool.map(_rep_task, tasks, chunksize=max(1, n // (4 * workers))))
    else:
        pairs = [_rep_task(t) for t in tasks]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def clopper_pearson(successes, trials, level=0.95):
    """Exact binomial confidence interval."""
    if trials == 0:
        return (0.0, 1.0)
    a = 1.0 - level
    lo = 0.0 if successes == 0 else float(_stats.beta.ppf(a / 2, successes, trials - successes + 1))
    hi = 1.0 if successes == trials else float(_stats.beta.ppf(1 - a / 2, successes + 1, trials - successes))
    return (lo, hi)


@dataclass(frozen=True)
class DetectionSummary:
    replications: int
    null_flags: int
    null_trials: int
    false_flag_rate: float
    false_flag_ci: tuple
    mean_outside_fraction: float
    detection: dict  # odds multiplier -> {"hits", "trials", "rate", "ci"}

    def to_dict(self):
        return {
            "replications": self.replications,
            "null_flags": self.null_flags,
            "null_trials": self.null_trials,
            "false_flag_rate": self.false_flag_rate,
            "false_flag_ci": list(self.false_flag_ci),
            "mean_outside_fraction": self.mean_outside_fraction,
            "detection": {
                repr(float(m)): {**v, "ci": list(v["ci"])} for m, v in sorted(self.detection.items())
            },
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def evaluate_detection(outcomes, truths, level=0.95):
    """False-flag rate over null providers and detection rate per effect size.

    A deviant provider counts as detected in a replication when it is
    flagged in the direction of its injected effect; replications where it
    was not analysed count as misses.
    """
    if not outcomes:
        raise ValueError("at least one replication is required")
    if not isinstance(truths, (list, tuple)):
        truths = [truths] * len(outcomes)
    null_flags = null_trials = 0
    fractions = []
    det = {}
    for out, truth in zip(outcomes, truths):
        deviant = {(p, d): (r, m) for p, d, r, m in truth.deviant}
        outside = 0
        for key, f in sorted(out.flags.items()):
            if f != "within":
                outside += 1
            if key not in deviant:
                null_trials += 1
                null_flags += f != "within"
        if out.flags:
            fractions.append(outside / len(out.flags))
        for key, (direction, mult) in deviant.items():
            entry = det.setdefault(mult, {"hits": 0, "trials": 0})
            entry["trials"] += 1
            entry["hits"] += out.flags.get(key) == direction
    for entry in det.values():
        entry["rate"] = entry["hits"] / entry["trials"]
        entry["ci"] = clopper_pearson(entry["hits"], entry["trials"], level)
    rate = null_flags / null_trials if null_trials else 0.0
    return DetectionSummary(
        replications=len(outcomes),
        null_flags=null_flags,
        null_trials=null_trials,
        false_flag_rate=rate,
        false_flag_ci=clopper_pearson(null_flags, null_trials, level),
        mean_outside_fraction=float(np.mean(fractions)) if fractions else 0.0,
        detection=det,
    )


def default_workers():
    return os.cpu_count() or 1
