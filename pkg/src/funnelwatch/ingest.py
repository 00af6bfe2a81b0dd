"""Parse, validate and transform input datasets.

Claims and population tables are delimited text with a header row; columns
are matched by header name so their order is free. Transform specs are YAML
(JSON is accepted as a subset).
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import yaml

from .domain import (
    ClaimAggregate,
    PopulationCell,
    StrataScheme,
    StratumKey,
    TransformSpec,
)
from .errors import (
    DuplicateCell,
    InsufficientCount,
    InvalidCount,
    InvariantError,
    SchemaError,
    TransformError,
    UnknownIdentifier,
)

CLAIM_COLUMNS = ("provider", "diagnosis", "specialty", "sex", "age_group", "ses", "count")
POPULATION_COLUMNS = ("sex", "age_group", "ses", "persons")


class ClaimRows(list):
    """List of :class:`ClaimAggregate` that remembers the source line of each entry."""

    def __init__(self, items=(), row_numbers=()):
        super().__init__(items)
        self.row_numbers = list(row_numbers)


@dataclass(frozen=True)
class Dataset:
    claims: tuple
    population: tuple
    providers: frozenset | None = None
    metadata: Mapping = field(default_factory=dict)
    scheme: StrataScheme = StrataScheme()

    def __post_init__(self):
        object.__setattr__(self, "claims", tuple(self.claims))
        object.__setattr__(self, "population", tuple(self.population))
        if self.providers is None:
            object.__setattr__(self, "providers", frozenset(c.provider_id for c in self.claims))
        else:
            object.__setattr__(self, "providers", frozenset(self.providers))
        seen = set()
        for c in self.claims:
            if c.cell in seen:
                raise InvariantError("claims", f"duplicate cell {c.cell!r}")
            seen.add(c.cell)

    @property
    def total_patients(self):
        return sum(c.patient_count for c in self.claims)

    def diagnoses(self):
        return sorted({c.diagnosis_id for c in self.claims})

    def specialty_of(self):
        out = {}
        for c in self.claims:
            out.setdefault(c.diagnosis_id, c.specialty_id)
        return out


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" or "warning"
    location: str
    message: str

    def __str__(self):
        return f"{self.severity}: {self.location}: {self.message}"


# ---------------------------------------------------------------------------
# parsing

def _reader(source, delimiter):
    if isinstance(source, str):
        source = io.StringIO(source)
    reader = csv.reader(source, delimiter=delimiter)
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("empty input, header row required") from None
    return reader, [h.strip() for h in header]


def _column_index(header, required, schema):
    schema = dict(schema or {})
    idx = {}
    for col in required:
        name = schema.get(col, col)
        if name not in header:
            raise SchemaError(f"missing required column {name!r}", row=1)
        idx[col] = header.index(name)
    return idx


def _parse_count(text, row, column):
    t = text.strip()
    try:
        value = int(t)
    except ValueError:
        raise InvalidCount(f"{column} {text!r} is not an integer", row=row) from None
    if value < 0:
        raise InvalidCount(f"{column} {value} is negative", row=row)
    return value


class _StratumCache:
    def __init__(self, scheme):
        self.scheme = scheme
        self.cache = {}

    def get(self, sex, age, ses, row):
        key = (sex, age, ses)
        s = self.cache.get(key)
        if s is None:
            try:
                s = StratumKey(sex, age, ses)
            except InvariantError as exc:
                raise SchemaError(f"unknown stratum label ({exc})", row=row) from None
            bad = self.scheme.check(s)
            if bad:
                raise SchemaError(f"unknown {bad} label {getattr(s, bad)!r}", row=row)
            self.cache[key] = s
        return s


def parse_claims(source, schema=None, *, delimiter=",", scheme=StrataScheme()):
    """Parse a claims table into :class:`ClaimAggregate` records.

    Parameters
    ----------
    source : text stream or str
        Delimited UTF-8 text with a header row.
    schema : mapping, optional
        Maps the logical columns ``provider, diagnosis, specialty, sex,
        age_group, ses, count`` to header names when they differ.
    delimiter : str
        Field separator, ``","`` or ``"\\t"``.
    scheme : StrataScheme
        Declared label sets; rows with other labels raise :class:`SchemaError`.

    Returns
    -------
    ClaimRows
        One aggregate per data row, with ``row_numbers`` giving each row's
        line in the source (the header is line 1).
    """
    reader, header = _reader(source, delimiter)
    col = _column_index(header, CLAIM_COLUMNS, schema)
    strata = _StratumCache(scheme)
    out = ClaimRows()
    seen = {}
    width = max(col.values()) + 1
    for rec in reader:
        row = reader.line_num
        if not rec or all(not f.strip() for f in rec):
            continue
        if len(rec) < width:
            raise SchemaError(f"expected at least {width} fields, got {len(rec)}", row=row)
        stratum = strata.get(rec[col["sex"]].strip(), rec[col["age_group"]].strip(),
                             rec[col["ses"]].strip(), row)
        count = _parse_count(rec[col["count"]], row, "count")
        try:
            claim = ClaimAggregate(
                rec[col["provider"]].strip(),
                rec[col["diagnosis"]].strip(),
                rec[col["specialty"]].strip(),
                stratum,
                count,
            )
        except InvariantError as exc:
            raise SchemaError(str(exc), row=row) from None
        if claim.cell in seen:
            raise DuplicateCell(seen[claim.cell], row, claim.cell)
        seen[claim.cell] = row
        out.append(claim)
        out.row_numbers.append(row)
    return out


def parse_population(source, schema=None, *, delimiter=",", scheme=StrataScheme()):
    """Parse a population table (``sex, age_group, ses[, region], persons``)."""
    reader, header = _reader(source, delimiter)
    col = _column_index(header, POPULATION_COLUMNS, schema)
    region_name = dict(schema or {}).get("region", "region")
    region_col = header.index(region_name) if region_name in header else None
    strata = _StratumCache(scheme)
    out = []
    seen = {}
    for rec in reader:
        row = reader.line_num
        if not rec or all(not f.strip() for f in rec):
            continue
        stratum = strata.get(rec[col["sex"]].strip(), rec[col["age_group"]].strip(),
                             rec[col["ses"]].strip(), row)
        persons = _parse_count(rec[col["persons"]], row, "persons")
        region = rec[region_col].strip() or None if region_col is not None else None
        key = (stratum, region)
        if key in seen:
            raise DuplicateCell(seen[key], row, key)
        seen[key] = row
        out.append(PopulationCell(stratum, persons, region))
    return out


def parse_transforms(source):
    """Parse a YAML/JSON transform document into a :class:`TransformSpec`."""
    text = source if isinstance(source, str) else source.read()
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        row = mark.line + 1 if mark is not None else None
        raise SchemaError(f"malformed transform spec: {getattr(exc, 'problem', exc)}", row=row) from None
    if doc is not None and not isinstance(doc, Mapping):
        raise SchemaError("transform spec must be a mapping at top level")
    try:
        return TransformSpec.from_dict(doc)
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"malformed transform spec: {exc}") from None


def read_dataset(claims_path, population_path, transforms_path=None, *, delimiter=",",
                 scheme=StrataScheme(), metadata=None):
    """Load a dataset from disk and apply the optional transform spec."""
    with open(claims_path, newline="", encoding="utf-8") as fh:
        claims = parse_claims(fh, delimiter=delimiter, scheme=scheme)
    with open(population_path, newline="", encoding="utf-8") as fh:
        population = parse_population(fh, delimiter=delimiter, scheme=scheme)
    ds = Dataset(claims, population, metadata=dict(metadata or {}), scheme=scheme)
    if transforms_path is not None:
        with open(transforms_path, encoding="utf-8") as fh:
            ds = apply_transforms(ds, parse_transforms(fh))
    return ds


# ---------------------------------------------------------------------------
# canonical serialization

def _claim_sort_key(c):
    return (c.provider_id, c.diagnosis_id, c.stratum.sort_key())


def write_claims(claims, stream, *, delimiter=","):
    w = csv.writer(stream, delimiter=delimiter, lineterminator="\n")
    w.writerow(CLAIM_COLUMNS)
    for c in sorted(claims, key=_claim_sort_key):
        s = c.stratum
        w.writerow((c.provider_id, c.diagnosis_id, c.specialty_id, s.sex, s.age_group, s.ses,
                    c.patient_count))


def write_population(population, stream, *, delimiter=","):
    cells = sorted(population, key=lambda p: (p.stratum.sort_key(), p.region_id or ""))
    has_region = any(p.region_id is not None for p in cells)
    w = csv.writer(stream, delimiter=delimiter, lineterminator="\n")
    w.writerow(("sex", "age_group", "ses") + (("region",) if has_region else ()) + ("persons",))
    for p in cells:
        s = p.stratum
        w.writerow((s.sex, s.age_group, s.ses) + ((p.region_id or "",) if has_region else ())
                   + (p.person_count,))


def canonical_bytes(dataset: Dataset):
    buf = io.StringIO()
    write_claims(dataset.claims, buf)
    buf.write("\n")
    write_population(dataset.population, buf)
    return buf.getvalue().encode("utf-8")


# ---------------------------------------------------------------------------
# transforms

def largest_remainder(total, weights):
    """Split integer ``total`` in proportion to ``weights`` so the parts sum to ``total``.

    Ties in the fractional remainder go to the earlier position.
    """
    wsum = sum(weights)
    if total == 0 or wsum == 0:
        return [0] * len(weights)
    # integer arithmetic keeps the split exact
    quotas = [total * w for w in weights]
    base = [q // wsum for q in quotas]
    rem = [q - b * wsum for q, b in zip(quotas, base)]
    short = total - sum(base)
    order = sorted(range(len(weights)), key=lambda i: (-rem[i], i))
    for i in order[:short]:
        base[i] += 1
    return base


def _moved_total(r, available):
    if r.count is not None:
        return r.count
    # round half up on the exact product
    return int(math.floor(r.fraction * available + 0.5))


def apply_transforms(dataset: Dataset, spec: TransformSpec) -> Dataset:
    """Apply re-attributions, provider merges and diagnosis groups, in that order.

    Every identifier in ``spec`` refers to the dataset as it was before the
    transform; a merge scope may also name a diagnosis group. Total patient
    count per stratum is conserved exactly.
    """
    if spec.is_empty:
        return dataset

    specialty = dataset.specialty_of()
    providers = set(dataset.providers)
    present_dx = set(specialty)

    for r in spec.reattributions:
        for p in (r.from_provider, r.to_provider):
            if p not in providers:
                raise UnknownIdentifier("provider", p)
        if r.diagnosis_id not in present_dx:
            raise UnknownIdentifier("diagnosis", r.diagnosis_id)
    for m in spec.provider_merges:
        for p in sorted(m.providers):
            if p not in providers:
                raise UnknownIdentifier("provider", p)
        for d in sorted(m.diagnoses):
            if d not in present_dx and d not in spec.diagnosis_groups:
                raise UnknownIdentifier("diagnosis", d)
    active_groups = {}
    for g, members in spec.diagnosis_groups.items():
        missing = sorted(members - present_dx)
        if missing and g in present_dx:
            members = members & present_dx  # already applied
        elif missing:
            raise UnknownIdentifier("diagnosis", missing[0])
        if not members:
            continue
        specs = {specialty[d] for d in members}
        if len(specs) > 1:
            raise TransformError(f"group {g!r} spans specialties {sorted(specs)}")
        if g in present_dx and g not in members and specialty[g] not in specs:
            raise TransformError(f"group {g!r} exists under another specialty")
        active_groups[g] = members

    cells = {}
    order = []
    for c in dataset.claims:
        cells[c.cell] = c.patient_count
        order.append(c.cell)
    spec_of = dict(specialty)

    for r in spec.reattributions:
        src = sorted(
            ((key, n) for key, n in cells.items()
             if key[0] == r.from_provider and key[1] == r.diagnosis_id),
            key=lambda kv: kv[0][2].sort_key(),
        )
        available = sum(n for _, n in src)
        total = _moved_total(r, available)
        if total > available:
            raise InsufficientCount(
                f"re-attribution of {total} {r.diagnosis_id!r} patients from {r.from_provider!r}"
                f" exceeds its {available}"
            )
        parts = largest_remainder(total, [n for _, n in src])
        for (key, n), moved in zip(src, parts):
            if moved == 0:
                continue
            cells[key] = n - moved
            dest = (r.to_provider, key[1], key[2])
            if dest not in cells:
                order.append(dest)
                cells[dest] = 0
            cells[dest] += moved

    merge_map = []
    for m in spec.provider_merges:
        scope = set()
        for d in m.diagnoses:
            scope |= set(active_groups.get(d, {d}))
        merge_map.append((m, scope))

    def new_provider(p, d):
        for m, scope in merge_map:
            if p in m.providers and (not scope or d in scope):
                return m.merged_id
        return p

    group_of = {d: g for g, members in active_groups.items() for d in members}

    merged = {}
    merged_order = []
    for key in order:
        p, d, s = key
        nk = (new_provider(p, d), group_of.get(d, d), s)
        if nk not in merged:
            merged[nk] = 0
            merged_order.append(nk)
        merged[nk] += cells[key]
    for g, members in active_groups.items():
        spec_of[g] = spec_of[next(iter(sorted(members)))]

    claims = [ClaimAggregate(p, d, spec_of[d], s, merged[(p, d, s)]) for p, d, s in merged_order]
    global_merged = set()
    for m in spec.provider_merges:
        if not m.diagnoses:
            global_merged |= m.providers
    registry = (providers - global_merged) | {m.merged_id for m in spec.provider_merges}
    registry |= {c.provider_id for c in claims}
    return Dataset(claims, dataset.population, frozenset(registry), dataset.metadata, dataset.scheme)


# ---------------------------------------------------------------------------
# validation

def validate(dataset: Dataset):
    """Check dataset-level invariants, returning diagnostics instead of raising."""
    out = []
    registry = dataset.providers
    unknown = sorted({c.provider_id for c in dataset.claims} - registry)
    for p in unknown:
        out.append(Diagnostic("error", f"provider {p}", "referenced in claims but not in registry"))

    for c in dataset.claims:
        bad = dataset.scheme.check(c.stratum)
        if bad:
            out.append(Diagnostic("error", f"claim {c.cell!r}", f"undeclared {bad} label"))

    pop_strata = {p.stratum for p in dataset.population}
    first_ref = {}
    for c in dataset.claims:
        if c.stratum not in pop_strata:
            first_ref.setdefault(c.stratum, c)
    for s in sorted(first_ref, key=StratumKey.sort_key):
        c = first_ref[s]
        out.append(Diagnostic(
            "error",
            f"stratum {s.sex}/{s.age_group}/{s.ses}",
            f"referenced by claims (first: provider {c.provider_id}, diagnosis {c.diagnosis_id})"
            " but absent from population",
        ))

    specs = defaultdict(set)
    for c in dataset.claims:
        specs[c.diagnosis_id].add(c.specialty_id)
    for d in sorted(specs):
        if len(specs[d]) > 1:
            out.append(Diagnostic("error", f"diagnosis {d}",
                                  f"listed under several specialties {sorted(specs[d])}"))

    declared = dataset.metadata.get("insured_population")
    if declared is not None:
        total = sum(p.person_count for p in dataset.population)
        if total != int(declared):
            out.append(Diagnostic("error", "population",
                                  f"cells sum to {total}, declared insured population {declared}"))

    totals = defaultdict(int)
    for c in dataset.claims:
        totals[c.provider_id] += c.patient_count
    for p in sorted(registry):
        if totals.get(p, 0) == 0:
            out.append(Diagnostic("warning", f"provider {p}", "has zero claims in every cell"))
    return out


# ---------------------------------------------------------------------------
# columnar view

@dataclass(frozen=True)
class ClaimTable:
    """Integer-coded columnar form of a dataset, used by the analysis pipeline.

    ``providers``, ``diagnoses``, ``specialties`` and ``strata`` are sorted
    label tuples; the ``*_idx`` arrays index into them. ``population`` holds
    persons per stratum summed over regions.
    """

    providers: tuple
    diagnoses: tuple
    specialties: tuple
    strata: tuple
    provider_idx: np.ndarray
    diagnosis_idx: np.ndarray
    stratum_idx: np.ndarray
    count: np.ndarray
    diagnosis_specialty: np.ndarray
    population: np.ndarray

    @classmethod
    def from_dataset(cls, dataset: Dataset):
        claims = dataset.claims
        strata = tuple(sorted({c.stratum for c in claims} | {p.stratum for p in dataset.population},
                              key=StratumKey.sort_key))
        providers = tuple(sorted(dataset.providers | {c.provider_id for c in claims}))
        diagnoses = tuple(sorted({c.diagnosis_id for c in claims}))
        specialty = dataset.specialty_of()
        specialties = tuple(sorted(set(specialty.values())))
        p_ix = {p: i for i, p in enumerate(providers)}
        d_ix = {d: i for i, d in enumerate(diagnoses)}
        s_ix = {s: i for i, s in enumerate(strata)}
        sp_ix = {s: i for i, s in enumerate(specialties)}
        pop = np.zeros(len(strata), dtype=np.int64)
        for cell in dataset.population:
            pop[s_ix[cell.stratum]] += cell.person_count
        return cls(
            providers=providers,
            diagnoses=diagnoses,
            specialties=specialties,
            strata=strata,
            provider_idx=np.fromiter((p_ix[c.provider_id] for c in claims), np.int64, len(claims)),
            diagnosis_idx=np.fromiter((d_ix[c.diagnosis_id] for c in claims), np.int64, len(claims)),
            stratum_idx=np.fromiter((s_ix[c.stratum] for c in claims), np.int64, len(claims)),
            count=np.fromiter((c.patient_count for c in claims), np.int64, len(claims)),
            diagnosis_specialty=np.array([sp_ix[specialty[d]] for d in diagnoses], dtype=np.int64),
            population=pop,
        )

    def to_dataset(self, metadata=None, scheme=StrataScheme()):
        spec_of = [self.specialties[i] for i in self.diagnosis_specialty]
        claims = [
            ClaimAggregate(self.providers[p], self.diagnoses[d], spec_of[d], self.strata[s], int(n))
            for p, d, s, n in zip(self.provider_idx.tolist(), self.diagnosis_idx.tolist(),
                                  self.stratum_idx.tolist(), self.count.tolist())
        ]
        population = [PopulationCell(s, int(n)) for s, n in zip(self.strata, self.population.tolist())]
        return Dataset(claims, population, frozenset(self.providers), dict(metadata or {}), scheme)
