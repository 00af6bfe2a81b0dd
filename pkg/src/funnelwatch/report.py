"""Run reports: a JSON document plus a flat per-diagnosis summary table."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field

from . import __version__
from .engine import INTERPRETATION, z_scores


@dataclass(frozen=True)
class FlaggedProvider:
    provider_id: str
    flag: str
    observed: int
    population: float
    expected: float
    y: float
    s: float
    z: float
    shrunken: float

    @property
    def beyond_limit(self):
        """How far past the limit the provider sits, in sigma units (needs the primary sigma)."""
        return abs(self.z)


@dataclass(frozen=True)
class DiagnosisSummary:
    diagnosis_id: str
    specialty_id: str
    k: int = 0
    mu_hat: float | None = None
    tau2_hat: float | None = None
    q_statistic: float | None = None
    above: int = 0
    below: int = 0
    skipped: str | None = None
    message: str = ""
    flagged: tuple = ()
    excluded: tuple = ()
    adjusted: tuple = ()

    @property
    def flagged_count(self):
        return self.above + self.below


@dataclass(frozen=True)
class RunReport:
    metadata: dict = field(default_factory=dict)
    diagnoses: tuple = ()
    totals: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "metadata": self.metadata,
            "totals": self.totals,
            "diagnoses": [
                {
                    **{k: getattr(d, k) for k in DiagnosisSummary.__dataclass_fields__
                       if k not in ("flagged", "excluded", "adjusted")},
                    "flagged": [vars_flagged(f) for f in d.flagged],
                    "excluded": list(d.excluded),
                    "adjusted": list(d.adjusted),
                }
                for d in self.diagnoses
            ],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        diags = []
        for d in doc["diagnoses"]:
            d = dict(d)
            d["flagged"] = tuple(FlaggedProvider(**f) for f in d["flagged"])
            d["excluded"] = tuple(d["excluded"])
            d["adjusted"] = tuple(d["adjusted"])
            diags.append(DiagnosisSummary(**d))
        return cls(doc["metadata"], tuple(diags), doc["totals"])

    def ranking(self):
        """Analysed diagnoses ordered by flagged-provider count, most first."""
        done = [d for d in self.diagnoses if d.skipped is None]
        return sorted(done, key=lambda d: (-d.flagged_count, d.diagnosis_id))


def vars_flagged(f):
    return {k: getattr(f, k) for k in FlaggedProvider.__dataclass_fields__}


def config_hash(config_dict):
    blob = json.dumps(config_dict, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _summary(r):
    if not r.analyzed:
        return DiagnosisSummary(r.diagnosis_id, r.specialty_id, skipped=r.skipped, message=r.message,
                                excluded=r.excluded)
    fit = r.fit
    z = z_scores(fit, [st.std_error for st in r.stats])
    flagged = []
    for st, zi, sh in zip(r.stats, z.tolist(), fit.shrunken):
        flag = r.flags[st.provider_id]
        if flag != "within":
            flagged.append(FlaggedProvider(st.provider_id, flag, st.observed, st.population, st.expected,
                                           st.excess, st.std_error, zi, sh))
    counts = r.chart.flag_counts()
    return DiagnosisSummary(
        r.diagnosis_id, r.specialty_id, fit.k, fit.mu_hat, fit.tau2_hat, fit.q_statistic,
        counts["above"], counts["below"], None, "", tuple(flagged), r.excluded, r.adjusted,
    )


def summarize(results, *, config=None, inputs=None, extra=None) -> RunReport:
    """Collect per-diagnosis results into a :class:`RunReport`, ordered by diagnosis id."""
    entries = tuple(_summary(r) for r in sorted(results, key=lambda r: r.diagnosis_id))
    cfg = config.to_dict() if hasattr(config, "to_dict") else dict(config or {})
    meta = {
        "version": __version__,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "inputs": dict(sorted((inputs or {}).items())),
        "interpretation": dict(INTERPRETATION),
    }
    if extra:
        meta.update(extra)
    skipped = {}
    for d in entries:
        if d.skipped:
            skipped[d.skipped] = skipped.get(d.skipped, 0) + 1
    totals = {
        "diagnoses": len(entries),
        "analyzed": sum(d.skipped is None for d in entries),
        "skipped": sum(d.skipped is not None for d in entries),
        "skipped_by_reason": dict(sorted(skipped.items())),
        "above": sum(d.above for d in entries),
        "below": sum(d.below for d in entries),
    }
    return RunReport(meta, entries, totals)


SUMMARY_COLUMNS = ("diagnosis", "specialty", "k", "mu_hat", "tau2_hat", "q_statistic", "above", "below",
                   "skipped")


def summary_table(report: RunReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for d in report.diagnoses:
        w.writerow((
            d.diagnosis_id, d.specialty_id, d.k,
            "" if d.mu_hat is None else repr(d.mu_hat),
            "" if d.tau2_hat is None else repr(d.tau2_hat),
            "" if d.q_statistic is None else repr(d.q_statistic),
            d.above, d.below, d.skipped or "",
        ))
    return buf.getvalue()


def summary_text(report: RunReport, top=20) -> str:
    """Plain-text ranking of diagnoses by flagged providers."""
    t = report.totals
    lines = [
        f"{t.get('analyzed', 0)} of {t.get('diagnoses', 0)} diagnoses analysed; "
        f"{t.get('above', 0)} provider flags above, {t.get('below', 0)} below.",
    ]
    ranked = report.ranking()[:top]
    if ranked:
        lines.append("")
        lines.append(f"{'diagnosis':<16}{'k':>5}{'above':>7}{'below':>7}{'tau2':>12}")
        for d in ranked:
            lines.append(f"{d.diagnosis_id:<16}{d.k:>5}{d.above:>7}{d.below:>7}{d.tau2_hat:>12.4g}")
    for reason, n in t.get("skipped_by_reason", {}).items():
        lines.append(f"skipped ({reason}): {n}")
    return "\n".join(lines) + "\n"
