"""Verdict records and the verification report."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

SCHEMA_VERSION = "1.0"
STATUSES = ("PASS", "FAIL", "INCONCLUSIVE")


@dataclass
class Verdict:
    name: str
    anchor: str
    status: str
    C_hat: float | None = None
    margin: float | None = None
    first_violation_time: float | None = None
    refinement: dict | None = None
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")

    @property
    def passed(self):
        return self.status == "PASS"

    def to_dict(self):
        return {
            "name": self.name,
            "anchor": self.anchor,
            "status": self.status,
            "C_hat": _clean(self.C_hat),
            "margin": _clean(self.margin),
            "first_violation_time": _clean(self.first_violation_time),
            "refinement": _clean(self.refinement),
            "details": _clean(self.details),
        }


@dataclass
class Section:
    name: str
    entries: list = field(default_factory=list)

    def add(self, verdict):
        self.entries.append(verdict)
        return verdict

    def __getitem__(self, name):
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def names(self):
        return [e.name for e in self.entries]

    @property
    def all_pass(self):
        return all(e.passed for e in self.entries)

    def counts(self):
        out = {s: 0 for s in STATUSES}
        for e in self.entries:
            out[e.status] += 1
        return out

    def to_dict(self):
        return {"name": self.name, "entries": [e.to_dict() for e in self.entries]}


@dataclass
class VerificationReport:
    sections: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, section):
        self.sections.append(section)
        return section

    def section(self, name):
        for s in self.sections:
            if s.name == name:
                return s
        raise KeyError(name)

    def counts(self):
        out = {s: 0 for s in STATUSES}
        for sec in self.sections:
            for k, v in sec.counts().items():
                out[k] += v
        return out

    @property
    def n_fail(self):
        return self.counts()["FAIL"]

    def exit_code(self):
        return 0 if self.n_fail == 0 else 1

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "meta": _clean(self.meta),
            "sections": [s.to_dict() for s in self.sections],
            "summary": self.counts(),
        }

    @classmethod
    def from_dict(cls, data):
        rep = cls(meta=data.get("meta", {}))
        for s in data.get("sections", []):
            sec = Section(s["name"])
            for e in s["entries"]:
                sec.add(Verdict(**{k: _unclean(v) for k, v in e.items()}))
            rep.add(sec)
        return rep


def _clean(obj):
    """JSON-safe copy: non-finite floats become strings, numpy scalars become Python."""
    if obj is None or isinstance(obj, (bool, str)):
        return obj
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "tolist"):
        return _clean(obj.tolist())
    if isinstance(obj, int):
        return int(obj)
    if isinstance(obj, float):
        if math.isnan(obj):
            return "nan"
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        return float(obj)
    return obj


def _unclean(obj):
    if isinstance(obj, str) and obj in ("nan", "inf", "-inf"):
        return float(obj)
    if isinstance(obj, dict):
        return {k: _unclean(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_unclean(v) for v in obj]
    return obj


def digest(report):
    """Short human-readable summary of a report."""
    lines = []
    for sec in report.sections:
        lines.append(f"[{sec.name}]")
        for e in sec.entries:
            extra = []
            if e.C_hat is not None:
                extra.append(f"C_hat={_fmt(e.C_hat)}")
            if e.margin is not None:
                extra.append(f"margin={_fmt(e.margin)}")
            if e.first_violation_time is not None:
                extra.append(f"first_violation_t={_fmt(e.first_violation_time)}")
            if e.refinement:
                r = e.refinement
                extra.append(f"refine_ratio={_fmt(r.get('ratio'))}")
            lines.append(f"  {e.status:<12} {e.name}  {' '.join(extra)}")
    c = report.counts()
    lines.append(f"PASS={c['PASS']} FAIL={c['FAIL']} INCONCLUSIVE={c['INCONCLUSIVE']}")
    return "\n".join(lines)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)
