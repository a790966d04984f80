"""Partly interval-censored survival data with longitudinal records.

CSV long format, one row per sampling interval::

    id,start,end,status,z1..zq[,x1..xp][,w1..wpz]

Rows with status 0 are sampling intervals and contribute the z values
observed at ``start``.  A row with status 1 (or with ``end`` equal to
``inf``) is the terminal row and gives the censoring interval
``[start, end]``; its z values are ignored.  A subject without a terminal row
is right-censored at the end of its last row.
"""
from __future__ import annotations

import csv
import enum
import math
import re
from dataclasses import dataclass, field, replace

import numpy as np


class DataError(ValueError):
    pass


class CensoringStatus(enum.Enum):
    EXACT = "exact"
    LEFT = "left"
    RIGHT = "right"
    INTERVAL = "interval"

    @classmethod
    def classify(cls, t_left: float, t_right: float) -> "CensoringStatus":
        if math.isinf(t_right):
            return cls.RIGHT
        if t_left == t_right:
            return cls.EXACT
        if t_left == 0.0:
            return cls.LEFT
        return cls.INTERVAL


@dataclass(frozen=True)
class LongRecord:
    time: float
    values: tuple


@dataclass(frozen=True)
class Subject:
    id: str
    t_left: float
    t_right: float
    x: tuple = ()
    longitudinal: tuple = ()
    long_fixed: tuple = ()

    @property
    def status(self) -> CensoringStatus:
        return CensoringStatus.classify(self.t_left, self.t_right)

    @property
    def follow_up(self) -> float:
        """Last time at which the subject is known to be under observation."""
        return self.t_left if math.isinf(self.t_right) else self.t_right


@dataclass(frozen=True)
class Dataset:
    subjects: tuple
    p: int = 0
    q: int = 0
    pz: int = 0
    z_names: tuple = ()
    x_names: tuple = ()
    w_names: tuple = ()
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        if not self.z_names:
            object.__setattr__(self, "z_names", tuple(f"z{r + 1}" for r in range(self.q)))
        if not self.x_names:
            object.__setattr__(self, "x_names", tuple(f"x{j + 1}" for j in range(self.p)))
        if not self.w_names:
            object.__setattr__(self, "w_names", tuple(f"w{j + 1}" for j in range(self.pz)))

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def n0(self) -> int:
        return sum(1 for s in self.subjects if s.status is not CensoringStatus.RIGHT)

    @property
    def n_records(self) -> int:
        return sum(len(s.longitudinal) for s in self.subjects)

    def status_counts(self) -> dict:
        out = {k.value: 0 for k in CensoringStatus}
        for s in self.subjects:
            out[s.status.value] += 1
        return out

    def endpoint_times(self) -> np.ndarray:
        """Finite positive censoring endpoints, used for knot placement."""
        vals = []
        for s in self.subjects:
            for v in (s.t_left, s.t_right):
                if math.isfinite(v) and v > 0:
                    vals.append(v)
        return np.unique(np.asarray(vals, dtype=float))

    def record_times(self) -> np.ndarray:
        return np.asarray([rec.time for s in self.subjects for rec in s.longitudinal], dtype=float)

    def max_time(self) -> float:
        """Largest finite endpoint or record time."""
        ends = self.endpoint_times()
        recs = self.record_times()
        cand = [0.0]
        if ends.size:
            cand.append(float(ends.max()))
        if recs.size:
            cand.append(float(recs.max()))
        return max(cand)

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for s in self.subjects:
            h.update(repr((s.id, s.t_left, s.t_right, s.x, s.long_fixed)).encode())
            for rec in s.longitudinal:
                h.update(repr((rec.time, rec.values)).encode())
        return h.hexdigest()[:16]


_Z = re.compile(r"^z\d+$")
_X = re.compile(r"^x\d+$")
_W = re.compile(r"^w\d+$")


def _parse_float(text, *, allow_inf=False):
    s = text.strip()
    if allow_inf and (s == "" or s.lower() in ("inf", "+inf", "infinity")):
        return math.inf
    if s == "" or s.lower() == "nan":
        return math.nan
    return float(s)


def _schema_from_header(header, schema):
    schema = dict(schema or {})
    z = schema.get("z") or [c for c in header if _Z.match(c)]
    x = schema.get("x") or [c for c in header if _X.match(c)]
    w = schema.get("w") or [c for c in header if _W.match(c)]
    cols = {k: schema.get(k, k) for k in ("id", "start", "end", "status")}
    for name in list(cols.values()) + list(z) + list(x) + list(w):
        if name not in header:
            raise DataError(f"missing column {name!r}")
    return cols, list(z), list(x), list(w)


def parse_long_csv(path, schema: dict | None = None) -> Dataset:
    """Read a long-format CSV file into a :class:`Dataset`.

    ``schema`` may rename the id/start/end/status columns and list the z, x
    and w column names explicitly; otherwise columns named ``z1, z2, ...``,
    ``x1, ...`` and ``w1, ...`` are picked up in header order.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError("empty file") from None
        cols, zc, xc, wc = _schema_from_header(header, schema)
        pos = {h: i for i, h in enumerate(header)}
        groups: dict[str, list] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"row {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                sid = row[pos[cols["id"]]].strip()
                start = _parse_float(row[pos[cols["start"]]])
                end = _parse_float(row[pos[cols["end"]]], allow_inf=True)
                status_txt = row[pos[cols["status"]]].strip()
                z = tuple(_parse_float(row[pos[c]]) for c in zc)
                x = tuple(_parse_float(row[pos[c]]) for c in xc)
                w = tuple(_parse_float(row[pos[c]]) for c in wc)
            except ValueError as exc:
                raise DataError(f"row {lineno}: {exc}") from None
            if status_txt not in ("0", "1"):
                raise DataError(f"row {lineno}: unknown status code {status_txt!r}")
            if not math.isfinite(start) or start < 0:
                raise DataError(f"row {lineno}: start must be finite and >= 0")
            if end < start:
                raise DataError(f"row {lineno}: end < start")
            groups.setdefault(sid, []).append((lineno, start, end, int(status_txt), z, x, w))

    subjects = []
    bad_order = []
    for sid, rows in groups.items():
        subjects.append(_subject_from_rows(sid, rows, bad_order))
    if bad_order:
        raise DataError("non-monotone times within ids: " + ", ".join(bad_order))
    return Dataset(tuple(subjects), p=len(xc), q=len(zc), pz=len(wc),
                   z_names=tuple(zc), x_names=tuple(xc), w_names=tuple(wc))


def _constant_block(sid, rows, idx, what):
    vals = None
    for lineno, *fields in rows:
        v = fields[idx]
        if any(math.isnan(a) for a in v):
            continue
        if vals is None:
            vals = v
        elif v != vals:
            raise DataError(f"row {lineno}: {what} covariates change within id {sid!r}")
    return vals


def _subject_from_rows(sid, rows, bad_order):
    terminal = None
    sampling = []
    for k, (lineno, start, end, status, z, x, w) in enumerate(rows):
        is_terminal = status == 1 or math.isinf(end)
        if is_terminal:
            if terminal is not None:
                raise DataError(f"row {lineno}: second terminal row for id {sid!r}")
            terminal = (lineno, start, end)
        else:
            if terminal is not None:
                raise DataError(f"row {lineno}: sampling row after the terminal row of id {sid!r}")
            if any(math.isnan(v) for v in z):
                raise DataError(f"row {lineno}: missing longitudinal value")
            sampling.append((start, end, z))
    times = [s for s, _, _ in sampling]
    if any(b <= a for a, b in zip(times, times[1:])):
        bad_order.append(sid)
    if terminal is None:
        if not sampling:
            raise DataError(f"id {sid!r} has no rows")
        t_left, t_right = sampling[-1][1], math.inf
    else:
        t_left, t_right = terminal[1], terminal[2]
    p = len(rows[0][5])
    pz = len(rows[0][6])
    x = _constant_block(sid, rows, 4, "fixed") or tuple([math.nan] * p)
    w = _constant_block(sid, rows, 5, "longitudinal-design") or tuple([math.nan] * pz)
    if any(math.isnan(v) for v in x) or any(math.isnan(v) for v in w):
        raise DataError(f"id {sid!r}: missing time-fixed covariate")
    recs = tuple(LongRecord(float(s), tuple(float(v) for v in z)) for s, _, z in sampling)
    return Subject(sid, float(t_left), float(t_right), tuple(x), recs, tuple(w))


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf"
    if math.isnan(v):
        return "nan"
    return repr(float(v))


def write_long_csv(ds: Dataset, path) -> None:
    """Write ``ds`` in the long format read by :func:`parse_long_csv`."""
    header = ["id", "start", "end", "status", *ds.z_names, *ds.x_names, *ds.w_names]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for s in ds.subjects:
            recs = s.longitudinal
            xs = [_fmt(v) for v in s.x]
            ws = [_fmt(v) for v in s.long_fixed]
            for a, rec in enumerate(recs):
                end = recs[a + 1].time if a + 1 < len(recs) else max(rec.time, s.t_left)
                wr.writerow([s.id, _fmt(rec.time), _fmt(end), 0, *[_fmt(v) for v in rec.values], *xs, *ws])
            wr.writerow([s.id, _fmt(s.t_left), _fmt(s.t_right), 1, *(["nan"] * ds.q), *xs, *ws])


def validate(ds: Dataset) -> list:
    """List invariant violations; an empty list means the data can be fitted."""
    findings = []
    if ds.n == 0:
        findings.append("dataset has no subjects")
    ids = [s.id for s in ds.subjects]
    if len(set(ids)) != len(ids):
        findings.append("duplicate subject ids")
    for s in ds.subjects:
        tag = f"subject {s.id!r}"
        if not (s.t_left >= 0 and s.t_left <= s.t_right and math.isfinite(s.t_left)):
            findings.append(f"{tag}: invalid censoring interval [{s.t_left}, {s.t_right}]")
            continue
        if s.t_right == 0.0:
            findings.append(f"{tag}: event at time 0")
        if len(s.x) != ds.p:
            findings.append(f"{tag}: expected p={ds.p} fixed covariates, found {len(s.x)}")
        if len(s.long_fixed) != ds.pz:
            findings.append(f"{tag}: expected {ds.pz} longitudinal-design covariates, found {len(s.long_fixed)}")
        if not all(math.isfinite(v) for v in s.x + s.long_fixed):
            findings.append(f"{tag}: non-finite time-fixed covariate")
        times = [r.time for r in s.longitudinal]
        if any(b <= a for a, b in zip(times, times[1:])):
            findings.append(f"{tag}: longitudinal times not strictly increasing")
        if any(t < 0 for t in times):
            findings.append(f"{tag}: negative longitudinal time")
        if times and max(times) > s.follow_up:
            findings.append(f"{tag}: longitudinal time beyond the censoring interval")
        if any(len(r.values) != ds.q for r in s.longitudinal):
            findings.append(f"{tag}: longitudinal records do not have q={ds.q} values")
        elif not all(math.isfinite(v) for r in s.longitudinal for v in r.values):
            findings.append(f"{tag}: non-finite longitudinal value")
    return findings


def midpoint_impute(ds: Dataset) -> Dataset:
    """Replace left and interval censoring by an exact event at the midpoint."""
    out = []
    for s in ds.subjects:
        st = s.status
        if st is CensoringStatus.INTERVAL or st is CensoringStatus.LEFT:
            mid = 0.5 * (s.t_left + s.t_right)
            out.append(replace(s, t_left=mid, t_right=mid))
        else:
            out.append(s)
    return replace(ds, subjects=tuple(out))
