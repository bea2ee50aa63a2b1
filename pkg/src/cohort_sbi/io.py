"""CSV and manifest readers/writers shared by the library and the CLI."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, FormatError
from .histograms import Histogram, read_histogram_csv, write_histogram_csv
from .simulator import AGES, CohortResult, SummaryVector

MICRO_OUTCOMES = ("age_first_sex", "desired_family_size", "birth_intervals")


def _open(path):
    try:
        return Path(path).open(newline="")
    except OSError as exc:
        raise FormatError(f"{path}: cannot open ({exc.strerror})") from exc


def read_rate_csv(path) -> np.ndarray:
    """Rates for ages 10..49 from an ``age,rate`` file, in age order."""
    rates: dict[int, float] = {}
    with _open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["age", "rate"]:
            raise FormatError(f"{path}: header must be age,rate")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise FormatError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            try:
                age_f = float(row[0])
                rate = float(row[1])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: non-numeric cell ({exc})") from exc
            if not age_f.is_integer():
                raise FormatError(f"{path}:{lineno}: age {row[0]} is not an integer")
            age = int(age_f)
            if age not in range(10, 50):
                raise FormatError(f"{path}:{lineno}: age {age} outside 10..49")
            if age in rates:
                raise FormatError(f"{path}:{lineno}: duplicate age {age}")
            if not math.isfinite(rate):
                raise FormatError(f"{path}:{lineno}: non-finite rate at age {age}")
            if rate < 0:
                raise FormatError(f"{path}:{lineno}: negative rate {rate} at age {age}")
            rates[age] = rate
    missing = [a for a in AGES if a not in rates]
    if missing:
        raise FormatError(f"{path}: missing age {missing[0]}" + (f" (and {len(missing) - 1} more)" if len(missing) > 1 else ""))
    return np.array([rates[a] for a in AGES])


def write_rate_csv(rates, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["age", "rate"])
        for a, r in zip(AGES, rates):
            w.writerow([int(a), repr(float(r))])


@dataclass
class ObservedData:
    asfr: np.ndarray
    asufr: np.ndarray | None = None
    micro: dict[str, Histogram] = field(default_factory=dict)
    label: str = ""

    @property
    def tfr(self) -> float:
        return float(np.sum(self.asfr))

    def summary(self) -> SummaryVector:
        return SummaryVector(self.asfr, self.asufr)


def load_observed(asfr, asufr=None, micro: dict | None = None, label: str = "") -> ObservedData:
    asfr_v = read_rate_csv(asfr)
    asufr_v = None
    if asufr is not None:
        asufr_v = read_rate_csv(asufr)
        over = np.nonzero(asufr_v > asfr_v)[0]
        if over.size:
            a = int(AGES[over[0]])
            raise ConsistencyError(
                f"asufr exceeds asfr at age {a} ({asufr_v[over[0]]!r} > {asfr_v[over[0]]!r})"
            )
    hists = {}
    for name, path in (micro or {}).items():
        if name not in MICRO_OUTCOMES:
            raise FormatError(f"unknown micro outcome {name!r}")
        if path is not None:
            hists[name] = read_histogram_csv(path)
    return ObservedData(asfr_v, asufr_v, hists, label)


def write_summary_csv(summary: SummaryVector, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if summary.asufr is None:
            w.writerow(["age", "asfr"])
            for a, r in zip(AGES, summary.asfr):
                w.writerow([int(a), repr(float(r))])
        else:
            w.writerow(["age", "asfr", "asufr"])
            for a, r, u in zip(AGES, summary.asfr, summary.asufr):
                w.writerow([int(a), repr(float(r)), repr(float(u))])


def write_births_csv(result: CohortResult, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["woman_id", "mother_age_months", "conception_month", "planned"])
        for row in zip(result.woman_id.tolist(), result.mother_age_months.tolist(),
                       result.conception_month.tolist(), result.planned.astype(int).tolist()):
            w.writerow(row)


def write_traits_csv(result: CohortResult, path) -> None:
    t = result.traits
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["woman_id", "x_i", "r_i", "d_i", "b_i"])
        for i in range(len(t)):
            w.writerow([i, repr(float(t.x[i])), repr(float(t.r[i])), int(t.d[i]), repr(float(t.b[i]))])


def write_matrix_csv(path, header, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def read_matrix_csv(path) -> tuple[list[str], np.ndarray]:
    with _open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FormatError(f"{path}: empty file")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} columns")
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: non-numeric cell ({exc})") from exc
    return header, np.array(rows, dtype=float).reshape(-1, len(header))


def write_manifest(entries: dict, path) -> None:
    """Flat ``key = value`` text; values are written with ``str``."""
    lines = []
    for k, v in entries.items():
        s = str(v)
        if "\n" in s:
            raise ValueError(f"manifest value for {k} spans lines")
        lines.append(f"{k} = {s}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict[str, str]:
    out = {}
    with _open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if " = " not in line:
                raise FormatError(f"{path}:{lineno}: expected 'key = value'")
            k, v = line.split(" = ", 1)
            out[k.strip()] = v
    return out


__all__ = [
    "MICRO_OUTCOMES", "ObservedData", "load_observed", "read_rate_csv", "write_rate_csv",
    "write_summary_csv", "write_births_csv", "write_traits_csv", "write_manifest", "read_manifest",
    "write_matrix_csv", "read_matrix_csv", "read_histogram_csv", "write_histogram_csv",
]
