"""Binned distributions on explicit edges, rebinning and JS divergence."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError


@dataclass
class Histogram:
    edges: np.ndarray  # n + 1 increasing edges; the last may be +inf
    masses: np.ndarray  # n non-negative masses summing to 1, or all zero when empty
    empty: bool = False

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=float)
        self.masses = np.asarray(self.masses, dtype=float)
        if self.edges.ndim != 1 or self.edges.size != self.masses.size + 1:
            raise FormatError("histogram needs len(edges) == len(masses) + 1")
        if np.any(np.diff(self.edges) <= 0):
            raise FormatError("histogram edges must be strictly increasing")

    @property
    def lo(self):
        return self.edges[:-1]

    @property
    def hi(self):
        return self.edges[1:]

    @classmethod
    def from_counts(cls, edges, counts) -> "Histogram":
        counts = np.asarray(counts, dtype=float)
        total = counts.sum()
        if total == 0:
            return cls(edges, np.zeros_like(counts), empty=True)
        return cls(edges, counts / total)

    @classmethod
    def from_values(cls, values, edges) -> "Histogram":
        """Bin values on ``edges`` (left-closed bins; last edge may be inf)."""
        edges = np.asarray(edges, dtype=float)
        values = np.asarray(values, dtype=float)
        idx = np.searchsorted(edges, values, side="right") - 1
        inside = (idx >= 0) & (idx < edges.size - 1)
        counts = np.bincount(idx[inside], minlength=edges.size - 1)
        return cls.from_counts(edges, counts)

    @classmethod
    def from_samples(cls, samples, n_bins: int = 20) -> "Histogram":
        """Equal-width histogram spanning the sample range."""
        samples = np.asarray(samples, dtype=float)
        lo, hi = samples.min(), samples.max()
        if hi <= lo:
            hi = lo + max(abs(lo) * 1e-6, 1e-9)
        edges = np.linspace(lo, hi, n_bins + 1)
        counts, _ = np.histogram(samples, bins=edges)
        return cls.from_counts(edges, counts)


def integer_edges(values) -> np.ndarray:
    """Unit-width edges covering floor(min)..floor(max)."""
    v = np.floor(np.asarray(values, dtype=float))
    if v.size == 0:
        return np.array([0.0, 1.0])
    return np.arange(v.min(), v.max() + 2.0)


def rebin(src: Histogram, target_edges) -> Histogram:
    """Move ``src`` mass onto ``target_edges`` by interval-overlap share.

    Mass lying beyond the target range is assigned to the nearest end bin.
    A source bin with infinite width sends all its mass to the target bin
    containing its lower edge.
    """
    t = np.asarray(target_edges, dtype=float)
    n_t = t.size - 1
    out = np.zeros(n_t)
    for lo, hi, m in zip(src.lo, src.hi, src.masses):
        if m == 0:
            continue
        if not np.isfinite(hi - lo):
            k = int(np.clip(np.searchsorted(t, lo, side="right") - 1, 0, n_t - 1))
            out[k] += m
            continue
        width = hi - lo
        ov = np.clip(np.minimum(hi, t[1:]) - np.maximum(lo, t[:-1]), 0.0, None)
        out += m * ov / width
        below = max(0.0, min(hi, t[0]) - lo) / width
        above = max(0.0, hi - max(lo, t[-1])) / width
        out[0] += m * below
        out[-1] += m * above
    return Histogram.from_counts(t, out)


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in bits between two normalised mass vectors."""
    p = np.asarray(getattr(p, "masses", p), dtype=float)
    q = np.asarray(getattr(q, "masses", q), dtype=float)
    if p.shape != q.shape:
        raise FormatError(f"histograms on different grids: {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log2(a[nz] / m[nz])))

    js = 0.5 * kl(p) + 0.5 * kl(q)
    return min(max(js, 0.0), 1.0)


HISTOGRAM_COLUMNS = ("bin_lo", "bin_hi", "mass")


def read_histogram_csv(path) -> Histogram:
    """Read a ``bin_lo,bin_hi,mass`` file; bins must be contiguous.

    Masses are renormalised; negative or all-zero masses are a FormatError.
    """
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise FormatError(f"{path}: cannot open ({exc.strerror})") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != HISTOGRAM_COLUMNS:
            raise FormatError(f"{path}: header must be {','.join(HISTOGRAM_COLUMNS)}")
        lo, hi, mass = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            try:
                a, b, m = (float(c) for c in row)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: non-numeric cell ({exc})") from exc
            if math.isnan(a) or math.isnan(b) or not math.isfinite(m):
                raise FormatError(f"{path}:{lineno}: non-finite value")
            if m < 0:
                raise FormatError(f"{path}:{lineno}: negative mass {m}")
            if lo and a != hi[-1]:
                raise FormatError(f"{path}:{lineno}: bin_lo {a} does not continue previous bin_hi {hi[-1]}")
            if not b > a:
                raise FormatError(f"{path}:{lineno}: bin_hi must exceed bin_lo")
            lo.append(a)
            hi.append(b)
            mass.append(m)
    if not mass:
        raise FormatError(f"{path}: no bins")
    total = sum(mass)
    if not total > 0:
        raise FormatError(f"{path}: masses sum to zero")
    return Histogram(lo + [hi[-1]], np.asarray(mass) / total)


def write_histogram_csv(hist: Histogram, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTOGRAM_COLUMNS)
        for a, b, m in zip(hist.lo, hist.hi, hist.masses):
            w.writerow([repr(float(a)), repr(float(b)), repr(float(m))])
