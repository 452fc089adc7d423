"""Ingestion, resampling and hourly profiling of timestamped cost data.

Raw per-channel readings (UK-DALE style ``timestamp value`` lines) are turned
into integer-valued, hour-labelled :class:`Trace` objects on a fixed sampling
grid. :func:`hourly_profile` aggregates traces into per-hour statistics and
derives the hourly budgets used as soft constraints.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import AlignmentError, OrderingError, ParseError

FORMAT_VERSION = 1
SECONDS_PER_HOUR = 3600


def hour_of_step(t: int, samples_per_hour: int) -> int:
    """Clock hour in 1..24 of step ``t`` (1-based), with step 1 opening hour 1."""
    if t < 1:
        raise ValueError(f"step index must be >= 1, got {t} (t=0 is the init step)")
    if samples_per_hour < 1:
        raise ValueError("samples_per_hour must be positive")
    return (-(-t // samples_per_hour) - 1) % 24 + 1


def clock_hour(timestamp: int, utc_offset_hours: int = 0) -> int:
    """Hour label in 1..24 of a Unix timestamp; hour 1 is [00:00, 01:00)."""
    return ((timestamp + utc_offset_hours * SECONDS_PER_HOUR) // SECONDS_PER_HOUR) % 24 + 1


@dataclass
class RawSeries:
    channel_id: str
    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=float)
        if self.timestamps.shape != self.values.shape:
            raise ValueError("timestamps and values must have equal length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise OrderingError(f"channel {self.channel_id}: timestamps not strictly increasing")

    def __len__(self):
        return len(self.timestamps)


@dataclass
class Trace:
    """Hour-labelled sequence of K-channel integer cost observations.

    ``observations`` has shape (T, K). ``hour_labels[i]`` is the clock hour
    (1..24) of sample ``i``; labels must advance one hour every
    ``3600 / period_seconds`` samples, consistent with ``start_timestamp``.
    """

    start_timestamp: int
    period_seconds: int
    observations: np.ndarray
    hour_labels: np.ndarray
    channel_caps: tuple

    def __post_init__(self):
        self.start_timestamp = int(self.start_timestamp)
        self.period_seconds = int(self.period_seconds)
        if self.period_seconds <= 0 or SECONDS_PER_HOUR % self.period_seconds:
            raise ValueError(f"period_seconds must divide 3600, got {self.period_seconds}")
        obs = np.asarray(self.observations, dtype=np.int64)
        if obs.ndim == 1:
            obs = obs[:, None]
        self.observations = obs
        self.channel_caps = tuple(int(c) for c in self.channel_caps)
        self.hour_labels = np.asarray(self.hour_labels, dtype=np.int64)
        T, K = obs.shape
        if T < 1:
            raise ValueError("a trace needs at least one observation")
        if K != len(self.channel_caps):
            raise ValueError(f"{K} channels but {len(self.channel_caps)} caps")
        if self.hour_labels.shape != (T,):
            raise ValueError("hour_labels must have one entry per observation")
        if obs.min() < 0 or np.any(obs > np.asarray(self.channel_caps)):
            raise ValueError("observation outside [0, channel_cap]")
        expected = _labels_from(self.hour_labels[0], self.start_timestamp, self.period_seconds, T)
        if not np.array_equal(expected, self.hour_labels):
            raise ValueError("hour_labels inconsistent with start_timestamp and period")

    @property
    def T(self) -> int:
        return self.observations.shape[0]

    @property
    def K(self) -> int:
        return self.observations.shape[1]

    @property
    def samples_per_hour(self) -> int:
        return SECONDS_PER_HOUR // self.period_seconds

    def step_costs(self) -> np.ndarray:
        """Aggregate cost per step, summed over channels."""
        return self.observations.sum(axis=1)

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "start_timestamp": self.start_timestamp,
            "period_seconds": self.period_seconds,
            "channel_caps": list(self.channel_caps),
            "observations": self.observations.tolist(),
            "hour_labels": self.hour_labels.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Trace":
        return cls(
            start_timestamp=doc["start_timestamp"],
            period_seconds=doc["period_seconds"],
            observations=np.asarray(doc["observations"], dtype=np.int64).reshape(
                len(doc["observations"]), len(doc["channel_caps"])
            ),
            hour_labels=doc["hour_labels"],
            channel_caps=doc["channel_caps"],
        )


def _labels_from(first_label, start_timestamp, period_seconds, T):
    n_s = SECONDS_PER_HOUR // period_seconds
    phase = (start_timestamp % SECONDS_PER_HOUR) // period_seconds
    base = (int(first_label) - 1) * n_s + phase + 1
    steps = base + np.arange(T)
    return ((steps - 1) // n_s) % 24 + 1


def make_trace(observations, channel_caps, period_seconds=60, start_timestamp=0,
               utc_offset_hours=0) -> Trace:
    """Build a Trace, computing hour labels from the start timestamp."""
    obs = np.asarray(observations, dtype=np.int64)
    if obs.ndim == 1:
        obs = obs[:, None]
    first = clock_hour(start_timestamp, utc_offset_hours)
    labels = _labels_from(first, start_timestamp, period_seconds, obs.shape[0])
    return Trace(start_timestamp, period_seconds, obs, labels, channel_caps)


def save_traces(path, traces: Sequence[Trace]) -> None:
    with open(path, "w") as fh:
        json.dump({"format_version": FORMAT_VERSION, "traces": [t.to_json() for t in traces]}, fh)


def load_traces(path) -> list[Trace]:
    with open(path) as fh:
        doc = json.load(fh)
    if "traces" in doc:
        return [Trace.from_json(d) for d in doc["traces"]]
    return [Trace.from_json(doc)]


# ---------------------------------------------------------------------------
# ingestion


def ingest_csv(source, schema: Sequence[str]) -> list[RawSeries]:
    """Parse ``timestamp v_1 ... v_C`` lines into one RawSeries per channel.

    ``source`` is a binary stream (or bytes). Fields may be separated by
    whitespace or commas; ``schema`` names the value columns in order, so the
    usual one-file-per-channel layout is ``schema=["kitchen"]``. Blank lines
    and ``#`` comments are skipped.
    """
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    text = io.TextIOWrapper(source, encoding="utf-8") if not isinstance(source, io.TextIOBase) else source
    n_ch = len(schema)
    if n_ch == 0:
        raise ValueError("schema must name at least one channel")
    stamps: list[int] = []
    cols: list[list[float]] = [[] for _ in range(n_ch)]
    try:
        for lineno, line in enumerate(text, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != n_ch + 1:
                raise ParseError(f"expected {n_ch + 1} fields, got {len(parts)}", lineno)
            try:
                ts = int(parts[0])
                vals = [float(p) for p in parts[1:]]
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if any(not math.isfinite(v) or v < 0 for v in vals):
                raise ParseError("values must be finite and non-negative", lineno)
            if stamps and ts <= stamps[-1]:
                raise OrderingError(f"line {lineno}: timestamp {ts} not after {stamps[-1]}")
            stamps.append(ts)
            for c, v in zip(cols, vals):
                c.append(v)
    except UnicodeDecodeError as exc:
        raise ParseError(f"not UTF-8: {exc}") from None
    return [RawSeries(name, stamps, col) for name, col in zip(schema, cols)]


def _quantize(values, cap):
    # clip then round half-up
    clipped = np.clip(values, 0.0, cap)
    return np.floor(clipped + 0.5).astype(np.int64)


def resample_align(series: Sequence[RawSeries], period_seconds: int = 60, gap_limit: int = 30,
                   align_hour: int = 1, channel_caps: Sequence[int] | None = None,
                   utc_offset_hours: int = 0) -> list[Trace]:
    """Resample channels onto a shared grid and cut hour-aligned Traces.

    The grid holds last-observation-carried-forward values. A grid point whose
    carried value is older than ``gap_limit`` periods in any channel is a gap;
    gaps split the data, and every resulting segment is trimmed so that its
    first sample opens clock hour ``align_hour``. Segments with no such
    boundary are dropped.
    """
    if period_seconds <= 0 or SECONDS_PER_HOUR % period_seconds:
        raise ValueError(f"period must divide 3600, got {period_seconds}")
    if not 1 <= align_hour <= 24:
        raise ValueError("align_hour must be in 1..24")
    if not series:
        raise ValueError("no channels given")
    if any(len(s) == 0 for s in series):
        raise AlignmentError("a channel has no samples")
    if channel_caps is None:
        channel_caps = [int(_quantize(s.values, np.inf).max()) for s in series]
    if len(channel_caps) != len(series):
        raise ValueError("one cap per channel required")

    lo = max(int(s.timestamps[0]) for s in series)
    hi = min(int(s.timestamps[-1]) for s in series)
    if lo > hi:
        raise AlignmentError("channels do not overlap in time")

    # grid anchored to hour boundaries so that hour labels are exact
    first = -(-lo // period_seconds) * period_seconds
    grid = np.arange(first, hi + 1, period_seconds, dtype=np.int64)
    if grid.size == 0:
        raise AlignmentError("overlap shorter than one sampling period")

    obs = np.empty((grid.size, len(series)), dtype=np.int64)
    stale = np.zeros(grid.size, dtype=bool)
    for k, s in enumerate(series):
        idx = np.searchsorted(s.timestamps, grid, side="right") - 1
        obs[:, k] = _quantize(s.values[idx], channel_caps[k])
        age = grid - s.timestamps[idx]
        stale |= age > gap_limit * period_seconds

    traces = []
    offset = utc_offset_hours * SECONDS_PER_HOUR
    boundary = ((grid + offset) % SECONDS_PER_HOUR == 0) & (
        clock_hour_array(grid, utc_offset_hours) == align_hour)
    for start, stop in _runs(~stale):
        starts = np.flatnonzero(boundary[start:stop])
        if starts.size == 0:
            continue
        s0 = start + starts[0]
        traces.append(make_trace(obs[s0:stop], channel_caps, period_seconds, int(grid[s0]),
                                 utc_offset_hours))
    if not traces:
        raise AlignmentError(f"no gap-free segment contains the start of hour {align_hour}")
    return traces


def clock_hour_array(timestamps, utc_offset_hours=0):
    return ((timestamps + utc_offset_hours * SECONDS_PER_HOUR) // SECONDS_PER_HOUR) % 24 + 1


def _runs(mask):
    """(start, stop) pairs of maximal True runs."""
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return list(zip(edges[::2], edges[1::2]))


# ---------------------------------------------------------------------------
# hourly profiles


@dataclass
class HourlyProfile:
    """Per-hour statistics of full-hour cost totals.

    Arrays are indexed by ``hour - 1``. Hours without a single complete
    window have ``count == 0``, NaN statistics and a ``None`` budget.
    """

    count: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    channel_mean: np.ndarray
    channel_std: np.ndarray
    budgets: list
    in_budget_fraction: np.ndarray
    window_totals: list = field(repr=False, default_factory=list)

    @property
    def overall_in_budget_fraction(self) -> float:
        n = int(self.count.sum())
        if n == 0:
            return float("nan")
        return float(np.nansum(self.in_budget_fraction * self.count) / n)

    def empirical_satisfaction(self, hour: int, budget: int) -> float:
        totals = self.window_totals[hour - 1]
        if len(totals) == 0:
            return float("nan")
        return float(np.mean(np.asarray(totals) <= budget))

    def to_json(self) -> dict:
        def clean(a):
            return [None if not np.isfinite(v) else float(v) for v in np.ravel(a)]

        return {
            "format_version": FORMAT_VERSION,
            "hours": [
                {
                    "hour": h + 1,
                    "windows": int(self.count[h]),
                    "mean": clean([self.mean[h]])[0],
                    "std": clean([self.std[h]])[0],
                    "channel_mean": clean(self.channel_mean[h]),
                    "channel_std": clean(self.channel_std[h]),
                    "budget": self.budgets[h],
                    "in_budget_fraction": clean([self.in_budget_fraction[h]])[0],
                }
                for h in range(24)
            ],
            "overall_in_budget_fraction": self.overall_in_budget_fraction,
        }


def hour_windows(trace: Trace) -> Iterable[tuple[int, int, int]]:
    """Yield (hour, start, stop) for each complete clock-hour window."""
    n_s = trace.samples_per_hour
    phase = (trace.start_timestamp % SECONDS_PER_HOUR) // trace.period_seconds
    start = 0 if phase == 0 else n_s - phase
    while start + n_s <= trace.T:
        yield int(trace.hour_labels[start]), start, start + n_s
        start += n_s


def hourly_profile(traces: Sequence[Trace], budget_override: dict | None = None) -> HourlyProfile:
    if not traces:
        raise ValueError("no traces")
    K = traces[0].K
    totals = [[] for _ in range(24)]
    channel_totals = [[] for _ in range(24)]
    for tr in traces:
        if tr.K != K:
            raise ValueError("traces disagree on channel count")
        per_channel = tr.observations
        for hour, a, b in hour_windows(tr):
            ch = per_channel[a:b].sum(axis=0)
            totals[hour - 1].append(int(ch.sum()))
            channel_totals[hour - 1].append(ch)
    if not any(totals):
        raise ValueError("profiles need at least one full hour of data")

    count = np.array([len(x) for x in totals])
    mean = np.full(24, np.nan)
    std = np.full(24, np.nan)
    cmean = np.full((24, K), np.nan)
    cstd = np.full((24, K), np.nan)
    frac = np.full(24, np.nan)
    budgets: list = [None] * 24
    overrides = budget_override or {}
    for h in range(24):
        if not count[h]:
            continue
        # sorted so that float sums do not depend on trace order
        v = np.sort(np.asarray(totals[h], dtype=float))
        mean[h] = v.mean()
        std[h] = v.std()
        c = np.sort(np.asarray(channel_totals[h], dtype=float), axis=0)
        cmean[h] = c.mean(axis=0)
        cstd[h] = c.std(axis=0)
        budget = overrides.get(h + 1, int(math.floor(mean[h] + std[h] + 0.5)))
        budgets[h] = int(budget)
        frac[h] = float(np.mean(v <= budget))
    return HourlyProfile(count, mean, std, cmean, cstd, budgets, frac,
                         [sorted(t) for t in totals])
