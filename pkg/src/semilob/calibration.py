"""Estimating a two-sided kernel from order-book messages.

Pipeline: :func:`parse_messages` (LOBSTER ``message`` files) or
:func:`read_event_log` (the simulator's own log) -> :func:`classify_events`
-> :func:`estimate_transitions` and :func:`group_interarrivals` ->
:func:`fit_weibull` / :func:`fit_gamma` / :func:`fit_exponential` per bucket,
assembled by :func:`calibrate` into a :class:`CalibrationReport`.

Classification rules
--------------------
* Only messages at the current best quote of their side count; deeper
  levels are ignored.
* Submissions (code 1) are +1; partial cancellations, deletions and visible
  executions (codes 2, 3, 4) are -1; hidden executions (5) are ignored unless
  ``include_hidden``; cross trades and halts (6, 7) are always ignored.
* A change of either best price ends a period. The first event of each side
  in a period has no observed predecessor (the model redraws the type at a
  reset), so it enters neither the transition counts nor the duration
  samples; its type feeds the ``v0`` estimate.

Timestamps are kept as :class:`decimal.Decimal` from parsing to differencing,
so waiting times far below a float ulp of the clock survive intact.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from decimal import Context, Decimal, InvalidOperation

import numpy as np
from scipy import special, stats

from .kernel import Exponential, Gamma, KernelSide, Weibull

_CTX = Context(prec=120)
_MS = Decimal(1000)
_Z95 = float(stats.norm.ppf(0.975))

SUBMISSION, PARTIAL_CANCEL, DELETION, EXECUTION, HIDDEN_EXECUTION = 1, 2, 3, 4, 5
KNOWN_CODES = {1, 2, 3, 4, 5, 6, 7}
BUCKETS = ((1, 1), (1, -1), (-1, 1), (-1, -1))


class CalibrationError(ValueError):
    """Input that cannot be calibrated (empty file, degenerate sample, ...)."""


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class MessageRecord:
    """One LOBSTER message. ``time`` is seconds after midnight."""

    time: Decimal
    code: int
    order_id: int
    size: int
    price: int          # price x 1e4
    direction: int      # 1 buy (bid side), -1 sell (ask side)

    def to_row(self):
        return [f"{self.time:f}", str(self.code), str(self.order_id), str(self.size),
                str(self.price), str(self.direction)]


@dataclass
class ParseResult:
    records: list
    errors: list = field(default_factory=list)     # (line number, message)
    warnings: list = field(default_factory=list)
    quotes: np.ndarray | None = None               # rows (ask, ask size, bid, bid size)

    def __len__(self):
        return len(self.records)


def _parse_row(row):
    if len(row) != 6:
        raise ValueError(f"expected 6 columns, got {len(row)}")
    try:
        t = Decimal(row[0].strip())
    except InvalidOperation:
        raise ValueError(f"bad timestamp {row[0]!r}") from None
    if not t.is_finite() or t < 0:
        raise ValueError(f"bad timestamp {row[0]!r}")
    code, oid, size, price, direction = (int(x) for x in row[1:])
    if code not in KNOWN_CODES:
        raise ValueError(f"unknown message type {code}")
    if direction not in (1, -1):
        raise ValueError(f"direction must be 1 or -1, got {direction}")
    return MessageRecord(t, code, oid, size, price, direction)


def parse_messages(path, orderbook=None, sort=False) -> ParseResult:
    """Stream-parse a LOBSTER message file.

    Malformed rows are reported with their 1-based line number and skipped;
    the rest of the file is still parsed. Out-of-order timestamps produce a
    warning; ``sort=True`` applies a stable sort by time (the order book rows,
    if any, are permuted along). Raises :class:`CalibrationError` if the file
    is missing, empty or contains no valid row.
    """
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise CalibrationError(f"cannot read {path}: {exc}") from exc
    records, errors, data_rows = [], [], []
    data = 0
    with fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#"):
                continue
            try:
                records.append(_parse_row(row))
                data_rows.append(data)
            except ValueError as exc:
                errors.append((lineno, str(exc)))
            data += 1
    if not records:
        raise CalibrationError(f"{path}: no valid message rows" +
                               (f" ({len(errors)} malformed)" if errors else ""))
    quotes = None
    if orderbook is not None:
        quotes = _read_orderbook(orderbook, data_rows)
    warn = []
    times = [r.time for r in records]
    bad = sum(1 for a, b in zip(times, times[1:]) if b < a)
    if bad:
        warn.append(f"{bad} out-of-order timestamps" + ("; stable-sorted" if sort else ""))
        warnings.warn(warn[-1])
        if sort:
            order = sorted(range(len(records)), key=lambda k: times[k])
            records = [records[k] for k in order]
            if quotes is not None:
                quotes = quotes[order]
    return ParseResult(records, errors, warn, quotes)


def _read_orderbook(path, rows):
    """Level-1 quotes ``(ask, ask size, bid, bid size)`` for the given data-row indices.

    LOBSTER order-book files have one row per message row, so rows align by
    their position among non-comment lines.
    """
    try:
        raw = np.loadtxt(path, delimiter=",", comments="#", ndmin=2, usecols=(0, 1, 2, 3),
                         dtype=np.int64)
    except (OSError, ValueError) as exc:
        raise CalibrationError(f"cannot read order book {path}: {exc}") from exc
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size and rows.max() >= raw.shape[0]:
        raise CalibrationError("order book has fewer rows than the message file")
    return raw[rows]


def write_messages(records, path, meta=None):
    with open(path, "w", newline="") as fh:
        for k, v in (meta or {}).items():
            fh.write(f"# {k}={v}\n")
        w = csv.writer(fh, lineterminator="\n")
        for r in records:
            w.writerow(r.to_row())


# ---------------------------------------------------------------------------
# event streams
# ---------------------------------------------------------------------------

@dataclass
class SideStream:
    """Classified events of one side.

    ``types[k]`` is the event type, ``prev[k]`` the type of the same side's
    previous event in the same period (0 if none) and ``dt[k]`` the waiting
    time in ms since that event (nan if none). ``cens_prev`` / ``cens_dt``
    describe waiting times cut short by the end of a period (or of the data):
    the type of the side's last event and the time from it to the period end.
    """

    types: np.ndarray
    prev: np.ndarray
    dt: np.ndarray
    cens_prev: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int8))
    cens_dt: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def build(cls, times, types, periods, ends=None):
        """From event times (Decimal seconds), types and period labels.

        ``ends[p]`` is the time period ``p`` ended (a reset or the end of the
        data); without it no censored waiting times are recorded.
        """
        types = np.asarray(types, dtype=np.int8)
        n = types.size
        prev = np.zeros(n, np.int8)
        dt = np.full(n, np.nan)
        for k in range(1, n):
            if periods[k] == periods[k - 1]:
                prev[k] = types[k - 1]
                dt[k] = _ms(times[k], times[k - 1])
        cp, cd = [], []
        if ends is not None:
            for k in range(n):
                if k == n - 1 or periods[k + 1] != periods[k]:
                    c = _ms(ends[periods[k]], times[k])
                    if c > 0:
                        cp.append(types[k])
                        cd.append(c)
        return cls(types, prev, dt, np.asarray(cp, np.int8), np.asarray(cd, float))

    def __len__(self):
        return self.types.size

    def equals(self, other):
        return (np.array_equal(self.types, other.types) and np.array_equal(self.prev, other.prev)
                and np.array_equal(self.dt, other.dt, equal_nan=True)
                and np.array_equal(self.cens_prev, other.cens_prev)
                and np.array_equal(self.cens_dt, other.cens_dt))


def _ms(t1, t0):
    return float(_CTX.multiply(_CTX.subtract(t1, t0), _MS))


@dataclass
class EventStream:
    bid: SideStream
    ask: SideStream
    periods: int
    excluded: dict = field(default_factory=dict)

    def side(self, name):
        return self.bid if name in ("bid", "B", 1) else self.ask

    def equals(self, other):
        return self.bid.equals(other.bid) and self.ask.equals(other.ask)


def stream_from_types(types, dt=None):
    """Single-period side stream from a plain sequence (first element has no predecessor).

    ``dt[k]`` is the waiting time before event ``k`` (``dt[0]`` is ignored).
    """
    types = np.asarray(types, dtype=np.int8)
    prev = np.zeros(types.size, np.int8)
    prev[1:] = types[:-1]
    d = np.full(types.size, np.nan)
    if dt is not None:
        d[1:] = np.asarray(dt, dtype=float)[1:]
    return SideStream(types, prev, d)


class _Collector:
    def __init__(self):
        self.times = {1: [], -1: []}
        self.types = {1: [], -1: []}
        self.pers = {1: [], -1: []}
        self.ends = []
        self.period = 0

    def add(self, side, t, j):
        self.times[side].append(t)
        self.types[side].append(j)
        self.pers[side].append(self.period)

    def reset(self, t):
        self.ends.append(t)
        self.period += 1

    def stream(self, end, excluded=None):
        ends = self.ends + [end]
        return EventStream(
            SideStream.build(self.times[1], self.types[1], self.pers[1], ends),
            SideStream.build(self.times[-1], self.types[-1], self.pers[-1], ends),
            self.period + 1, excluded or {})


def classify_events(parsed, include_hidden=False) -> EventStream:
    """Turn parsed messages into per-side ±1 event streams.

    With an order book the best quotes before message ``k`` are book row
    ``k-1`` (row 0 for the first message), and a message after which either
    best price differs ends the period. Without one, the best quote of a side
    is the price of its most recent counted event; a counted message at a
    different price starts a new period (which ended at the previous counted
    event) and moves the other side's quote by the same amount. The fallback
    is exact when every message sits at the best quotes, as in the synthetic
    fixtures without deep-level noise, and an approximation otherwise.
    """
    records = parsed.records
    quotes = parsed.quotes
    col = _Collector()
    excluded = {"away_from_best": 0, "hidden": 0, "other": 0}
    if quotes is not None:
        for k, r in enumerate(records):
            before = quotes[k - 1] if k > 0 else quotes[0]
            j = _event_type(r, include_hidden, excluded)
            if j is not None:
                best = before[2] if r.direction == 1 else before[0]
                if r.price == best:
                    col.add(r.direction, r.time, j)
                else:
                    excluded["away_from_best"] += 1
            if quotes[k][0] != before[0] or quotes[k][2] != before[2]:
                col.reset(r.time)
    else:
        last = {1: None, -1: None}
        last_time = None
        for r in records:
            j = _event_type(r, include_hidden, excluded)
            if j is None:
                continue
            s = r.direction
            if last[s] is None:
                last[s] = r.price
            elif r.price != last[s]:
                shift = r.price - last[s]
                col.reset(last_time)
                last[s] = r.price
                if last[-s] is not None:
                    last[-s] += shift
            col.add(s, r.time, j)
            last_time = r.time
    return col.stream(records[-1].time, excluded)


def _event_type(r, include_hidden, excluded):
    if r.code == SUBMISSION:
        return 1
    if r.code in (PARTIAL_CANCEL, DELETION, EXECUTION):
        return -1
    if r.code == HIDDEN_EXECUTION:
        if include_hidden:
            return -1
        excluded["hidden"] += 1
        return None
    excluded["other"] += 1
    return None


def read_event_log(path) -> EventStream:
    """Event stream from a simulator event-log CSV (``time_ms, side, event, ...``)."""
    col = _Collector()
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise CalibrationError(f"cannot read {path}: {exc}") from exc
    t = None
    with fh:
        rows = (r for r in csv.reader(fh) if r and not r[0].startswith("#"))
        header = next(rows, None)
        if header is None or header[:3] != ["time_ms", "side", "event"]:
            raise CalibrationError(f"{path}: not a simulator event log")
        for r in rows:
            t = _CTX.divide(Decimal(r[0]), _MS)
            col.add(1 if r[1] == "B" else -1, t, int(r[2]))
            if int(r[5]) != 0:
                col.reset(t)
    if t is None:
        raise CalibrationError(f"{path}: empty event log")
    return col.stream(t)


def write_lobster(log, message_path, orderbook_path, start_price=1_000_000, tick=100, lot=100,
                  exec_fraction=0.5, hidden_rate=0.0, deep_rate=0.0, seed=0, meta=None):
    """Write a simulator :class:`~semilob.simulator.EventLog` as LOBSTER files.

    +1 events become submissions of ``lot`` shares at the best quote; -1
    events become executions (probability ``exec_fraction``) or deletions.
    ``hidden_rate`` / ``deep_rate`` inject that many hidden executions and
    deeper-level submissions per event (Bernoulli), which classification must
    ignore. Prices are integers (dollars x 1e4); times are seconds after
    34200 (09:30) with the log's exact decimal precision.
    """
    rng = np.random.default_rng(seed)
    times = log.exact_times(origin=Decimal(34200), scale=Decimal("0.001"))
    bid = start_price
    # queue sizes before the first event
    qb = int(log.q_b[0]) - (int(log.event[0]) if log.side[0] == 0 else 0)
    qa = int(log.q_a[0]) - (int(log.event[0]) if log.side[0] == 1 else 0)
    if len(log) and log.price_change[0] != 0:
        raise ValueError("log starts with a depletion; cannot recover the initial book")
    next_id = 1
    hidden = rng.random(len(log)) < hidden_rate
    deep = rng.random(len(log)) < deep_rate
    execs = rng.random(len(log)) < exec_fraction
    with open(message_path, "w", newline="") as mf, open(orderbook_path, "w", newline="") as bf:
        for k, v in (meta or {}).items():
            mf.write(f"# {k}={v}\n")
            bf.write(f"# {k}={v}\n")
        for k in range(len(log)):
            t = f"{times[k]:f}"
            ask = bid + tick
            if deep[k]:
                mf.write(f"{t},1,{next_id},{lot},{bid - 5 * tick},1\n")
                next_id += 1
                bf.write(f"{ask},{qa * lot},{bid},{qb * lot}\n")
            if hidden[k]:
                mf.write(f"{t},5,0,{lot},{ask},-1\n")
                bf.write(f"{ask},{qa * lot},{bid},{qb * lot}\n")
            direction = 1 if log.side[k] == 0 else -1
            price = bid if direction == 1 else ask
            if log.event[k] == 1:
                code, oid = SUBMISSION, next_id
                next_id += 1
            else:
                code, oid = (EXECUTION if execs[k] else DELETION), 0
            mf.write(f"{t},{code},{oid},{lot},{price},{direction}\n")
            if log.price_change[k] != 0:
                bid += int(log.price_change[k]) * tick
            qb, qa = int(log.q_b[k]), int(log.q_a[k])
            bf.write(f"{bid + tick},{qa * lot},{bid},{qb * lot}\n")


# ---------------------------------------------------------------------------
# transitions
# ---------------------------------------------------------------------------

@dataclass
class TransitionEstimate:
    """Row-normalised transition frequencies with binomial standard errors."""

    counts: dict
    P: dict                  # (i, j) -> estimate, nan for unestimable rows
    se: dict
    unestimable: list        # rows i with no visits
    unconditional: dict      # j -> frequency among all events
    n: int
    P_raw: dict = field(default_factory=dict)       # plain row frequencies
    corrected: dict = field(default_factory=dict)   # row i -> family of the censored fit

    def matrix(self):
        return np.array([[self.P[(1, 1)], self.P[(1, -1)]], [self.P[(-1, 1)], self.P[(-1, -1)]]])

    def to_dict(self):
        return {
            "P": {f"{i},{j}": v for (i, j), v in self.P.items()},
            "se": {f"{i},{j}": v for (i, j), v in self.se.items()},
            "counts": {f"{i},{j}": v for (i, j), v in self.counts.items()},
            "unestimable_rows": self.unestimable,
            "unconditional": {str(j): v for j, v in self.unconditional.items()},
            "n_transitions": self.n,
            "P_raw": {f"{i},{j}": v for (i, j), v in self.P_raw.items()},
            "censoring_corrected_rows": {str(i): f for i, f in self.corrected.items()},
        }


def estimate_transitions(stream: SideStream) -> TransitionEstimate:
    """Transition frequencies; rows never visited are flagged, not defaulted."""
    has = stream.prev != 0
    counts = {(i, j): int(np.sum(has & (stream.prev == i) & (stream.types == j)))
              for i, j in BUCKETS}
    P, se, bad = {}, {}, []
    for i in (1, -1):
        row = counts[(i, 1)] + counts[(i, -1)]
        if row == 0:
            bad.append(i)
            P[(i, 1)] = P[(i, -1)] = math.nan
            se[(i, 1)] = se[(i, -1)] = math.nan
            continue
        p = counts[(i, 1)] / row
        P[(i, 1)], P[(i, -1)] = p, (row - counts[(i, 1)]) / row
        se[(i, 1)] = se[(i, -1)] = math.sqrt(p * (1 - p) / row)
    n = max(len(stream), 1)
    uncond = {1: float(np.sum(stream.types == 1)) / n, -1: float(np.sum(stream.types == -1)) / n}
    return TransitionEstimate(counts, P, se, bad, uncond, int(has.sum()), dict(P))


def group_interarrivals(stream: SideStream):
    """Waiting times per ``(previous, current)`` bucket (zeros kept)."""
    has = stream.prev != 0
    return {(i, j): stream.dt[has & (stream.prev == i) & (stream.types == j)]
            for i, j in BUCKETS}


def estimate_v0(stream: SideStream, transitions: TransitionEstimate | None = None):
    """Type of the first event after each reset.

    Returns ``(frequency, n, inverted)``: the raw frequency of +1 among first
    events and, if transitions are given, the reset-type probability implied
    by ``freq = v0 P(1,1) + (1 - v0) P(-1,1)`` (nan when the rows coincide).
    """
    first = stream.types[stream.prev == 0]
    if first.size == 0:
        return math.nan, 0, math.nan
    freq = float(np.mean(first == 1))
    inv = math.nan
    if transitions is not None:
        a, b = transitions.P[(1, 1)], transitions.P[(-1, 1)]
        if abs(a - b) > 1e-9 and not (math.isnan(a) or math.isnan(b)):
            inv = (freq - b) / (a - b)
    return freq, int(first.size), inv


# ---------------------------------------------------------------------------
# maximum likelihood
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    family: str
    k: float
    theta: float
    loglik: float
    k_ci: tuple
    theta_ci: tuple
    n: int
    converged: bool = True
    iterations: int = 0
    message: str = ""
    k_se: float = math.nan
    theta_se: float = math.nan

    def covers(self, k=None, theta=None):
        ok = True
        if k is not None:
            ok &= self.k_ci[0] <= k <= self.k_ci[1]
        if theta is not None:
            ok &= self.theta_ci[0] <= theta <= self.theta_ci[1]
        return bool(ok)

    def distribution(self):
        if self.family == "weibull":
            return Weibull(self.k, self.theta)
        if self.family == "gamma":
            return Gamma(self.k, self.theta)
        return Exponential(self.theta)

    def to_dict(self):
        d = asdict(self)
        d["k_ci"] = list(self.k_ci)
        d["theta_ci"] = list(self.theta_ci)
        return d


def _prepare(sample, min_size=10):
    x = np.asarray(sample, dtype=float)
    if x.size < min_size:
        raise CalibrationError(f"sample too small ({x.size} < {min_size})")
    if np.any(~np.isfinite(x)) or np.any(x <= 0):
        raise CalibrationError("sample values must be finite and > 0 (drop zero waiting times)")
    return x


def _ci(est, se):
    return (est - _Z95 * se, est + _Z95 * se)


def fit_exponential(sample) -> FitResult:
    """Exponential MLE: the sample mean (defined for any nonempty positive sample)."""
    x = _prepare(sample, min_size=1)
    n = x.size
    th = float(x.mean())
    ll = float(-n * math.log(th) - n)
    se = th / math.sqrt(n)
    return FitResult("exponential", 1.0, th, ll, (1.0, 1.0), _ci(th, se), n, k_se=0.0,
                     theta_se=se)


def fit_weibull(sample, max_iter=200, tol=1e-12) -> FitResult:
    """Weibull MLE: Newton on the profile score in ``k`` with a bisection bracket.

    The profile score is ``1/k + mean(log x) - sum(x^k log x)/sum(x^k)``,
    decreasing in ``k``; ``theta = mean(x^k)^(1/k)``. Powers are evaluated as
    ``exp(k (log x - max log x))`` so that very small and very large waiting
    times do not overflow.
    """
    x = _prepare(sample)
    n = x.size
    lx = np.log(x)
    if np.ptp(lx) == 0:
        raise CalibrationError("degenerate sample (all values equal)")
    lmax = lx.max()
    c = lx - lmax
    mean_lx = lx.mean()

    def score(k):
        w = np.exp(k * c)
        s0, s1, s2 = w.sum(), (w * c).sum(), (w * c * c).sum()
        m1 = s1 / s0
        g = 1.0 / k + (mean_lx - lmax) - m1
        dg = -1.0 / k**2 - (s2 / s0 - m1 * m1)
        return g, dg

    lo, hi = 1e-3, 1.0
    while score(hi)[0] > 0:
        lo, hi = hi, hi * 2
        if hi > 1e4:
            raise CalibrationError("Weibull shape diverges (near-degenerate sample)")
    k = min(max(1.2 / max(np.std(lx), 1e-12), lo), hi) if np.std(lx) > 0 else 1.0
    converged, it = False, 0
    for it in range(1, max_iter + 1):
        g, dg = score(k)
        if g > 0:
            lo = k
        else:
            hi = k
        step = k - g / dg
        k_new = step if lo < step < hi else 0.5 * (lo + hi)
        if abs(k_new - k) <= tol * k:
            k = k_new
            converged = True
            break
        k = k_new
    w = np.exp(k * c)
    mean_w = w.mean()
    log_th = lmax + math.log(mean_w) / k
    th = math.exp(log_th)
    z = np.exp(k * (lx - log_th))  # (x/theta)^k
    ll = float(n * math.log(k) - n * k * log_th + (k - 1) * lx.sum() - z.sum())
    # observed information in (k, theta)
    L = lx - log_th
    Hkk = -n / k**2 - np.sum(z * L * L)
    Hkt = -n / th + np.sum(z * (1.0 + k * L)) / th
    Htt = n * k / th**2 - k * (k + 1) * np.sum(z) / th**2
    cov = np.linalg.inv(-np.array([[Hkk, Hkt], [Hkt, Htt]]))
    k_se, t_se = math.sqrt(cov[0, 0]), math.sqrt(cov[1, 1])
    return FitResult("weibull", float(k), th, ll, _ci(k, k_se), _ci(th, t_se), n, converged,
                     it, "" if converged else "profile Newton did not converge", k_se, t_se)


def fit_gamma(sample, max_iter=200, tol=1e-12) -> FitResult:
    """Gamma MLE: Newton on ``log k - digamma(k) = log mean(x) - mean(log x)``."""
    x = _prepare(sample)
    n = x.size
    lx = np.log(x)
    if np.ptp(lx) == 0:
        raise CalibrationError("degenerate sample (all values equal; gamma shape -> infinity)")
    mean = x.mean()
    s = math.log(mean) - lx.mean()
    if s <= 0:
        raise CalibrationError("degenerate sample")
    k = (3 - s + math.sqrt((s - 3) ** 2 + 24 * s)) / (12 * s)
    lo, hi = 0.0, math.inf
    converged, it = False, 0
    for it in range(1, max_iter + 1):
        g = math.log(k) - special.digamma(k) - s      # decreasing in k
        if g > 0:
            lo = k
        else:
            hi = k
        dg = 1.0 / k - special.polygamma(1, k)
        k_new = k - g / dg
        if not lo < k_new < hi:
            k_new = 0.5 * (lo + hi) if math.isfinite(hi) else 2 * k
        if abs(k_new - k) <= tol * k:
            k = k_new
            converged = True
            break
        k = k_new
    th = mean / k
    ll = float((k - 1) * lx.sum() - x.sum() / th - n * k * math.log(th) - n * special.gammaln(k))
    Hkk = -n * special.polygamma(1, k)
    Hkt = -n / th
    Htt = n * k / th**2 - 2 * x.sum() / th**3
    cov = np.linalg.inv(-np.array([[Hkk, Hkt], [Hkt, Htt]]))
    k_se, t_se = math.sqrt(cov[0, 0]), math.sqrt(cov[1, 1])
    return FitResult("gamma", float(k), float(th), ll, _ci(k, k_se), _ci(th, t_se), n, converged,
                     it, "" if converged else "digamma Newton did not converge", k_se, t_se)


FITTERS = {"weibull": fit_weibull, "gamma": fit_gamma, "exponential": fit_exponential}


def _gamma_logsf(y, k):
    """``log Q(k, y)`` (regularised upper incomplete gamma), finite far into the tail."""
    y = np.asarray(y, dtype=float)
    q = special.gammaincc(k, y)
    out = np.empty_like(y)
    ok = q > 1e-280
    out[ok] = np.log(q[ok])
    if not np.all(ok):
        t = y[~ok]
        # Gamma(k, t) ~ t^(k-1) e^-t (1 + (k-1)/t + (k-1)(k-2)/t^2 + ...), t >> k
        term = np.ones_like(t)
        series = np.ones_like(t)
        for m in range(1, 12):
            term = term * (k - m) / t
            series = series + term
        out[~ok] = (k - 1) * np.log(t) - t - special.gammaln(k) + np.log(series)
    return out


def _log_density(family, x, k, th, grad=False):
    """``(log pdf, log survival)`` of the family at ``x``.

    With ``grad`` also their derivatives with respect to ``(log k, log theta)``
    as two arrays of shape ``(2, len(x))``.
    """
    if family == "weibull":
        lz = np.log(x) - math.log(th)
        z = np.exp(k * lz)
        lf, ls = math.log(k / th) + (k - 1) * lz - z, -z
        if not grad:
            return lf, ls
        klz = k * lz
        return lf, ls, np.array([1 + klz * (1 - z), k * (z - 1)]), np.array([-z * klz, k * z])
    if family == "gamma":
        lx = np.log(x)
        lf = (k - 1) * lx - x / th - k * math.log(th) - special.gammaln(k)
        ls = _gamma_logsf(x / th, k)
        if not grad:
            return lf, ls
        dk = k * (lx - math.log(th) - special.digamma(k))
        dt = x / th - k
        h = 1e-6 * k
        dsk = k * (_gamma_logsf(x / th, k + h) - _gamma_logsf(x / th, k - h)) / (2 * h)
        dst = np.exp(lf - ls) * x
        return lf, ls, np.array([dk, dt]), np.array([dsk, dst])
    lf, ls = -math.log(th) - x / th, -x / th
    if not grad:
        return lf, ls
    z = np.zeros_like(x)
    return lf, ls, np.array([z, x / th - 1]), np.array([z, x / th])


def fit_row_censored(family, x_up, x_down, censored, p_up, start=None, max_iter=200,
                     counts=None, estimate_p=True):
    """Joint MLE of one kernel row with right-censored waits.

    ``x_up`` / ``x_down`` are complete waiting times before a +1 / -1 event,
    ``censored`` waits cut short by a reset, whose next type is unknown: each
    contributes ``log(p S_up(c) + (1 - p) S_down(c))``. The censoring is
    non-informative because the reset is triggered by the other side, but it
    removes the slower transition more often, so the raw row frequency is
    biased whenever the two laws differ. With ``estimate_p`` the row
    probability ``p = P(i, 1)`` is therefore a free parameter (logit scale)
    whose complete-data term is ``n_up log p + n_down log(1 - p)``; ``counts``
    gives ``(n_up, n_down)`` (all complete transitions, zero waits included)
    and defaults to the sample sizes. ``p_up`` is the starting value (and the
    fixed value when ``estimate_p`` is False or a count is 0).

    Parameters are optimised (BFGS) in log space from the uncensored fits;
    CIs come from the observed information (finite-difference Hessian), as
    for the single-bucket fits. Returns ``(fit_up, fit_down, p, p_se)``.
    """
    from scipy import optimize

    x_up, x_down = _prepare(x_up), _prepare(x_down)
    c = np.asarray(censored, dtype=float)
    c = c[c > 0]
    n_up, n_down = (x_up.size, x_down.size) if counts is None else counts
    free_k = family != "exponential"
    free_p = bool(estimate_p and c.size and n_up > 0 and n_down > 0 and 0 < p_up < 1)
    if start is None:
        start = (FITTERS[family](x_up), FITTERS[family](x_down))
    u0 = []
    for f in start:
        u0 += ([math.log(f.k)] if free_k else []) + [math.log(f.theta)]
    if free_p:
        u0.append(math.log(p_up / (1.0 - p_up)))
    u0 = np.asarray(u0)
    npar = 4 if free_k else 2

    def unpack(u):
        if free_k:
            laws = math.exp(u[0]), math.exp(u[1]), math.exp(u[2]), math.exp(u[3])
        else:
            laws = 1.0, math.exp(u[0]), 1.0, math.exp(u[1])
        p = 1.0 / (1.0 + math.exp(-u[npar])) if free_p else p_up
        return laws, p

    def value_grad(u):
        (k1, t1, k2, t2), p = unpack(u)
        lp = math.log(p)
        lq = math.log1p(-p) if p < 1 else -math.inf
        f1, _, g1, _ = _log_density(family, x_up, k1, t1, grad=True)
        f2, _, g2, _ = _log_density(family, x_down, k2, t2, grad=True)
        total = f1.sum() + f2.sum()
        grad = np.concatenate([g1.sum(axis=1), g2.sum(axis=1)])
        gp = 0.0
        if free_p:
            total += n_up * lp + n_down * lq
            gp = n_up * (1.0 - p) - n_down * p
        if c.size:
            _, s1, _, d1 = _log_density(family, c, k1, t1, grad=True)
            _, s2, _, d2 = _log_density(family, c, k2, t2, grad=True)
            mix = np.logaddexp(lp + s1, lq + s2)
            w1 = np.exp(lp + s1 - mix)
            total += mix.sum()
            grad += np.concatenate([(w1 * d1).sum(axis=1), ((1 - w1) * d2).sum(axis=1)])
            gp += float(np.sum(w1 - p))
        if not free_k:
            grad = grad[[1, 3]]
        if free_p:
            grad = np.append(grad, gp)
        return -float(total), -grad

    def nll(u):
        return value_grad(u)[0]

    scale = abs(nll(u0)) + 1.0

    def scaled(u):
        v, g = value_grad(u)
        return v / scale, g / scale

    res = optimize.minimize(scaled, u0, jac=True, method="BFGS",
                            options={"gtol": 1e-10, "maxiter": max_iter})
    u = res.x
    # BFGS reports precision loss once the gradient is at roundoff level
    g_final = value_grad(u)[1]
    converged = bool(res.success) or float(np.max(np.abs(g_final))) < 1e-4 * math.sqrt(scale)
    H = _hessian(lambda v: value_grad(v)[1], u)
    try:
        cov_u = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        cov_u = np.full(H.shape, np.nan)
    (k1, t1, k2, t2), p = unpack(u)
    ll = -nll(u)
    out = []
    for b, (k, th, n) in enumerate(((k1, t1, x_up.size), (k2, t2, x_down.size))):
        if free_k:
            ik, it = 2 * b, 2 * b + 1
            k_se = k * math.sqrt(max(cov_u[ik, ik], 0.0))
            t_se = th * math.sqrt(max(cov_u[it, it], 0.0))
        else:
            it = b
            k_se, t_se = 0.0, th * math.sqrt(max(cov_u[it, it], 0.0))
        out.append(FitResult(
            family, float(k), float(th), ll, _ci(k, k_se) if free_k else (1.0, 1.0),
            _ci(th, t_se), int(n), converged, int(res.nit),
            f"joint row fit with {c.size} censored waits" + ("" if converged
                                                              else f"; {res.message}"),
            k_se, t_se))
    p_se = p * (1 - p) * math.sqrt(max(cov_u[npar, npar], 0.0)) if free_p else math.nan
    return out[0], out[1], float(p), float(p_se)


def _hessian(grad, u, rel=1e-4):
    """Symmetrised central-difference Jacobian of an analytic gradient."""
    n = u.size
    H = np.empty((n, n))
    h = rel * np.maximum(1.0, np.abs(u))
    for a in range(n):
        e = np.zeros(n)
        e[a] = h[a]
        H[:, a] = (grad(u + e) - grad(u - e)) / (2 * h[a])
    return 0.5 * (H + H.T)


# ---------------------------------------------------------------------------
# empirical cdf
# ---------------------------------------------------------------------------

class EmpiricalCDF:
    """Right-continuous step cdf of a sample."""

    def __init__(self, sample):
        self.x = np.sort(np.asarray(sample, dtype=float))
        if self.x.size == 0:
            raise ValueError("empty sample")

    def __call__(self, t):
        return np.searchsorted(self.x, np.asarray(t, dtype=float), side="right") / self.x.size

    def ks_distance(self, cdf):
        """Two-sided sup distance to a continuous ``cdf``."""
        F = cdf(self.x)
        n = self.x.size
        return float(max(np.max(np.arange(1, n + 1) / n - F), np.max(F - np.arange(n) / n)))

    def export(self, path, fits=(), points=None, meta=None):
        """CSV of ``t, F_hat(t)`` plus the fitted cdfs at the same abscissae."""
        t = self.x if points is None else np.asarray(points, dtype=float)
        cols = {"t": t, "empirical": self(t)}
        for f in fits:
            cols[f.family] = f.distribution().cdf(t)
        with open(path, "w", newline="") as fh:
            for k, v in (meta or {}).items():
                fh.write(f"# {k}={v}\n")
            fh.write(",".join(cols) + "\n")
            for row in zip(*cols.values()):
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class SideCalibration:
    transitions: TransitionEstimate
    fits: dict               # (i, j) -> {family: FitResult or error string}
    zero_dt: dict            # (i, j) -> count of zero waiting times
    samples: dict            # (i, j) -> positive waiting times
    v0_frequency: float
    v0_inverted: float
    n_resets: int
    censored: dict = field(default_factory=dict)   # row i -> censored waits used

    def kernel(self, family="weibull"):
        """Point-estimate kernel (raises if a row or bucket could not be estimated)."""
        if self.transitions.unestimable:
            raise CalibrationError("unestimable transition rows")
        H = {}
        for b in BUCKETS:
            f = self.fits[b].get(family)
            if not isinstance(f, FitResult):
                raise CalibrationError(f"bucket {b}: no {family} fit")
            H[b] = f.distribution()
        v0 = self.v0_inverted if 0 <= self.v0_inverted <= 1 else self.v0_frequency
        return KernelSide(dict(self.transitions.P), H, 0.5 if math.isnan(v0) else v0)


@dataclass
class CalibrationReport:
    bid: SideCalibration
    ask: SideCalibration
    periods: int
    excluded: dict
    parse_errors: list = field(default_factory=list)
    parse_warnings: list = field(default_factory=list)

    @property
    def unestimable(self):
        out = []
        for name, s in (("bid", self.bid), ("ask", self.ask)):
            out += [f"{name} row {i}" for i in s.transitions.unestimable]
            out += [f"{name} bucket {b}" for b in BUCKETS
                    if not any(isinstance(f, FitResult) for f in s.fits[b].values())]
        return out

    def to_dict(self):
        def side(s):
            return {
                "transitions": s.transitions.to_dict(),
                "fits": {f"{i},{j}": {fam: (f.to_dict() if isinstance(f, FitResult)
                                            else {"error": f})
                                      for fam, f in s.fits[(i, j)].items()}
                         for i, j in BUCKETS},
                "zero_dt": {f"{i},{j}": v for (i, j), v in s.zero_dt.items()},
                "v0": {"first_event_frequency": s.v0_frequency, "inverted": s.v0_inverted,
                       "resets": s.n_resets},
                "censored_waits": {str(i): v for i, v in s.censored.items()},
            }
        return {"bid": side(self.bid), "ask": side(self.ask), "periods": self.periods,
                "excluded_messages": self.excluded,
                "parse_errors": [{"line": ln, "error": e} for ln, e in self.parse_errors],
                "parse_warnings": self.parse_warnings,
                "unestimable": self.unestimable}

    def write_json(self, path, meta=None):
        d = {"meta": meta or {}, **self.to_dict()}
        with open(path, "w") as fh:
            json.dump(_finite(d), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_table(self, path, meta=None):
        """One row per (side, bucket, family): estimates with 95% CI bounds."""
        with open(path, "w", newline="") as fh:
            for k, v in (meta or {}).items():
                fh.write(f"# {k}={v}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["side", "i", "j", "P", "P_se", "family", "k", "k_lo", "k_hi", "theta",
                        "theta_lo", "theta_hi", "n", "loglik", "zero_dt"])
            for name, s in (("bid", self.bid), ("ask", self.ask)):
                for b in BUCKETS:
                    for fam, f in s.fits[b].items():
                        base = [name, b[0], b[1], _g(s.transitions.P[b]), _g(s.transitions.se[b]),
                                fam]
                        if isinstance(f, FitResult):
                            w.writerow(base + [_g(f.k), _g(f.k_ci[0]), _g(f.k_ci[1]),
                                               _g(f.theta), _g(f.theta_ci[0]), _g(f.theta_ci[1]),
                                               f.n, _g(f.loglik), s.zero_dt[b]])
                        else:
                            w.writerow(base + [""] * 6 + [0, "", s.zero_dt[b]])


def _g(v):
    return f"{v:.10g}"


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def calibrate_side(stream: SideStream, families=("weibull", "gamma", "exponential"),
                   min_sample=10, censoring=True) -> SideCalibration:
    """Transitions, per-bucket fits and reset-type estimates for one side.

    With ``censoring`` (default) and censored waits present, each row's two
    buckets and its probability ``P(i, 1)`` are fitted jointly by
    :func:`fit_row_censored`; the reported row probability then comes from
    the first family in ``families`` that fits (``P_raw`` keeps the plain
    frequencies). Otherwise (or if a bucket of the row cannot be fitted) the
    single-bucket estimators and plain frequencies are used.
    """
    tr = estimate_transitions(stream)
    groups = group_interarrivals(stream)
    fits, zeros, samples = {}, {}, {}
    for b, dt in groups.items():
        zeros[b] = int(np.sum(dt == 0))
        pos = dt[dt > 0]
        samples[b] = pos
        fits[b] = {}
        for fam in families:
            if pos.size < min_sample:
                fits[b][fam] = f"skipped: {pos.size} positive waiting times (< {min_sample})"
                continue
            try:
                fits[b][fam] = FITTERS[fam](pos)
            except CalibrationError as exc:
                fits[b][fam] = str(exc)
    n_cens = {}
    for i in (1, -1):
        cens = stream.cens_dt[stream.cens_prev == i]
        n_cens[i] = int(np.sum(cens > 0))
        if not censoring or n_cens[i] == 0 or i in tr.unestimable:
            continue
        up, down = (i, 1), (i, -1)
        for fam in families:
            f_up, f_down = fits[up].get(fam), fits[down].get(fam)
            if not (isinstance(f_up, FitResult) and isinstance(f_down, FitResult)):
                continue
            try:
                fits[up][fam], fits[down][fam], p, p_se = fit_row_censored(
                    fam, samples[up], samples[down], cens, tr.P_raw[up], start=(f_up, f_down),
                    counts=(tr.counts[up], tr.counts[down]))
            except (CalibrationError, ValueError, FloatingPointError) as exc:
                for bk in (up, down):
                    fits[bk][fam].message = f"censoring ignored: {exc}"
                continue
            if i not in tr.corrected and math.isfinite(p_se):
                # the first family in the list that fits sets the row estimate
                tr.P[up], tr.P[down] = p, 1.0 - p
                tr.se[up] = tr.se[down] = p_se
                tr.corrected[i] = fam
    freq, n0, inv = estimate_v0(stream, tr)
    return SideCalibration(tr, fits, zeros, samples, freq, inv, n0, n_cens)


def calibrate(stream: EventStream, parsed: ParseResult | None = None,
              families=("weibull", "gamma", "exponential"), censoring=True) -> CalibrationReport:
    return CalibrationReport(
        calibrate_side(stream.bid, families, censoring=censoring),
        calibrate_side(stream.ask, families, censoring=censoring),
        stream.periods, dict(stream.excluded),
        [] if parsed is None else list(parsed.errors),
        [] if parsed is None else list(parsed.warnings))
