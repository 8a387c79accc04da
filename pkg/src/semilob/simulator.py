"""Event-level simulation of the two-queue book.

Each side runs its own Markov renewal stream: given the previous event type
``i`` the next type ``j`` is drawn from ``P(i, .)`` and the waiting time from
``H(i, j)``; +1 events add one order to the queue, -1 events remove one.
When a queue empties the price moves one tick (ask empty: up, bid empty:
down), both queues restart from sizes drawn from ``f`` (after an up-move) or
``f~`` (after a down-move), and both event types are redrawn from ``v0``.
Simultaneous events are processed bid first, so a tie in depletion times is
a down-move.

Random numbers come from counter-based SplitMix64 streams keyed by
``(seed, run, period, stream)``: stream 0 drives the bid, 1 the ask and 2 the
redraw after the period. Results therefore do not depend on the order in
which runs or periods are evaluated, and the event-log simulator reproduces
exactly the price path of :func:`simulate_path`.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from decimal import Context, Decimal

import numba
import numpy as np

from .kernel import (
    Deterministic,
    EmpiricalStep,
    Exponential,
    Gamma,
    KernelSide,
    ReinitDistribution,
    Weibull,
    validate_side,
)

RUNAWAY_CAP = 10**9
TIE_POLICY = "bid-first"

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV53 = 1.0 / 9007199254740992.0

_EXP, _WEIBULL, _GAMMA, _DET, _EMP = 0, 1, 2, 3, 4


class RunawaySimulation(RuntimeError):
    """More events than the hard cap without reaching the requested horizon."""


# ---------------------------------------------------------------------------
# random numbers
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@numba.njit(cache=True)
def _stream(seed, run, period, which):
    k = _mix(np.uint64(seed) + _GOLDEN * np.uint64(run + 1))
    k = _mix(k + _GOLDEN * np.uint64(period + 1))
    k = _mix(k ^ (_GOLDEN * np.uint64(which + 1)))
    st = np.empty(1, dtype=np.uint64)
    st[0] = k
    return st


@numba.njit(cache=True)
def _uniform(st):
    """Uniform on the open interval (0, 1)."""
    st[0] += _GOLDEN
    z = _mix(st[0])
    return (np.float64(z >> np.uint64(11)) + 0.5) * _INV53


@numba.njit(cache=True)
def _normal(st):
    u1 = _uniform(st)
    u2 = _uniform(st)
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


@numba.njit(cache=True)
def _gamma_unit(k, st):
    """Gamma(k, 1) by Marsaglia-Tsang, with the U**(1/k) boost for k < 1."""
    boost = 0.0
    if k < 1.0:
        boost = math.log(_uniform(st)) / k
        k = k + 1.0
    d = k - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    while True:
        x = _normal(st)
        v = 1.0 + c * x
        if v <= 0.0:
            continue
        v = v * v * v
        u = _uniform(st)
        if math.log(u) < 0.5 * x * x + d - d * v + d * math.log(v):
            return math.exp(math.log(d * v) + boost)


@numba.njit(cache=True)
def _duration(fam, a, b, off, ln, sup, cum, st):
    if fam == _EXP:
        return -a * math.log(_uniform(st))
    if fam == _WEIBULL:
        return b * (-math.log(_uniform(st))) ** (1.0 / a)
    if fam == _GAMMA:
        return b * _gamma_unit(a, st)
    if fam == _DET:
        return a
    u = _uniform(st)
    lo = off
    hi = off + ln - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if cum[mid] < u:
            lo = mid + 1
        else:
            hi = mid
    return sup[lo]


# ---------------------------------------------------------------------------
# kernel encoding
# ---------------------------------------------------------------------------

_ORDER = ((1, 1), (1, -1), (-1, 1), (-1, -1))  # slot 2*ii + jj, ii/jj = 0 for +1


@dataclass(frozen=True)
class _Encoded:
    p_up: np.ndarray    # P(i, +1) for i = +1, -1
    v0: float
    fam: np.ndarray
    a: np.ndarray
    b: np.ndarray
    off: np.ndarray
    ln: np.ndarray
    sup: np.ndarray
    cum: np.ndarray

    def args(self):
        return (self.p_up, self.fam, self.a, self.b, self.off, self.ln, self.sup, self.cum)


def encode_side(kernel: KernelSide) -> _Encoded:
    fam = np.zeros(4, np.int64)
    a = np.zeros(4)
    b = np.zeros(4)
    off = np.zeros(4, np.int64)
    ln = np.zeros(4, np.int64)
    sup, cum = [], []
    for slot, key in enumerate(_ORDER):
        d = kernel.H[key]
        if isinstance(d, Exponential):
            fam[slot], a[slot] = _EXP, d.scale
        elif isinstance(d, Weibull):
            fam[slot], a[slot], b[slot] = _WEIBULL, d.shape, d.scale
        elif isinstance(d, Gamma):
            fam[slot], a[slot], b[slot] = _GAMMA, d.shape, d.scale
        elif isinstance(d, Deterministic):
            fam[slot], a[slot] = _DET, d.value
        elif isinstance(d, EmpiricalStep):
            fam[slot] = _EMP
            off[slot] = len(sup)
            ln[slot] = len(d.support)
            sup.extend(d.support)
            c = np.cumsum(d.masses)
            c[-1] = 1.0
            cum.extend(c.tolist())
        else:
            raise TypeError(f"unsupported duration law {type(d).__name__}")
    p_up = np.array([kernel.P[(1, 1)], kernel.P[(-1, 1)]])
    return _Encoded(p_up, float(kernel.v0), fam, a, b, off, ln,
                    np.asarray(sup + [0.0]), np.asarray(cum + [1.0]))


def _encode_reinit(dist: ReinitDistribution):
    pairs = np.asarray(dist.pairs, dtype=np.int64).reshape(-1, 2)
    c = np.cumsum(dist.masses)
    c[-1] = 1.0
    return pairs, c


# ---------------------------------------------------------------------------
# compiled cores
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _next_event(v, p_up, fam, a, b, off, ln, sup, cum, st):
    ii = 0 if v == 1 else 1
    jj = 0 if _uniform(st) < p_up[ii] else 1
    slot = 2 * ii + jj
    dur = _duration(fam[slot], a[slot], b[slot], off[slot], ln[slot], sup, cum, st)
    return (1 if jj == 0 else -1), dur


@numba.njit(cache=True)
def _side_depletion(q, v, t_stop, strict, cap, p_up, fam, a, b, off, ln, sup, cum, st):
    """Time for a queue of size ``q`` to empty, or inf if it does not before ``t_stop``.

    With ``strict`` the depletion must happen before ``t_stop``; otherwise at
    or before it. Returns ``(time, events, runaway)``.
    """
    t = 0.0
    n = 0
    while True:
        j, dur = _next_event(v, p_up, fam, a, b, off, ln, sup, cum, st)
        t += dur
        if (strict and t >= t_stop) or (not strict and t > t_stop):
            return np.inf, n, False
        n += 1
        q += j
        v = j
        if q == 0:
            return t, n, False
        if n >= cap:
            return np.inf, n, True


@numba.njit(cache=True)
def _draw_pair(pairs, cum, st):
    u = _uniform(st)
    lo = 0
    hi = cum.size - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if cum[mid] < u:
            lo = mid + 1
        else:
            hi = mid
    return pairs[lo, 0], pairs[lo, 1]


@numba.njit(cache=True)
def _draw_types(v0b, v0a, st):
    vb = 1 if _uniform(st) < v0b else -1
    va = 1 if _uniform(st) < v0a else -1
    return vb, va


@numba.njit(cache=True)
def _advance(q, v, t, pend_t, pend_j, t_stop, strict, count, cap, p_up, fam, a, b, off, ln,
             sup, cum, st):
    """Accept one side's events up to ``t_stop`` (strictly before it with ``strict``).

    ``(pend_t, pend_j)`` is the next event, already drawn; drawing stays in
    stream order, so a side advanced in several windows follows the same path
    as in one call. Returns the updated state and whether the queue emptied.
    """
    while (pend_t < t_stop) if strict else (pend_t <= t_stop):
        t = pend_t
        q += pend_j
        v = pend_j
        count += 1
        if q == 0:
            return q, v, t, pend_t, pend_j, count, True
        if count >= cap:
            break
        j, dur = _next_event(v, p_up, fam, a, b, off, ln, sup, cum, st)
        pend_t = t + dur
        pend_j = j
    return q, v, t, pend_t, pend_j, count, False


@numba.njit(cache=True)
def _one_period(qb, qa, vb, va, t_limit, cap, seed, run, period, eb, ea):
    """Run both sides from a fresh period; returns ``(tau, direction, events, runaway)``.

    ``direction`` is 0 when neither queue empties by ``t_limit``. The two
    sides advance together over doubling time windows so that a heavy-tailed
    side is never simulated far past the other side's depletion. A tie goes
    to the bid: the ask must empty strictly before the bid.
    """
    sb = _stream(seed, run, period, 0)
    sa = _stream(seed, run, period, 1)
    jb, db = _next_event(vb, eb[0], eb[1], eb[2], eb[3], eb[4], eb[5], eb[6], eb[7], sb)
    ja, da = _next_event(va, ea[0], ea[1], ea[2], ea[3], ea[4], ea[5], ea[6], ea[7], sa)
    tb = 0.0
    ta = 0.0
    count = 0
    window = max(8.0 * max(db, da), 1e-9)
    while True:
        w = min(window, t_limit)
        qb, vb, tb, db, jb, count, bid_done = _advance(
            qb, vb, tb, db, jb, w, False, count, cap,
            eb[0], eb[1], eb[2], eb[3], eb[4], eb[5], eb[6], eb[7], sb)
        if count >= cap and not bid_done:
            return np.inf, 0, count, True
        if bid_done:
            qa, va, ta, da, ja, count, ask_done = _advance(
                qa, va, ta, da, ja, tb, True, count, cap,
                ea[0], ea[1], ea[2], ea[3], ea[4], ea[5], ea[6], ea[7], sa)
            if ask_done:
                return ta, 1, count, False
            if count >= cap:
                return np.inf, 0, count, True
            return tb, -1, count, False
        qa, va, ta, da, ja, count, ask_done = _advance(
            qa, va, ta, da, ja, w, False, count, cap,
            ea[0], ea[1], ea[2], ea[3], ea[4], ea[5], ea[6], ea[7], sa)
        if ask_done:
            return ta, 1, count, False
        if count >= cap:
            return np.inf, 0, count, True
        if w >= t_limit:
            return np.inf, 0, count, False
        window *= 2.0


@numba.njit(cache=True)
def _path_core(eb, ea, v0b, v0a, f_pairs, f_cum, ft_pairs, ft_cum, f0_pairs, f0_cum,
               seed, run, horizon_time, horizon_changes, cap):
    cap_arr = 1024
    T = np.empty(cap_arr)
    X = np.empty(cap_arr, np.int64)
    Q = np.empty((cap_arr + 1, 2), np.int64)
    st = _stream(seed, run, 0, 2)
    qb, qa = _draw_pair(f0_pairs, f0_cum, st)
    vb, va = _draw_types(v0b, v0a, st)
    Q[0, 0] = qb
    Q[0, 1] = qa
    now = 0.0
    count = 0
    events = 0
    status = 0
    period = 0
    while True:
        if horizon_changes >= 0 and count >= horizon_changes:
            break
        t_limit = horizon_time - now
        if t_limit < 0.0:
            break
        tau, d, ev, runaway = _one_period(qb, qa, vb, va, t_limit, cap - events, seed, run,
                                          period, eb, ea)
        events += ev
        if runaway or events >= cap:
            status = 1
            break
        if d == 0:
            break
        now += tau
        if count >= cap_arr:
            cap_arr *= 2
            T2 = np.empty(cap_arr)
            X2 = np.empty(cap_arr, np.int64)
            Q2 = np.empty((cap_arr + 1, 2), np.int64)
            T2[:count] = T[:count]
            X2[:count] = X[:count]
            Q2[:count + 1] = Q[:count + 1]
            T, X, Q = T2, X2, Q2
        T[count] = now
        X[count] = d
        period += 1
        st = _stream(seed, run, period, 2)
        if d == 1:
            qb, qa = _draw_pair(f_pairs, f_cum, st)
        else:
            qb, qa = _draw_pair(ft_pairs, ft_cum, st)
        vb, va = _draw_types(v0b, v0a, st)
        count += 1
        Q[count, 0] = qb
        Q[count, 1] = qa
    return T[:count].copy(), X[:count].copy(), Q[:count + 1].copy(), events, status


@numba.njit(cache=True)
def _first_change_batch(eb, ea, v0b, v0a, qb, qa, runs, seed, run0, cap):
    tau = np.empty(runs)
    direction = np.empty(runs, np.int64)
    status = 0
    for r in range(runs):
        st = _stream(seed, run0 + r, 0, 2)
        vb, va = _draw_types(v0b, v0a, st)
        t, d, ev, runaway = _one_period(qb, qa, vb, va, np.inf, cap, seed, run0 + r, 0, eb, ea)
        if runaway:
            status = 1
        tau[r] = t
        direction[r] = d
    return tau, direction, status


@numba.njit(cache=True)
def _depletion_batch(e, v0, n, conditioning, t_max, runs, seed, run0, cap):
    out = np.empty(runs)
    events = np.empty(runs, np.int64)
    for r in range(runs):
        st = _stream(seed, run0 + r, 0, 2)
        if conditioning == 0:
            v = 1 if _uniform(st) < v0 else -1
        else:
            v = conditioning
        sb = _stream(seed, run0 + r, 0, 0)
        s, ev, runaway = _side_depletion(n, v, t_max, False, cap, e[0], e[1], e[2], e[3], e[4],
                                         e[5], e[6], e[7], sb)
        out[r] = s
        events[r] = ev
    return out, events


@numba.njit(cache=True)
def _event_log_core(eb, ea, v0b, v0a, f_pairs, f_cum, ft_pairs, ft_cum, f0_pairs, f0_cum,
                    seed, run, max_events, horizon_time):
    time = np.empty(max_events)
    dur = np.empty(max_events)
    side = np.empty(max_events, np.int8)
    etype = np.empty(max_events, np.int8)
    qbs = np.empty(max_events, np.int64)
    qas = np.empty(max_events, np.int64)
    pc = np.zeros(max_events, np.int8)
    per = np.empty(max_events, np.int64)
    st = _stream(seed, run, 0, 2)
    qb, qa = _draw_pair(f0_pairs, f0_cum, st)
    vb, va = _draw_types(v0b, v0a, st)
    n = 0
    period = 0
    start = 0.0
    while n < max_events:
        sb = _stream(seed, run, period, 0)
        sa = _stream(seed, run, period, 1)
        jb, db = _next_event(vb, eb[0], eb[1], eb[2], eb[3], eb[4], eb[5], eb[6], eb[7], sb)
        ja, da = _next_event(va, ea[0], ea[1], ea[2], ea[3], ea[4], ea[5], ea[6], ea[7], sa)
        tb = db
        ta = da
        d = 0
        while n < max_events:
            # bid first on ties
            if tb <= ta:
                if start + tb > horizon_time:
                    return (time[:n].copy(), dur[:n].copy(), side[:n].copy(), etype[:n].copy(),
                            qbs[:n].copy(), qas[:n].copy(), pc[:n].copy(), per[:n].copy())
                qb += jb
                vb = jb
                time[n] = start + tb
                dur[n] = db
                side[n] = 0
                etype[n] = jb
                per[n] = period
                if qb == 0:
                    d = -1
                    pc[n] = -1
                qbs[n] = qb
                qas[n] = qa
                n += 1
                if d != 0:
                    start = start + tb
                    break
                jb, db = _next_event(vb, eb[0], eb[1], eb[2], eb[3], eb[4], eb[5], eb[6],
                                     eb[7], sb)
                tb += db
            else:
                if start + ta > horizon_time:
                    return (time[:n].copy(), dur[:n].copy(), side[:n].copy(), etype[:n].copy(),
                            qbs[:n].copy(), qas[:n].copy(), pc[:n].copy(), per[:n].copy())
                qa += ja
                va = ja
                time[n] = start + ta
                dur[n] = da
                side[n] = 1
                etype[n] = ja
                per[n] = period
                if qa == 0:
                    d = 1
                    pc[n] = 1
                qbs[n] = qb
                qas[n] = qa
                n += 1
                if d != 0:
                    start = start + ta
                    break
                ja, da = _next_event(va, ea[0], ea[1], ea[2], ea[3], ea[4], ea[5], ea[6],
                                     ea[7], sa)
                ta += da
        if d == 0:
            break
        period += 1
        st = _stream(seed, run, period, 2)
        if d == 1:
            qb, qa = _draw_pair(f_pairs, f_cum, st)
        else:
            qb, qa = _draw_pair(ft_pairs, ft_cum, st)
        vb, va = _draw_types(v0b, v0a, st)
        # the row of the depleting event shows the book after the redraw
        qbs[n - 1] = qb
        qas[n - 1] = qa
    return (time[:n].copy(), dur[:n].copy(), side[:n].copy(), etype[:n].copy(),
            qbs[:n].copy(), qas[:n].copy(), pc[:n].copy(), per[:n].copy())


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    """Everything needed to reproduce a simulation.

    ``f`` is the queue-size law after an up-move, ``f_tilde`` after a
    down-move and ``f0`` at time 0 (defaults to ``f``). Horizons: stop at
    time ``horizon_time`` (ms) and/or after ``horizon_changes`` price moves.
    """

    bid: KernelSide
    ask: KernelSide
    f: ReinitDistribution
    f_tilde: ReinitDistribution
    f0: ReinitDistribution | None = None
    delta: float = 1.0
    seed: int = 0
    horizon_time: float = math.inf
    horizon_changes: int | None = None
    initial_bid: float = 0.0
    tie_policy: str = TIE_POLICY
    max_events: int = RUNAWAY_CAP

    def __post_init__(self):
        for name, k in (("bid", self.bid), ("ask", self.ask)):
            errs = [e for e in validate_side(k, allow_boundary=True) if e.startswith("error")]
            if errs:
                raise ValueError(f"{name} kernel invalid: " + "; ".join(errs))
        if self.tie_policy != TIE_POLICY:
            raise ValueError(f"only the {TIE_POLICY!r} tie policy is implemented")
        if self.horizon_changes is None and not math.isfinite(self.horizon_time):
            raise ValueError("give a finite horizon_time or horizon_changes")
        if not 0 <= int(self.seed) < 2**63:
            raise ValueError("seed must be a nonnegative 63-bit integer")

    @property
    def initial(self):
        return self.f if self.f0 is None else self.f0

    def encoded(self):
        eb, ea = encode_side(self.bid), encode_side(self.ask)
        fp, fc = _encode_reinit(self.f)
        tp, tc = _encode_reinit(self.f_tilde)
        ip, ic = _encode_reinit(self.initial)
        return eb, ea, (fp, fc, tp, tc, ip, ic)

    def describe(self):
        """JSON-able description (used for the config hash)."""
        return {
            "bid": self.bid.to_dict(), "ask": self.ask.to_dict(),
            "f": self.f.to_list(), "f_tilde": self.f_tilde.to_list(),
            "f0": None if self.f0 is None else self.f0.to_list(),
            "delta": self.delta, "seed": int(self.seed),
            "horizon_time": None if not math.isfinite(self.horizon_time) else self.horizon_time,
            "horizon_changes": self.horizon_changes, "initial_bid": self.initial_bid,
            "tie_policy": self.tie_policy,
        }

    def config_hash(self):
        blob = json.dumps(self.describe(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class BookState:
    """``(bid price, q_b, q_a, V_b, V_a)`` at a given clock time (ms)."""

    bid: float
    q_b: int
    q_a: int
    v_b: int
    v_a: int
    t: float = 0.0
    delta: float = 1.0

    @property
    def ask(self):
        return self.bid + self.delta

    @property
    def mid(self):
        return self.bid + 0.5 * self.delta

    def __post_init__(self):
        if self.q_b < 1 or self.q_a < 1:
            raise ValueError("queues must hold at least one order")
        if self.v_b not in (1, -1) or self.v_a not in (1, -1):
            raise ValueError("event types are +1 or -1")


@dataclass(frozen=True)
class PricePath:
    """Times ``T_n`` (ms) and increments ``X_n`` (+/- delta) of the bid price."""

    times: np.ndarray
    increments: np.ndarray
    queue_starts: np.ndarray      # (n_b, n_a) at the start of every period
    delta: float
    initial_bid: float
    seed: int
    events: int
    horizon_time: float

    @property
    def n_changes(self):
        return self.times.size

    @property
    def sojourns(self):
        return np.diff(np.concatenate([[0.0], self.times]))

    def count(self, t):
        """``N_t``: number of moves up to and including time ``t``."""
        return np.searchsorted(self.times, np.asarray(t, dtype=float), side="right")

    def price(self, t):
        """Bid price ``s_t``."""
        cs = np.concatenate([[0.0], np.cumsum(self.increments)])
        return self.initial_bid + cs[self.count(t)]


def _check_status(status, events):
    if status:
        raise RunawaySimulation(f"runaway simulation: more than {events} events without "
                                "reaching the horizon")


def simulate_path(config: SimConfig, run: int = 0) -> PricePath:
    """Simulate the price path up to the configured horizon."""
    eb, ea, (fp, fc, tp, tc, ip, ic) = config.encoded()
    hc = -1 if config.horizon_changes is None else int(config.horizon_changes)
    T, X, Q, events, status = _path_core(
        eb.args(), ea.args(), eb.v0, ea.v0, fp, fc, tp, tc, ip, ic,
        np.uint64(config.seed), run, float(config.horizon_time), hc, int(config.max_events))
    _check_status(status, config.max_events)
    return PricePath(T, X * config.delta, Q, config.delta, config.initial_bid, int(config.seed),
                     int(events), config.horizon_time)


def simulate_until_price_change(config: SimConfig, state: BookState, period: int = 0,
                                run: int = 0):
    """Advance ``state`` to the next price move.

    Returns ``(tau, increment, new_state)`` where the new state carries the
    redrawn queue sizes and event types.
    """
    eb, ea, (fp, fc, tp, tc, _, _) = config.encoded()
    tau, d, ev, runaway = _one_period(state.q_b, state.q_a, state.v_b, state.v_a, np.inf,
                                      int(config.max_events), np.uint64(config.seed), run,
                                      period, eb.args(), ea.args())
    _check_status(runaway, config.max_events)
    st = _stream(np.uint64(config.seed), run, period + 1, 2)
    if d == 1:
        qb, qa = _draw_pair(fp, fc, st)
    else:
        qb, qa = _draw_pair(tp, tc, st)
    vb, va = _draw_types(eb.v0, ea.v0, st)
    new = BookState(state.bid + d * config.delta, int(qb), int(qa), int(vb), int(va),
                    state.t + tau, config.delta)
    return tau, d * config.delta, new


def sample_first_change(bid: KernelSide, ask: KernelSide, n_b: int, n_a: int, runs: int,
                        seed: int = 0, run0: int = 0, cap: int = RUNAWAY_CAP):
    """``runs`` independent ``(tau, direction)`` draws from queue sizes ``(n_b, n_a)``."""
    eb, ea = encode_side(bid), encode_side(ask)
    tau, d, status = _first_change_batch(eb.args(), ea.args(), eb.v0, ea.v0, int(n_b), int(n_a),
                                         int(runs), np.uint64(seed), int(run0), int(cap))
    _check_status(status, cap)
    return tau, d


def sample_depletion(kernel: KernelSide, n: int, runs: int, seed: int = 0, t_max=math.inf,
                     conditioning=None, run0: int = 0, cap: int = RUNAWAY_CAP):
    """Depletion times of one queue started at size ``n``; ``inf`` beyond ``t_max``.

    Returns ``(samples, events)``; censoring at ``t_max`` keeps the cost of
    heavy-tailed (balanced) laws bounded.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    e = encode_side(kernel)
    cond = 0 if conditioning is None else int(conditioning)
    return _depletion_batch(e.args(), e.v0, int(n), cond, float(t_max), int(runs),
                            np.uint64(seed), int(run0), int(cap))


# ---------------------------------------------------------------------------
# event log
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EventLog:
    """All book events of a simulation, in processing order.

    ``dt`` is the waiting time drawn for the event (since the same side's
    previous event, or since the start of the period for its first event);
    ``q_b, q_a`` are the queue sizes after the event, after the redraw when
    the event empties a queue (``price_change`` = +1 / -1).
    """

    time: np.ndarray
    dt: np.ndarray
    side: np.ndarray
    event: np.ndarray
    q_b: np.ndarray
    q_a: np.ndarray
    price_change: np.ndarray
    period: np.ndarray
    delta: float = 1.0
    initial_bid: float = 0.0
    seed: int = 0

    def __len__(self):
        return self.time.size

    def exact_times(self, origin: Decimal = Decimal(0), scale: Decimal = Decimal(1)):
        """Event times as Decimals, accumulated exactly from the drawn waiting times.

        Floating-point absolute times cannot represent waiting times far below
        their ulp (frequent for Weibull shapes around 0.1-0.3); the exact sums
        make ``t_k - t_{k-1}`` reproduce every drawn ``dt``. Times are then
        mapped to ``origin + t * scale``.
        """
        ctx = Context(prec=80)
        out = []
        start = Decimal(0)
        clock = [Decimal(0), Decimal(0)]
        cur = -1
        last = Decimal(0)
        for k in range(self.time.size):
            p = int(self.period[k])
            if p != cur:
                cur = p
                clock = [start, start]
            s = int(self.side[k])
            clock[s] = ctx.add(clock[s], Decimal(float(self.dt[k])))
            t = clock[s]
            # bid-first ties can leave the exact clock a hair behind the float order
            if t < last:
                t = last
            last = t
            out.append(ctx.add(origin, ctx.multiply(t, scale)))
            if self.price_change[k] != 0:
                start = t
        return out


def simulate_event_log(config: SimConfig, max_events: int, run: int = 0) -> EventLog:
    """Simulate and record every book event (same random streams as :func:`simulate_path`)."""
    eb, ea, (fp, fc, tp, tc, ip, ic) = config.encoded()
    out = _event_log_core(eb.args(), ea.args(), eb.v0, ea.v0, fp, fc, tp, tc, ip, ic,
                          np.uint64(config.seed), run, int(max_events),
                          float(config.horizon_time))
    return EventLog(*out, delta=config.delta, initial_bid=config.initial_bid,
                    seed=int(config.seed))


def _header(meta):
    return "".join(f"# {k}={v}\n" for k, v in meta.items())


def write_event_log(log: EventLog, path, meta=None):
    """CSV ``time_ms, side, event, q_b, q_a, price_change`` with exact times."""
    times = log.exact_times()
    side = np.where(log.side == 0, "B", "A")
    with open(path, "w", newline="") as fh:
        fh.write(_header(meta or {}))
        fh.write("time_ms,side,event,q_b,q_a,price_change\n")
        for k in range(len(log)):
            fh.write(f"{times[k]:f},{side[k]},{int(log.event[k])},{int(log.q_b[k])},"
                     f"{int(log.q_a[k])},{int(log.price_change[k])}\n")


def write_price_path(path_obj: PricePath, path, meta=None):
    """CSV ``T_n, X_n``."""
    with open(path, "w", newline="") as fh:
        fh.write(_header(meta or {}))
        fh.write("T_n,X_n\n")
        for t, x in zip(path_obj.times, path_obj.increments):
            fh.write(f"{float(t)!r},{float(x)!r}\n")


# ---------------------------------------------------------------------------
# Monte Carlo estimators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MCEstimate:
    target: str
    value: float
    stderr: float
    runs: int
    analytic: float | None = None
    details: dict = field(default_factory=dict)

    @property
    def z_score(self):
        if self.analytic is None or self.stderr == 0:
            return None
        return (self.value - self.analytic) / self.stderr


def survival_slope(samples, t_lo, t_hi, points=9):
    """Least-squares slope and prefactor of ``log P[X > t]`` vs ``log t`` on ``[t_lo, t_hi]``.

    Returns ``(slope, prefactor, stderr_of_slope)`` where the fitted line is
    ``P[X > t] ~ prefactor * t**slope``.
    """
    x = np.sort(np.asarray(samples, dtype=float))
    t = np.geomspace(t_lo, t_hi, points)
    surv = 1.0 - np.searchsorted(x, t, side="right") / x.size
    if np.any(surv <= 0):
        raise ValueError("empty tail: increase runs or lower t_hi")
    lt, ls = np.log(t), np.log(surv)
    A = np.vstack([lt, np.ones_like(lt)]).T
    coef, *_ = np.linalg.lstsq(A, ls, rcond=None)
    # binomial standard error of each log-survival point, propagated crudely
    w = np.sqrt((1.0 - surv) / (surv * x.size))
    se = float(np.sqrt(np.sum(w**2)) / np.sqrt(np.sum((lt - lt.mean()) ** 2)))
    return float(coef[0]), float(math.exp(coef[1])), se


def mc_estimate(config: SimConfig, target: str, runs: int, **kw) -> MCEstimate:
    """Monte Carlo oracles for the analytic modules.

    Targets
    -------
    ``"p_up"`` (``n_b``, ``n_a``)
        Fraction of first moves that are up.
    ``"sigma_tail"`` (``side`` "bid"/"ask", ``n``, ``t_lo``, ``t_hi``)
        Log-log slope of the depletion-time survival.
    ``"chain_probs"``
        ``p_cont`` and ``p'_cont`` from a path of ``runs`` moves.
    ``"diffusion_variance"`` (``n``, ``t``, ``s_star``)
        Sample variance of ``(s_{nt} - N_{nt} s*) / sqrt(n)`` over ``runs`` paths.
    """
    if runs < 100:
        raise ValueError("runs must be >= 100")
    from . import price as _price  # analytic counterparts

    if target == "p_up":
        n_b, n_a = kw.get("n_b", 1), kw.get("n_a", 1)
        _, d = sample_first_change(config.bid, config.ask, n_b, n_a, runs, config.seed)
        p = float(np.mean(d == 1))
        analytic = kw.get("analytic", None)
        if analytic is None and kw.get("with_analytic", True):
            analytic = _price.p1_up(config.bid, config.ask, n_b, n_a).value
        return MCEstimate(target, p, math.sqrt(max(p * (1 - p), 1e-300) / runs), runs, analytic,
                          {"n_b": n_b, "n_a": n_a})
    if target == "sigma_tail":
        from .depletion import classify_tail
        side = kw.get("side", "ask")
        kernel = config.ask if side == "ask" else config.bid
        n = kw.get("n", 1)
        t_lo, t_hi = kw["t_lo"], kw["t_hi"]
        s, _ = sample_depletion(kernel, n, runs, config.seed, t_max=2.0 * t_hi)
        slope, pref, se = survival_slope(s, t_lo, t_hi)
        law = classify_tail(kernel)
        return MCEstimate(target, slope, se, runs, -law.exponent,
                          {"prefactor": pref, "coefficient": float(law.coefficient(n))})
    if target == "chain_probs":
        cfg = SimConfig(config.bid, config.ask, config.f, config.f_tilde, config.f0,
                        config.delta, config.seed, horizon_changes=runs + 1)
        path = simulate_path(cfg)
        est = chain_counts(path)
        analytic = kw.get("analytic")
        return MCEstimate(target, est["p_cont"], est["p_cont_se"], runs,
                          None if analytic is None else analytic.p_cont, est)
    if target == "diffusion_variance":
        n, t, s_star = kw["n"], kw.get("t", 1.0), kw.get("s_star", 0.0)
        vals = diffusion_samples(config, runs, n, t, s_star)
        var = float(np.var(vals, ddof=1))
        return MCEstimate(target, var, var * math.sqrt(2.0 / (runs - 1)), runs,
                          kw.get("analytic"), {"mean": float(np.mean(vals))})
    raise ValueError(f"unknown target {target!r}")


def chain_counts(path: PricePath):
    """Empirical continuation probabilities and lag-1 covariance of the increments."""
    X = np.sign(path.increments).astype(int)
    prev, nxt = X[:-1], X[1:]
    up = prev == 1
    down = ~up
    p_cont = float(np.mean(nxt[up] == 1)) if up.any() else math.nan
    p_cont_prime = float(np.mean(nxt[down] == -1)) if down.any() else math.nan
    n_up, n_down = int(up.sum()), int(down.sum())
    x = path.increments
    cov = float(np.mean((x[1:] - x.mean()) * (x[:-1] - x.mean())))
    return {
        "p_cont": p_cont,
        "p_cont_se": math.sqrt(p_cont * (1 - p_cont) / max(n_up, 1)),
        "p_cont_prime": p_cont_prime,
        "p_cont_prime_se": math.sqrt(p_cont_prime * (1 - p_cont_prime) / max(n_down, 1)),
        "pi_star": float(np.mean(X == 1)),
        "lag1_cov": cov,
        "n_up": n_up,
        "n_down": n_down,
    }


def diffusion_samples(config: SimConfig, paths: int, n: float, t: float, s_star: float):
    """``(s_{nt} - s_0 - N_{nt} s*) / sqrt(n)`` for independent paths (runs 0..paths-1)."""
    horizon = n * t
    cfg = SimConfig(config.bid, config.ask, config.f, config.f_tilde, config.f0, config.delta,
                    config.seed, horizon_time=horizon)
    out = np.empty(paths)
    for r in range(paths):
        p = simulate_path(cfg, run=r)
        N = p.count(horizon)
        s = float(np.sum(p.increments[:N]))
        out[r] = (s - N * s_star) / math.sqrt(n)
    return out
