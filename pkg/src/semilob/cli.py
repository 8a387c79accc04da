"""Command-line entry point: ``semilob analyze|simulate|calibrate|validate|report``.

Exit codes: 0 success, 1 input error (bad or missing file, invalid model),
2 degraded numerics (low-confidence inversion, unestimable calibration
bucket, failed validation check).

Every output file carries the package version, the seed and a hash of the
run configuration; rerunning with equal inputs rewrites identical bytes.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields

import numpy as np

from . import __version__
from . import calibration as cal
from . import config
from . import depletion as dep
from . import price as pr
from . import simulator as sim
from . import validation as val
from .kernel import KernelSide, ReinitDistribution, validate_side

SCHEMA_VERSION = 1
OK, INPUT_ERROR, DEGRADED = 0, 1, 2


class InputError(Exception):
    """Bad user input; reported on stderr with exit code 1."""


# ---------------------------------------------------------------------------
# model specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    bid: KernelSide
    ask: KernelSide
    f: ReinitDistribution
    f_tilde: ReinitDistribution
    f0: ReinitDistribution | None = None
    delta: float = 1.0
    n_max: int = 50

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION, "delta": self.delta, "n_max": self.n_max,
            "bid": self.bid.to_dict(), "ask": self.ask.to_dict(),
            "f": self.f.to_list(), "f_tilde": self.f_tilde.to_list(),
            "f0": None if self.f0 is None else self.f0.to_list(),
        }

    def sim_config(self, seed, horizon_time=math.inf, horizon_changes=None):
        return sim.SimConfig(self.bid, self.ask, self.f, self.f_tilde, self.f0, self.delta,
                             seed, horizon_time, horizon_changes)


_SPEC_KEYS = {"schema_version", "delta", "n_max", "bid", "ask", "f", "f_tilde", "f0"}


def load_model(path) -> ModelSpec:
    """Read and validate a JSON model specification."""
    if path is None:
        raise InputError("--spec is required")
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read model spec {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"model spec {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise InputError("model spec must be a JSON object")
    unknown = set(raw) - _SPEC_KEYS
    if unknown:
        raise InputError(f"unknown model spec keys: {sorted(unknown)}")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise InputError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    missing = {"bid", "ask", "f", "f_tilde"} - set(raw)
    if missing:
        raise InputError(f"model spec is missing {sorted(missing)}")
    n_max = int(raw.get("n_max", 50))
    try:
        bid = KernelSide.from_dict(raw["bid"])
        ask = KernelSide.from_dict(raw["ask"])
        f = ReinitDistribution.from_list(raw["f"], n_max)
        ft = ReinitDistribution.from_list(raw["f_tilde"], n_max)
        f0 = None if raw.get("f0") is None else ReinitDistribution.from_list(raw["f0"], n_max)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"invalid model spec: {exc}") from exc
    report = []
    for name, k in (("bid", bid), ("ask", ask)):
        report += [f"{name}: {msg}" for msg in validate_side(k) if msg.startswith("error")]
    if report:
        raise InputError("invalid model spec:\n  " + "\n  ".join(report))
    delta = float(raw.get("delta", 1.0))
    if not delta > 0:
        raise InputError("delta must be positive")
    return ModelSpec(bid, ask, f, ft, f0, delta, n_max)


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _meta(args, run_config):
    return {"tool": "semilob", "version": __version__, "seed": int(args.seed),
            "config_hash": config_hash(run_config)}


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def write_json(path, payload, meta):
    with open(path, "w") as fh:
        json.dump({"meta": meta, **_clean(payload)}, fh, indent=2, sort_keys=False)
        fh.write("\n")


def _csv_header(fh, meta):
    for k, v in meta.items():
        fh.write(f"# {k}={v}\n")


def _out(args, name):
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def parse_tolerances(items):
    """``key=value`` overrides: numeric tolerances or ``check.key`` acceptance tolerances."""
    numeric, acceptance = {}, {}
    for item in items or ():
        if "=" not in item:
            raise InputError(f"tolerance override {item!r} is not key=value")
        key, value = item.split("=", 1)
        try:
            v = float(value)
        except ValueError:
            raise InputError(f"tolerance override {item!r}: value is not a number") from None
        if "." in key:
            check, sub = key.split(".", 1)
            if check not in config.ACCEPTANCE or sub not in config.ACCEPTANCE[check]:
                raise InputError(f"unknown acceptance tolerance {key!r}")
            acceptance.setdefault(check, {})[sub] = v
        else:
            names = {f.name: f.type for f in fields(config.Tolerances)}
            if key not in names:
                raise InputError(f"unknown tolerance {key!r}; known: {sorted(names)}")
            numeric[key] = int(v) if names[key] in ("int", int) else v
    return config.with_overrides(**numeric), acceptance


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def _time_grid(kernel, points):
    tc = dep.characteristic_time(kernel)
    return np.geomspace(tc * 1e-2, tc * 1e3, points)


def _depletion_rows(job):
    side, kernel, n, t, tol = job
    with config.using(tol):
        r = dep.sigma_cdf(kernel, t, n)
    return [(f"cdf_sigma_{side}", str(n), float(ti), float(v), "low" if lc else "ok", float(xm))
            for ti, v, lc, xm in zip(t, r.value, r.low_confidence, r.x_max)]


def _map(fun, jobs, workers):
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fun, jobs))
    return [fun(j) for j in jobs]


def cmd_analyze(args):
    model = load_model(args.spec)
    tol, _ = parse_tolerances(args.tol)
    n_grid = range(1, args.n_max + 1)
    run_config = {"cmd": "analyze", "model": model.to_dict(), "n_max": args.n_max,
                  "points": args.points, "tolerances": tol.__dict__}
    meta = _meta(args, run_config)
    degraded = False
    with config.using(tol):
        jobs = [(side, k, n, _time_grid(k, args.points), tol)
                for side, k in (("a", model.ask), ("b", model.bid)) for n in n_grid]
        rows = [row for block in _map(_depletion_rows, jobs, args.workers) for row in block]
        for side, k in (("a", model.ask), ("b", model.bid)):
            law = dep.classify_tail(k)
            for n in n_grid:
                rows.append((f"tail_coefficient_sigma_{side}_{law.tail_class}", str(n), "",
                             float(law.coefficient(n)), "boundary" if law.near_boundary else "ok",
                             ""))
        params = pr.chain_params(model.bid, model.ask, model.f, model.f_tilde, model.delta)
        table = params.p1_table
        for nb in range(1, table.n_max + 1):
            for na in range(1, table.n_max + 1):
                if not math.isnan(table.values[nb - 1, na - 1]):
                    rows.append(("p1_up", f"({nb},{na})", "", float(table.values[nb - 1, na - 1]),
                                 "low" if table.low_confidence[nb - 1, na - 1] else "ok", ""))
        degraded |= any(r[4] == "low" for r in rows) or bool(params.low_confidence)
        with open(_out(args, "depletion.csv"), "w", newline="") as fh:
            _csv_header(fh, meta)
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["quantity", "n", "t", "value", "confidence_flag", "truncation_Xmax"])
            for q, n, t, v, flag, xm in rows:
                w.writerow([q, n, "" if t == "" else repr(t), repr(v), flag,
                            "" if xm == "" else repr(xm)])
        chain = params.to_dict()
        write_json(_out(args, "price_chain.json"), chain, meta)
        try:
            dc = pr.diffusion_constants(params)
            diffusion = {"regime": dc.regime, "s_star": dc.s_star, "sigma2": dc.sigma2,
                         "sigma": math.sqrt(max(dc.sigma2, 0.0)), "time_scale": dc.time_scale,
                         "time_scale_name": "tau_star" if dc.regime == "balanced" else "m_tau",
                         "drift": dc.drift, "volatility": dc.volatility, "refused": None}
        except pr.RegimeError as exc:
            diffusion = {"regime": params.regime, "s_star": params.s_star,
                         "sigma2": params.sigma2, "sigma": math.sqrt(max(params.sigma2, 0.0)),
                         "refused": str(exc)}
        write_json(_out(args, "diffusion.json"), diffusion, meta)
    print(f"regime={params.regime} p_cont={params.p_cont:.6g} p_cont_prime="
          f"{params.p_cont_prime:.6g} s*={params.s_star:.6g} sigma={diffusion['sigma']:.6g}")
    if diffusion.get("refused"):
        print(f"diffusion constants refused: {diffusion['refused']}")
    if degraded:
        print("warning: some values are low-confidence (see confidence_flag)", file=sys.stderr)
        return DEGRADED
    return OK


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args):
    model = load_model(args.spec)
    horizon = math.inf if args.horizon is None else float(args.horizon)
    if horizon < 0:
        raise InputError("--horizon must be >= 0")
    if args.mc and args.changes is None and not math.isfinite(horizon):
        args.changes = 1  # Monte Carlo targets do not use the path horizon
    if args.changes is None and not math.isfinite(horizon):
        raise InputError("give --horizon (time) or --changes (number of price moves)")
    try:
        cfg = model.sim_config(args.seed, horizon, args.changes)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    run_config = {"cmd": "simulate", "sim": cfg.describe(), "events": args.events,
                  "mc": args.mc, "samples": args.samples, "n_b": args.n_b, "n_a": args.n_a}
    meta = _meta(args, run_config)
    if args.mc:
        if args.mc != "p_up":
            raise InputError(f"unknown Monte Carlo target {args.mc!r}")
        est = sim.mc_estimate(cfg, "p_up", args.samples, n_b=args.n_b, n_a=args.n_a)
        payload = {"target": est.target, "estimate": est.value, "stderr": est.stderr,
                   "runs": est.runs, "analytic": est.analytic, "z_score": est.z_score,
                   **est.details}
        write_json(_out(args, "mc_p_up.json"), payload, meta)
        print(f"p_up({args.n_b},{args.n_a}) = {est.value:.6f} +/- {est.stderr:.6f} "
              f"(analytic {est.analytic:.6f}, z = {est.z_score:+.2f})")
        return OK
    if horizon == 0 or args.changes == 0:
        path = sim.PricePath(np.empty(0), np.empty(0), np.empty((0, 2), dtype=np.int64),
                             model.delta, 0.0, int(args.seed), 0, horizon)
        log = None
    else:
        path = sim.simulate_path(cfg)
        log = sim.simulate_event_log(cfg, args.events) if args.events > 0 else None
    sim.write_price_path(path, _out(args, "path.csv"), meta)
    if log is not None:
        if args.changes is not None:
            keep = log.period < args.changes
            log = _slice_log(log, keep)
        sim.write_event_log(log, _out(args, "events.csv"), meta)
    else:
        with open(_out(args, "events.csv"), "w") as fh:
            _csv_header(fh, meta)
            fh.write("time_ms,side,event,q_b,q_a,price_change\n")
    print(f"{path.n_changes} price changes written to {_out(args, 'path.csv')}")
    return OK


def _slice_log(log, keep):
    from dataclasses import replace

    arrays = {f.name: getattr(log, f.name)[keep] for f in fields(log)
              if isinstance(getattr(log, f.name), np.ndarray)}
    return replace(log, **arrays)


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------

def cmd_calibrate(args):
    families = tuple(args.families.split(","))
    unknown = set(families) - set(cal.FITTERS)
    if unknown:
        raise InputError(f"unknown families {sorted(unknown)}")
    try:
        if args.event_log:
            stream = cal.read_event_log(args.event_log)
            parsed = None
            source = {"event_log": os.path.basename(args.event_log)}
        else:
            if args.messages is None:
                raise InputError("give --messages (LOBSTER) or --event-log")
            parsed = cal.parse_messages(args.messages, args.orderbook, sort=args.sort)
            stream = cal.classify_events(parsed, include_hidden=args.include_hidden)
            source = {"messages": os.path.basename(args.messages),
                      "orderbook": None if args.orderbook is None
                      else os.path.basename(args.orderbook)}
    except cal.CalibrationError as exc:
        raise InputError(str(exc)) from exc
    try:
        report = cal.calibrate(stream, parsed, families, censoring=not args.no_censoring)
    except cal.CalibrationError as exc:
        raise InputError(str(exc)) from exc
    run_config = {"cmd": "calibrate", "source": source, "families": families,
                  "include_hidden": args.include_hidden, "censoring": not args.no_censoring,
                  "digest": _file_digest(args.event_log or args.messages)}
    meta = _meta(args, run_config)
    report.write_json(_out(args, "calibration.json"), meta)
    report.write_table(_out(args, "calibration.csv"), meta)
    if parsed is not None and parsed.errors:
        print(f"{len(parsed.errors)} malformed line(s) skipped:")
        for line, msg in parsed.errors[:20]:
            print(f"  line {line}: {msg}")
    for side in ("bid", "ask"):
        P = getattr(report, side).transitions.P
        print(f"{side}: P(1,1)={P[(1, 1)]:.4f} P(-1,-1)={P[(-1, -1)]:.4f}")
    if report.unestimable:
        print(f"unestimable buckets: {report.unestimable}", file=sys.stderr)
        return DEGRADED
    return OK


def _file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------

def cmd_validate(args):
    tol, acceptance = parse_tolerances(args.tol)
    scale = val.FAST if args.fast else val.FULL
    names = args.checks.split(",") if args.checks else list(val.CHECKS)
    unknown = [n for n in names if n not in val.CHECKS]
    if unknown:
        raise InputError(f"unknown checks {unknown}; known: {list(val.CHECKS)}")
    with config.using(tol):
        results = val.run_checks(names, scale, acceptance, args.seed,
                                 progress=lambda r: print(r.line(), flush=True))
    run_config = {"cmd": "validate", "scale": scale.name, "checks": names,
                  "overrides": acceptance, "tolerances": tol.__dict__}
    meta = _meta(args, run_config)
    payload = {"scale": scale.__dict__, "passed": all(r.passed for r in results),
               "checks": [r.to_dict() for r in results]}
    if args.out:
        # wall times differ between runs; keep them out of the byte-stable file
        stable = dict(payload, checks=[{k: v for k, v in c.items() if k != "seconds"}
                                       for c in payload["checks"]])
        for c in stable["checks"]:
            c["measured"] = {k: v for k, v in c["measured"].items() if k != "within_budget"}
        write_json(_out(args, "validation.json"), stable, meta)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"failed checks: {', '.join(failed)}", file=sys.stderr)
        return DEGRADED
    return OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(args):
    """Plot-ready tables: survival curves with asymptotes, p_up grid, sojourn laws."""
    model = load_model(args.spec)
    tol, _ = parse_tolerances(args.tol)
    run_config = {"cmd": "report", "model": model.to_dict(), "n_max": args.n_max,
                  "points": args.points}
    meta = _meta(args, run_config)
    degraded = False
    with config.using(tol):
        with open(_out(args, "survival_curves.csv"), "w", newline="") as fh:
            _csv_header(fh, meta)
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["side", "n", "t", "survival", "asymptote", "confidence_flag"])
            for side, k in (("ask", model.ask), ("bid", model.bid)):
                law = dep.classify_tail(k)
                t = _time_grid(k, args.points)
                for n in range(1, args.n_max + 1):
                    r = dep.sigma_survival(k, t, n)
                    degraded |= r.any_low_confidence
                    asym = law.survival_asymptote(t, n)
                    for ti, s, a, lc in zip(t, r.value, asym, r.low_confidence):
                        w.writerow([side, n, repr(float(ti)), repr(float(s)), repr(float(a)),
                                    "low" if lc else "ok"])
        table = pr.p1_up_table(model.bid, model.ask, n_max=args.n_max)
        degraded |= bool(np.any(table.low_confidence))
        with open(_out(args, "p_up_grid.csv"), "w", newline="") as fh:
            _csv_header(fh, meta)
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n_b"] + [f"n_a={j}" for j in range(1, args.n_max + 1)])
            for i in range(args.n_max):
                w.writerow([i + 1] + [f"{table.values[i, j]:.10f}" for j in range(args.n_max)])
        params = pr.chain_params(model.bid, model.ask, model.f, model.f_tilde, model.delta,
                                 with_means=False)
        t = np.geomspace(1e-2, 1e3, args.points) * max(dep.characteristic_time(model.ask),
                                                        dep.characteristic_time(model.bid))
        up, down = params.sojourn_cdf(t, 1), params.sojourn_cdf(t, -1)
        with open(_out(args, "sojourn_cdf.csv"), "w", newline="") as fh:
            _csv_header(fh, meta)
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "F_after_up", "F_after_down"])
            for row in zip(t, up, down):
                w.writerow([repr(float(x)) for x in row])
        summary = {"bid_tail": dep.classify_tail(model.bid).tail_class,
                   "ask_tail": dep.classify_tail(model.ask).tail_class,
                   "chain": params.to_dict()}
        write_json(_out(args, "summary.json"), summary, meta)
    print(f"report written to {args.out}")
    return DEGRADED if degraded else OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--spec", help="JSON model specification")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    common.add_argument("--samples", type=int, default=100_000,
                        help="Monte Carlo sample size (default: 100000)")
    common.add_argument("--horizon", type=float, default=None,
                        help="simulation horizon in clock time (ms)")
    common.add_argument("--fast", action="store_true", help="reduced sizes for validate")
    common.add_argument("--workers", type=int, default=1, help="worker processes (default: 1)")
    common.add_argument("--tol", action="append", metavar="KEY=VALUE",
                        help="tolerance override, e.g. inversion=1e-9 or ks.max_distance=0.005")

    parser = argparse.ArgumentParser(prog="semilob", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"semilob {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", parents=[common], help="depletion laws, price chain, diffusion")
    a.add_argument("--n-max", type=int, default=5, help="largest queue size tabulated")
    a.add_argument("--points", type=int, default=25, help="time-grid points per curve")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("simulate", parents=[common], help="price paths, event logs, Monte Carlo")
    s.add_argument("--changes", type=int, default=None, help="stop after this many price moves")
    s.add_argument("--events", type=int, default=1_000_000,
                   help="maximum rows of the event log (0: no log)")
    s.add_argument("--mc", choices=["p_up"], help="Monte Carlo estimate instead of a path")
    s.add_argument("--n-b", type=int, default=1)
    s.add_argument("--n-a", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("calibrate", parents=[common], help="fit a model to message data")
    c.add_argument("--messages", help="LOBSTER message file")
    c.add_argument("--orderbook", help="matching LOBSTER orderbook file (optional)")
    c.add_argument("--event-log", help="simulator event log instead of LOBSTER files")
    c.add_argument("--families", default="weibull,gamma,exponential")
    c.add_argument("--include-hidden", action="store_true", help="count hidden executions")
    c.add_argument("--sort", action="store_true", help="sort messages by time before use")
    c.add_argument("--no-censoring", action="store_true",
                   help="ignore waits cut short by price changes (biased; for comparison)")
    c.set_defaults(func=cmd_calibrate)

    v = sub.add_parser("validate", parents=[common], help="run the acceptance checks")
    v.add_argument("--checks", help=f"comma-separated subset of {','.join(val.CHECKS)}")
    v.set_defaults(func=cmd_validate, out=None)

    r = sub.add_parser("report", parents=[common], help="plot-ready tables")
    r.add_argument("--n-max", type=int, default=5)
    r.add_argument("--points", type=int, default=40)
    r.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.seed < 0:
        print("error: --seed must be nonnegative", file=sys.stderr)
        return INPUT_ERROR
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return INPUT_ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
