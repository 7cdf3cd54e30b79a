"""Command-line interface.

Exit status: 0 success, 2 usage error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from datetime import timedelta
from pathlib import Path

import numpy as np
import yaml

from . import io
from .baselines import isc_day, osd_day
from .control import DEFAULT_BAND, derive_control, select_band
from .domain import STEPS_PER_INTERVAL, SensorDay, SpeedRegimes
from .exceptions import DataError, NumericError
from .filter import EkfParams, StreamingEstimator, run_day
from .gainnet import GainNetConfig
from .measurement import estimate_regimes
from .metrics import DEFAULT_PEAKS, compute_metrics, format_mape
from .simulator import scenario_from_dict, scenario_to_dict, simulate_day
from .training import TrainConfig, train

log = logging.getLogger("queuenet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _band(text):
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected LOW,HIGH in Hz, e.g. 6.94e-05,0.00417")
    return lo, hi


def _peaks(text):
    out = {}
    for item in text.split(","):
        name, _, span = item.partition("=")
        start, _, end = span.partition("-")
        if not (name and start and end):
            raise argparse.ArgumentTypeError("expected name=HH:MM-HH:MM[,...]")
        out[name] = (start, end)
    return out


def _counts_only_day(counts_path) -> SensorDay:
    ts, a, d = io.read_counts(counts_path)
    n_int = -(-len(ts) // STEPS_PER_INTERVAL)
    return SensorDay(cum_inflow=a, cum_outflow=d, afcd_speeds=np.full((1, n_int), np.nan), t0=ts[0])


def _resolve_regimes(section_regimes, extra, day=None):
    if section_regimes is not None:
        return section_regimes
    if extra and extra.get("regimes"):
        return SpeedRegimes(**extra["regimes"])
    if day is not None:
        return estimate_regimes(day.afcd_speeds)
    raise DataError("no speed regimes: add v_free/v_jam to the section config")


def cmd_simulate(args):
    geometry = regimes = None
    if args.section:
        geometry, regimes = io.read_section_config(args.section)
    raw = io.read_yaml(args.scenario) if args.scenario else {}
    try:
        scenario = scenario_from_dict(raw, geometry, regimes)
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid scenario: {exc}") from exc
    out = Path(args.out)
    for k in range(args.days):
        seed = args.seed + k
        sim = simulate_day(scenario, seed)
        target = out if args.days == 1 else out / f"day_{seed:04d}"
        io.save_day(target, sim.day)
        echo = {"seed": seed, "scenario": scenario_to_dict(scenario),
                "section": io.geometry_to_dict(scenario.geometry, scenario.regimes),
                "true_lambda_c": scenario.lambda_c}
        (target / "scenario.yaml").write_text(yaml.safe_dump(echo, sort_keys=False), encoding="utf-8")
        io.write_section_config(target / "section.yaml", scenario.geometry, scenario.regimes)
    print(f"wrote {args.days} day(s) to {out}")


def cmd_fit_regimes(args):
    samples = [io.read_afcd(p)[1].ravel() for p in args.afcd]
    regimes = estimate_regimes(np.concatenate(samples), bin_width=args.bin_width,
                               min_separation=args.min_separation, histogram_path=args.histogram)
    print(f"v_free={regimes.v_free:.4f} v_jam={regimes.v_jam:.4f}")
    if args.out:
        if not args.section:
            raise DataError("--out needs --section to copy the geometry from")
        geometry, _ = io.read_section_config(args.section)
        io.write_section_config(args.out, geometry, regimes)


def cmd_derive_control(args):
    geometry, _ = io.read_section_config(args.section)
    day = _counts_only_day(args.counts)
    series = derive_control(day, geometry, mode=args.mode, band=args.band)
    io.write_table(args.out, ["t_iso", "u_m", "q_reconstructed_m"], [series.u, series.reconstructed_q],
                   day.timestamps())
    print(f"lambda_c={series.lambda_c[-1]:.6f} veh/s")


def cmd_train(args):
    manifest = io.read_manifest(args.manifest)
    section = args.section or manifest["section"]
    if section is None:
        raise DataError("no section config: pass --section or set 'section' in the manifest")
    geometry, regimes = io.read_section_config(section)
    train_days = io.load_manifest_days(manifest["train"], geometry.n_segments)
    val_days = io.load_manifest_days(manifest["validation"], geometry.n_segments)
    regimes = regimes or estimate_regimes(np.concatenate([d.afcd_speeds.ravel() for d in train_days]))
    band = args.band
    if args.select_band:
        band, scores = select_band(train_days, geometry)
        log.info("band selection scores by low-cut period (h): %s", scores)
    cfg = TrainConfig(window_steps=args.window_steps, lr=args.lr, epochs=args.epochs, seed=args.seed,
                      windows_per_batch=args.batch_windows, patience=args.patience,
                      use_control=args.variant == "qnet")
    result = train(train_days, geometry, regimes, cfg, val_days, net_config=GainNetConfig(), band=band)
    io.save_model(args.out, result.net, variant=args.variant, band=list(band),
                  regimes={"v_free": regimes.v_free, "v_jam": regimes.v_jam},
                  train_segments=geometry.n_segments, best_epoch=result.best_epoch)
    metrics_path = args.metrics or str(Path(args.out).with_suffix("")) + "_metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_rmse", "val_rmse"])
        for epoch, tr, va in result.curves:
            w.writerow([epoch, repr(tr), repr(va)])
    if result.aborted:
        print(f"training aborted: {result.aborted}; kept epoch {result.best_epoch}", file=sys.stderr)
        raise NumericError(result.aborted)
    print(f"best epoch {result.best_epoch} val_rmse={result.best_val_rmse:.3f} in {result.seconds:.1f} s")


def _load_for_inference(args, geometry, section_regimes, day):
    if args.variant == "qekf":
        return None, _resolve_regimes(section_regimes, None, day), tuple(args.band or DEFAULT_BAND), "qekf"
    if not args.checkpoint:
        raise DataError(f"variant {args.variant!r} needs --checkpoint")
    net, extra = io.load_model(args.checkpoint)
    variant = args.variant or extra.get("variant", "qnet")
    band = tuple(args.band or extra.get("band", DEFAULT_BAND))
    return net, _resolve_regimes(section_regimes, extra, day), band, variant


def cmd_estimate(args):
    geometry, section_regimes = io.read_section_config(args.section)
    day = io.load_day(args.counts, args.afcd, None, geometry.n_segments)
    net, regimes, band, variant = _load_for_inference(args, geometry, section_regimes, day)
    try:
        trace = run_day(day, geometry, regimes, variant, net=net, ekf=EkfParams(), mode=args.mode, band=band)
    except NumericError as exc:
        partial = getattr(exc, "trace", None)
        if partial is not None:
            _write_estimate(args.out, day, partial)
        raise
    _write_estimate(args.out, day, trace)
    if args.trace:
        gains = trace.gains.reshape(trace.gains.shape[0], -1)
        cols = [trace.control_m] + [trace.predicted_speeds[:, i] for i in range(trace.predicted_speeds.shape[1])]
        cols += [gains[:, j] for j in range(gains.shape[1])]
        header = ["t_iso", "u_m"] + [f"y_pred_{i}" for i in range(trace.predicted_speeds.shape[1])]
        header += [f"gain_{j}" for j in range(gains.shape[1])]
        io.write_table(args.trace, header, cols, day.timestamps())
    print(f"wrote {trace.posterior_m.size} estimates to {args.out}")


def _write_estimate(path, day, trace):
    n = trace.posterior_m.size
    io.write_table(path, ["t_iso", "prior_m", "posterior_m"], [trace.prior_m, trace.posterior_m],
                   day.timestamps()[:n])


def cmd_evaluate(args):
    t_truth, truth = io.read_truth(args.truth)
    est = {}
    for item in args.estimate:
        name, _, path = item.rpartition("=")
        name = name or Path(path).stem
        ts, cols = _read_estimate(path)
        if ts != t_truth:
            raise DataError(f"{path} is not aligned with {args.truth}")
        est[name] = cols
    day = SensorDay(cum_inflow=np.zeros(len(t_truth)), cum_outflow=np.zeros(len(t_truth)),
                    afcd_speeds=np.zeros((1, -(-len(t_truth) // STEPS_PER_INTERVAL))), t0=t_truth[0])
    if args.baselines:
        if not (args.afcd and args.section):
            raise DataError("--baselines needs --afcd and --section")
        geometry, _ = io.read_section_config(args.section)
        _, speeds = io.read_afcd(args.afcd, geometry.n_segments)
        n = len(t_truth)
        speeds = speeds[:, : -(-n // STEPS_PER_INTERVAL)]
        ref = SensorDay(cum_inflow=np.zeros(n), cum_outflow=np.zeros(n), afcd_speeds=speeds, t0=t_truth[0])
        est["OSD"] = osd_day(ref, geometry)
        est["ISC"] = isc_day(ref, geometry)
    report = compute_metrics(truth, est, args.peaks, day=day)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "scope", "rmse_m", "mae_m", "mape_pct"])
        for method, scope, m in report.rows():
            w.writerow([method, scope, repr(m.rmse_m), repr(m.mae_m), format_mape(m.mape_pct)])
    if args.errors:
        io.write_table(args.errors, ["t_iso"] + [f"abs_err_{k}" for k in est],
                       [np.abs(np.asarray(v) - truth) for v in est.values()], t_truth)
    print(report.table())


def _read_estimate(path):
    ts, post = [], []
    for line, row in io._rows(path, ["t_iso", "prior_m", "posterior_m"]):
        ts.append(io._parse_time(row[0], path, line))
        post.append(io._float(row[2], path, line))
    return ts, np.array(post)


def _stream_rows(counts_path, afcd_path):
    """Merge the two CSV streams in arrival order without reading ahead of the clock."""
    def counts():
        for line, row in io._rows(counts_path, io.COUNTS_HEADER):
            yield (io._parse_time(row[0], counts_path, line), io._float(row[1], counts_path, line),
                   io._float(row[2], counts_path, line))

    def afcd():
        for line, row in io._rows(afcd_path, io.AFCD_HEADER):
            yield io._parse_time(row[0], afcd_path, line), int(row[1]), io._float(row[2], afcd_path, line, True)

    pending = None
    speeds = afcd()
    for t, a, d in counts():
        batch = {}
        if pending is not None and pending[0] <= t:
            batch[pending[1]] = pending[2]
            pending = None
        if pending is None:
            for row in speeds:
                if row[0] > t:
                    pending = row
                    break
                if row[0] == t:
                    batch[row[1]] = row[2]
        yield t, a, d, batch


def cmd_realtime(args):
    geometry, section_regimes = io.read_section_config(args.section)
    net, regimes, band, variant = _load_for_inference(args, geometry, section_regimes, None)
    stream = StreamingEstimator(geometry, regimes, variant, net=net, ekf=EkfParams(), band=band)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["t_iso", "prior_m", "posterior_m"])
        t_prev = None
        for t, a, d, batch in _stream_rows(args.counts, args.afcd):
            if t_prev is not None and t - t_prev != timedelta(seconds=10):
                raise DataError(f"count stream is not at a 10 s cadence near {io.iso(t)}")
            t_prev = t
            speeds = None
            if batch:
                speeds = np.full(geometry.n_segments, np.nan)
                for seg, v in batch.items():
                    if not 0 <= seg < geometry.n_segments:
                        raise DataError(f"segment index {seg} out of range")
                    speeds[seg] = v
            prior, post = stream.push(a, d, speeds)
            w.writerow([io.iso(t), repr(prior), repr(post)])
            out.flush()
    finally:
        if out is not sys.stdout:
            out.close()


def build_parser():
    p = argparse.ArgumentParser(prog="queuenet", description="Queue-length estimation from counts and aFCD.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate synthetic days with ground truth")
    s.add_argument("--scenario", help="YAML scenario overrides")
    s.add_argument("--section", help="section config (geometry, optional regimes)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--days", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit-regimes", parents=[common], help="estimate free-flow and jam speeds from aFCD")
    s.add_argument("--afcd", nargs="+", required=True)
    s.add_argument("--section")
    s.add_argument("--bin-width", type=float, default=1.0)
    s.add_argument("--min-separation", type=float, default=3.0)
    s.add_argument("--histogram", help="write the speed histogram CSV here")
    s.add_argument("--out", help="write a section config with the fitted regimes")
    s.set_defaults(func=cmd_fit_regimes)

    s = sub.add_parser("derive-control", parents=[common], help="control input from cumulative counts")
    s.add_argument("--counts", required=True)
    s.add_argument("--section", required=True)
    s.add_argument("--mode", choices=("offline", "online"), default="offline")
    s.add_argument("--band", type=_band, default=DEFAULT_BAND)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_derive_control)

    s = sub.add_parser("train", parents=[common], help="train the gain network")
    s.add_argument("--manifest", required=True)
    s.add_argument("--section")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--metrics", help="metrics CSV path")
    s.add_argument("--variant", choices=("qnet", "qnet_no_u"), default="qnet")
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--window-steps", type=int, default=60)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--batch-windows", type=int, default=8)
    s.add_argument("--patience", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    band = s.add_mutually_exclusive_group()
    band.add_argument("--band", type=_band, default=DEFAULT_BAND)
    band.add_argument("--select-band", action="store_true", help="pick the low cutoff on the training days")
    s.set_defaults(func=cmd_train)

    for name, func, helptext in (("estimate", cmd_estimate, "filter one day"),
                                 ("realtime", cmd_realtime, "stream a day row by row")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--counts", required=True)
        s.add_argument("--afcd", required=True)
        s.add_argument("--section", required=True)
        s.add_argument("--checkpoint")
        s.add_argument("--variant", choices=("qnet", "qnet_no_u", "qekf"))
        s.add_argument("--band", type=_band, help="override the checkpoint's band")
        s.add_argument("--out", required=name == "estimate")
        if name == "estimate":
            s.add_argument("--mode", choices=("offline", "online"), default="offline")
            s.add_argument("--trace", help="per-step control, predicted speeds and gains")
        s.set_defaults(func=func)

    s = sub.add_parser("evaluate", parents=[common], help="error metrics against ground truth")
    s.add_argument("--truth", required=True)
    s.add_argument("--estimate", nargs="+", required=True, metavar="[NAME=]PATH")
    s.add_argument("--baselines", action="store_true", help="add OSD and ISC columns")
    s.add_argument("--afcd")
    s.add_argument("--section")
    s.add_argument("--peaks", type=_peaks, default=DEFAULT_PEAKS, help="name=HH:MM-HH:MM,...")
    s.add_argument("--errors", help="per-step absolute errors CSV")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "variant", None) is None and args.command in ("estimate", "realtime") and not args.checkpoint:
        args.variant = "qekf"
    try:
        args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except BrokenPipeError:
        # downstream reader closed early, e.g. `| head`
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
