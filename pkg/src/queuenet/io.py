"""CSV, section-config, manifest and checkpoint file handling."""

from __future__ import annotations

import csv
import math
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np
import yaml

from . import neural as nn
from .domain import STEP_S, STEPS_PER_INTERVAL, SectionGeometry, SensorDay, SpeedRegimes
from .exceptions import AlignmentError, CheckpointError, DataError
from .gainnet import GainNet, GainNetConfig

COUNTS_HEADER = ["t_iso", "cum_inflow", "cum_outflow"]
AFCD_HEADER = ["t_iso", "segment_index", "speed_mps"]
TRUTH_HEADER = ["t_iso", "queue_m"]


def iso(t: datetime) -> str:
    return t.isoformat(timespec="seconds")


def _parse_time(text, path, line):
    try:
        return datetime.fromisoformat(text.strip())
    except ValueError as exc:
        raise DataError(f"{path}:{line}: bad timestamp {text!r}") from exc


def _rows(path, header):
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or [c.strip() for c in first] != header:
            raise DataError(f"{path}: expected header {','.join(header)}, got {first}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            yield line, row


def _float(text, path, line, allow_empty=False):
    text = text.strip()
    if text == "" and allow_empty:
        return math.nan
    try:
        return float(text)
    except ValueError as exc:
        raise DataError(f"{path}:{line}: not a number: {text!r}") from exc


def write_table(path, header, columns, timestamps):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i, t in enumerate(timestamps):
            w.writerow([iso(t)] + [_fmt(c[i]) for c in columns])


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float) and math.isnan(v):
        return ""
    return repr(float(v))


def write_counts(path, day: SensorDay):
    write_table(path, COUNTS_HEADER, [day.cum_inflow, day.cum_outflow], day.timestamps())


def read_counts(path):
    """Return ``(timestamps, cum_inflow, cum_outflow)``."""
    ts, a, d = [], [], []
    for line, row in _rows(path, COUNTS_HEADER):
        ts.append(_parse_time(row[0], path, line))
        a.append(_float(row[1], path, line))
        d.append(_float(row[2], path, line))
    if not ts:
        raise DataError(f"{path}: no rows")
    _check_cadence(ts, STEP_S, path)
    return ts, np.array(a), np.array(d)


def write_truth(path, day: SensorDay):
    if day.ground_truth_m is None:
        raise DataError("day has no ground truth")
    write_table(path, TRUTH_HEADER, [day.ground_truth_m], day.timestamps())


def read_truth(path):
    ts, q = [], []
    for line, row in _rows(path, TRUTH_HEADER):
        ts.append(_parse_time(row[0], path, line))
        q.append(_float(row[1], path, line))
    return ts, np.array(q)


def write_afcd(path, day: SensorDay):
    interval = timedelta(seconds=day.step_s * STEPS_PER_INTERVAL)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(AFCD_HEADER)
        for j in range(day.afcd_speeds.shape[1]):
            t = iso(day.t0 + j * interval)
            for i in range(day.n_segments):
                v = day.afcd_speeds[i, j]
                w.writerow([t, i, "" if np.isnan(v) else repr(float(v))])


def read_afcd(path, n_segments=None):
    """Return ``(interval_starts, speeds (N, K))``; absent rows and empty fields become NaN."""
    cells = {}
    for line, row in _rows(path, AFCD_HEADER):
        t = _parse_time(row[0], path, line)
        try:
            seg = int(row[1])
        except ValueError as exc:
            raise DataError(f"{path}:{line}: bad segment index {row[1]!r}") from exc
        if seg < 0 or (n_segments is not None and seg >= n_segments):
            raise DataError(f"{path}:{line}: segment index {seg} out of range")
        cells[(t, seg)] = _float(row[2], path, line, allow_empty=True)
    if not cells:
        raise DataError(f"{path}: no rows")
    times = sorted({t for t, _ in cells})
    _check_cadence(times, STEP_S * STEPS_PER_INTERVAL, path)
    n = n_segments if n_segments is not None else 1 + max(s for _, s in cells)
    col = {t: j for j, t in enumerate(times)}
    speeds = np.full((n, len(times)), np.nan)
    for (t, s), v in cells.items():
        speeds[s, col[t]] = v
    return times, speeds


def _check_cadence(ts, step, path):
    if len(ts) > 1:
        gaps = {(b - a).total_seconds() for a, b in zip(ts, ts[1:])}
        if gaps != {float(step)}:
            raise DataError(f"{path}: expected a regular {step} s cadence, found gaps {sorted(gaps)[:5]}")


def align(cum_inflow, cum_outflow, afcd, truth=None):
    """Truncate counts and aFCD to whole 60 s intervals.

    Lengths may disagree by at most one trailing partial interval.
    """
    steps = len(cum_inflow)
    full = steps // STEPS_PER_INTERVAL
    k = afcd.shape[1]
    if k not in (full, full + 1):
        raise AlignmentError(
            f"{steps} count steps span {full} full intervals but aFCD has {k}; "
            "only one trailing partial interval is tolerated"
        )
    if full == 0:
        raise AlignmentError("less than one full 60 s interval of data")
    n = full * STEPS_PER_INTERVAL
    truth = None if truth is None else np.asarray(truth)[:n]
    return cum_inflow[:n], cum_outflow[:n], afcd[:, :full], truth


def load_day(counts_path, afcd_path, truth_path=None, n_segments=None) -> SensorDay:
    ts, a, d = read_counts(counts_path)
    t_int, speeds = read_afcd(afcd_path, n_segments)
    if t_int[0] != ts[0]:
        raise AlignmentError(f"counts start at {iso(ts[0])} but aFCD starts at {iso(t_int[0])}")
    truth = None
    if truth_path is not None:
        t_truth, truth = read_truth(truth_path)
        if len(t_truth) != len(ts) or t_truth[0] != ts[0]:
            raise AlignmentError("truth.csv must share the counts time grid")
    a, d, speeds, truth = align(a, d, speeds, truth)
    return SensorDay(cum_inflow=a, cum_outflow=d, afcd_speeds=speeds, t0=ts[0], ground_truth_m=truth)


def save_day(directory, day: SensorDay):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_counts(directory / "counts.csv", day)
    write_afcd(directory / "afcd.csv", day)
    if day.ground_truth_m is not None:
        write_truth(directory / "truth.csv", day)


def geometry_to_dict(geometry: SectionGeometry, regimes: SpeedRegimes = None) -> dict:
    out = {
        "section_id": geometry.section_id,
        "length_m": geometry.length_m,
        "lanes": geometry.lanes,
        "q_max_m": geometry.q_max_m,
        "segments": [float(geometry.segments[0][0])] + [float(b) for _, b in geometry.segments],
    }
    if regimes is not None:
        out.update(v_free=regimes.v_free, v_jam=regimes.v_jam)
    return out


def geometry_from_dict(cfg: dict):
    """``(SectionGeometry, SpeedRegimes | None)`` from a parsed section mapping.

    ``segments`` is either a boundary list ``[0, 120, 240, ...]`` or a list
    of ``[start, end]`` pairs.
    """
    missing = [k for k in ("length_m", "lanes", "q_max_m", "segments") if k not in cfg]
    if missing:
        raise DataError(f"section config lacks {', '.join(missing)}")
    segs = cfg["segments"]
    if segs and all(isinstance(s, (int, float)) for s in segs):
        if len(segs) < 2:
            raise DataError("segment boundary list needs at least two entries")
        pairs = list(zip(segs[:-1], segs[1:]))
    else:
        pairs = [tuple(s) for s in segs]
    try:
        geometry = SectionGeometry(
            length_m=float(cfg["length_m"]), lanes=int(cfg["lanes"]), segments=tuple(pairs),
            q_max_m=float(cfg["q_max_m"]), section_id=str(cfg.get("section_id", "section")),
        )
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid section config: {exc}") from exc
    regimes = None
    if "v_free" in cfg or "v_jam" in cfg:
        if not ("v_free" in cfg and "v_jam" in cfg):
            raise DataError("v_free and v_jam overrides must be given together")
        regimes = SpeedRegimes(v_free=float(cfg["v_free"]), v_jam=float(cfg["v_jam"]))
    return geometry, regimes


def read_yaml(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise DataError(f"{path}: expected a key-value mapping")
    return data


def read_section_config(path):
    return geometry_from_dict(read_yaml(path))


def write_section_config(path, geometry: SectionGeometry, regimes: SpeedRegimes = None):
    Path(path).write_text(yaml.safe_dump(geometry_to_dict(geometry, regimes), sort_keys=False), encoding="utf-8")


def read_manifest(path):
    """``{"section": Path | None, "train": [...], "validation": [...], "test": [...]}``.

    Each split lists day directories (holding counts.csv, afcd.csv, truth.csv)
    or mappings with explicit ``counts``/``afcd``/``truth`` paths, relative to
    the manifest.
    """
    path = Path(path)
    data = read_yaml(path)
    base = path.parent
    out = {"section": base / data["section"] if data.get("section") else None}
    for split in ("train", "validation", "test"):
        entries = data.get(split) or []
        days = []
        for e in entries:
            if isinstance(e, str):
                d = base / e
                days.append({"counts": d / "counts.csv", "afcd": d / "afcd.csv", "truth": d / "truth.csv"})
            elif isinstance(e, dict) and "counts" in e and "afcd" in e:
                days.append({k: base / v for k, v in e.items()})
            else:
                raise DataError(f"{path}: bad {split} entry {e!r}")
        out[split] = days
    if not out["train"]:
        raise DataError(f"{path}: manifest lists no training days")
    return out


def load_manifest_days(entries, n_segments):
    return [load_day(e["counts"], e["afcd"], e.get("truth"), n_segments) for e in entries]


def save_model(path, net: GainNet, **extra):
    nn.save_checkpoint(path, net.store, {"gain_net": net.config.to_dict()}, extra)


def load_model(path):
    """Rebuild a :class:`GainNet` from a checkpoint; returns ``(net, extra)``."""
    header, theta = nn.load_checkpoint(path)
    try:
        cfg = GainNetConfig(**header["config"]["gain_net"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: unusable network config: {exc}") from exc
    net = GainNet(cfg, seed=0)
    expected = {k: [off, list(shape)] for k, (off, shape) in net.store.slices.items()}
    if header["slices"] != expected:
        diff = sorted(set(map(str, header["slices"].items())) ^ set(map(str, expected.items())))
        raise CheckpointError(f"{path}: slice layout does not match its config: {diff[:4]}")
    net.store.set_flat(theta)
    return net, header.get("extra", {})

