"""Two-objective front geometry (both axes are costs: smaller is better)."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

FRONT_FIELDS = ("scheme", "omega_t", "omega_e", "delay_s", "energy_j",
                "delay_per_mbit", "energy_per_mbit")
HV_FIELDS = ("scheme", "hv", "hv_normalized", "ref_delay", "ref_energy")


@dataclass(frozen=True)
class PerfPoint:
    delay: float
    energy: float
    preference: Optional[tuple] = None
    label: str = ""

    def __post_init__(self):
        for v in (self.delay, self.energy):
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"performance coordinates must be finite and >= 0, got {v}")


def dominates(a: PerfPoint, b: PerfPoint) -> bool:
    return (a.delay <= b.delay and a.energy <= b.energy
            and (a.delay < b.delay or a.energy < b.energy))


def pareto_front(points: Sequence[PerfPoint]) -> list[PerfPoint]:
    """Undominated subset in ascending delay (ties keep input order).

    Exact duplicates with the same label collapse to their first occurrence.
    """
    pts = list(points)
    if not pts:
        raise ValueError("cannot extract a front from no points")
    seen = set()
    unique = []
    for p in pts:
        key = (p.delay, p.energy, p.label)
        if key not in seen:
            seen.add(key)
            unique.append(p)
    order = sorted(range(len(unique)), key=lambda i: (unique[i].delay, unique[i].energy, i))
    front = []
    best_energy = math.inf
    best_delay = None
    for i in order:
        p = unique[i]
        if p.energy < best_energy:
            front.append(p)
            best_energy = p.energy
            best_delay = p.delay
        elif p.energy == best_energy and p.delay == best_delay:
            front.append(p)  # identical coordinates under a different label
    return sorted(front, key=lambda p: p.delay)


def hypervolume(front: Iterable[PerfPoint], ref: PerfPoint) -> float:
    """Area dominated by ``front`` and bounded by ``ref`` (rectangle sweep).

    Points that do not dominate ``ref`` are dropped with a warning.
    """
    pts = list(front)
    keep = [p for p in pts if dominates(p, ref)]
    if len(keep) < len(pts):
        warnings.warn(f"{len(pts) - len(keep)} point(s) do not dominate the reference "
                      "and were excluded", RuntimeWarning, stacklevel=2)
    keep.sort(key=lambda p: (p.delay, p.energy))
    area = 0.0
    level = ref.energy
    for p in keep:
        if p.energy < level:
            area += (ref.delay - p.delay) * (level - p.energy)
            level = p.energy
    return area


def reference_point(fronts: Sequence[Sequence[PerfPoint]]) -> PerfPoint:
    pts = [p for f in fronts for p in f]
    if not pts:
        raise ValueError("reference point needs at least one point")
    return PerfPoint(max(p.delay for p in pts), max(p.energy for p in pts), None, "reference")


def per_mbit(point: PerfPoint, mean_size_bits: float) -> PerfPoint:
    if mean_size_bits <= 0:
        raise ValueError("mean task size must be positive")
    k = mean_size_bits / 1e6
    return replace(point, delay=point.delay / k, energy=point.energy / k)


def write_front_csv(path, points: Sequence[PerfPoint], mean_size_bits: float):
    """One row per evaluated point; ``omega_*`` hold the scheme's sweep parameter."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FRONT_FIELDS)
        for p in points:
            q = per_mbit(p, mean_size_bits)
            om = p.preference if p.preference is not None else ("", "")
            w.writerow([p.label, _fmt(om[0]), _fmt(om[1]), _fmt(p.delay), _fmt(p.energy),
                        _fmt(q.delay), _fmt(q.energy)])


def read_front_csv(path) -> list[PerfPoint]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and tuple(rows[0].keys()) != FRONT_FIELDS:
        raise ValueError(f"{path}: columns {tuple(rows[0].keys())} do not match the front schema")
    out = []
    for r in rows:
        pref = None
        if r["omega_t"] != "":
            pref = (float(r["omega_t"]), float(r["omega_e"]))
        out.append(PerfPoint(float(r["delay_s"]), float(r["energy_j"]), pref, r["scheme"]))
    return out


def write_hv_csv(path, fronts: dict, ref: PerfPoint):
    """``fronts`` maps scheme name to its front."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HV_FIELDS)
        box = ref.delay * ref.energy
        for scheme, front in fronts.items():
            hv = hypervolume(front, ref)
            w.writerow([scheme, _fmt(hv), _fmt(hv / box if box > 0 else 0.0),
                        _fmt(ref.delay), _fmt(ref.energy)])


def _fmt(v) -> str:
    return repr(float(v)) if v != "" else ""
