"""DVH statistics, piecewise-linear plan scoring and the anchored reward.

A scorecard is a weighted list of per-structure metrics. Each metric maps a
DVH statistic of a candidate dose through a piecewise-linear score table.
Hard constraints add a squared hinge penalty, and an optional reference dose
adds an MAE anchor.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np

KINDS = ("dose_at_volume", "volume_at_dose", "mean_dose")
HARD_OPS = (">=", "<=")


class ScorecardError(ValueError):
    pass


# ---------------------------------------------------------------------------
# DVH statistics

def _masked(dose, mask):
    dose = np.asarray(dose, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if dose.shape != mask.shape:
        raise ScorecardError(f"dose shape {dose.shape} does not match mask shape {mask.shape}")
    vals = dose[mask]
    if vals.size == 0:
        raise ScorecardError("empty structure mask")
    return vals


def _rank_for_fraction(v_percent, n):
    """Smallest k with ``100 k >= v n``."""
    k = max(1, math.ceil(v_percent * n / 100.0))
    while k > 1 and (k - 1) * 100.0 >= v_percent * n:
        k -= 1
    while k < n and k * 100.0 < v_percent * n:
        k += 1
    return min(k, n)


def dose_at_volume(dose, mask, v_percent):
    """Highest dose received by at least ``v_percent`` of the structure."""
    if not 0.0 < v_percent <= 100.0:
        raise ScorecardError(f"v_percent must lie in (0, 100], got {v_percent}")
    vals = _masked(dose, mask)
    k = _rank_for_fraction(v_percent, vals.size)
    return float(np.partition(vals, vals.size - k)[vals.size - k])


def volume_at_dose(dose, mask, d_gy):
    """Fraction of the structure receiving at least ``d_gy``."""
    if d_gy < 0:
        raise ScorecardError(f"d_gy must be non-negative, got {d_gy}")
    vals = _masked(dose, mask)
    return float(np.count_nonzero(vals >= d_gy)) / vals.size


def _exact_mean(vals):
    # exact integer sum of the binary expansions, then one correctly rounded division
    mant, expo = np.frexp(vals)
    mant = (mant * 2.0**53).astype(np.int64)
    expo = expo - 53
    lo = int(expo.min())
    total = sum(m << (e - lo) for m, e in zip(mant.tolist(), expo.tolist()))
    if lo >= 0:
        return float(Fraction(total << lo, vals.size))
    return float(Fraction(total, vals.size << -lo))


def mean_dose(dose, mask):
    """Arithmetic mean over the structure, correctly rounded."""
    return _exact_mean(_masked(dose, mask))


# ---------------------------------------------------------------------------
# spec types

@dataclass(frozen=True)
class MetricKind:
    kind: str
    param: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ScorecardError(f"unknown metric kind {self.kind!r}")
        if self.kind == "dose_at_volume" and not (self.param is not None and 0 < self.param <= 100):
            raise ScorecardError(f"dose_at_volume needs v_percent in (0, 100], got {self.param}")
        if self.kind == "volume_at_dose" and not (self.param is not None and self.param >= 0):
            raise ScorecardError(f"volume_at_dose needs d_gy >= 0, got {self.param}")

    def evaluate(self, dose, mask):
        if self.kind == "dose_at_volume":
            return dose_at_volume(dose, mask, self.param)
        if self.kind == "volume_at_dose":
            return volume_at_dose(dose, mask, self.param)
        return mean_dose(dose, mask)

    @property
    def label(self):
        if self.kind == "dose_at_volume":
            return f"D{self.param:g}"
        if self.kind == "volume_at_dose":
            return f"V{self.param:g}Gy"
        return "Dmean"


@dataclass(frozen=True)
class HardConstraint:
    op: str
    threshold: float

    def __post_init__(self):
        if self.op not in HARD_OPS:
            raise ScorecardError(f"hard constraint op must be one of {HARD_OPS}, got {self.op!r}")

    def violation(self, value):
        gap = self.threshold - value if self.op == ">=" else value - self.threshold
        return max(0.0, gap)


@dataclass(frozen=True)
class StructureMetric:
    structure: str
    kind: MetricKind
    breakpoints: tuple
    weight: float = 1.0
    hard: HardConstraint | None = None

    def __post_init__(self):
        bps = tuple((float(v), float(s)) for v, s in self.breakpoints)
        if len(bps) < 2:
            raise ScorecardError(f"{self.structure}: need at least two breakpoints")
        if any(b[0] <= a[0] for a, b in zip(bps, bps[1:])):
            raise ScorecardError(f"{self.structure}: breakpoints must be strictly increasing")
        if not all(np.isfinite(s) for _, s in bps):
            raise ScorecardError(f"{self.structure}: scores must be finite")
        if not (np.isfinite(self.weight) and self.weight >= 0):
            raise ScorecardError(f"{self.structure}: weight must be finite and >= 0")
        object.__setattr__(self, "breakpoints", bps)


@dataclass(frozen=True)
class ScorecardSpec:
    site: str
    rx_template_gy: float
    metrics: tuple
    note: str = ""

    def __post_init__(self):
        if not self.metrics:
            raise ScorecardError("scorecard has no metrics")
        if not self.rx_template_gy > 0:
            raise ScorecardError("rx_template_gy must be positive")
        object.__setattr__(self, "metrics", tuple(self.metrics))


def piecewise_score(value, breakpoints):
    """Linear interpolation through the breakpoints, clamped at both ends."""
    xs = [float(v) for v, _ in breakpoints]
    ys = [float(s) for _, s in breakpoints]
    return float(np.interp(value, xs, ys))


def is_target_structure(name):
    return name.lower().startswith("ptv")


def rescale_prescription(spec, case_rx):
    """Scale Gy-valued PTV thresholds by ``case_rx / rx_template_gy``.

    Dose-valued PTV metrics scale their breakpoints and hard thresholds; a
    PTV VolumeAtDose metric scales its dose level instead, since its
    breakpoints are volume fractions. OAR entries are left untouched.
    """
    if not case_rx > 0:
        raise ScorecardError(f"prescription must be positive, got {case_rx}")
    ratio = case_rx / spec.rx_template_gy
    if ratio == 1.0:
        return spec
    out = []
    for m in spec.metrics:
        if not is_target_structure(m.structure):
            out.append(m)
        elif m.kind.kind == "volume_at_dose":
            out.append(replace(m, kind=MetricKind(m.kind.kind, m.kind.param * ratio)))
        else:
            bps = tuple((v * ratio, s) for v, s in m.breakpoints)
            hard = None if m.hard is None else HardConstraint(m.hard.op, m.hard.threshold * ratio)
            out.append(replace(m, breakpoints=bps, hard=hard))
    return replace(spec, rx_template_gy=float(case_rx), metrics=tuple(out))


# ---------------------------------------------------------------------------
# reward

@dataclass
class RewardReport:
    entries: list
    r_raw: float
    hinge: float
    mae_anchor: float | None
    missing: list = field(default_factory=list)

    def anchored(self, w_hinge=1.0, w_mae=0.1):
        """Weighted score minus hinge and MAE penalties."""
        mae = self.mae_anchor or 0.0
        return self.r_raw - w_hinge * self.hinge - w_mae * mae

    def to_dict(self, w_hinge=1.0, w_mae=0.1):
        return {
            "r_raw": self.r_raw,
            "hinge": self.hinge,
            "mae_anchor": self.mae_anchor,
            "reward": self.anchored(w_hinge, w_mae),
            "missing": list(self.missing),
            "structures": self.entries,
        }


def structure_mask(case, name):
    """Boolean mask for ``ptv``, ``body``, ``oar`` (union) or ``oarK``."""
    key = name.lower()
    if key in ("ptv", "body"):
        return case.mask(key)
    if key == "oar":
        return case.oar_labels() > 0
    if key.startswith("oar") and key[3:].isdigit():
        return case.oar_labels() == int(key[3:])
    raise KeyError(name)


def raw_reward(dose, case, spec, reference=None):
    """Score ``dose`` on ``case``; structures absent from the case are skipped."""
    dose = np.asarray(dose, dtype=np.float64)
    entries, missing = [], []
    total, hinge = 0.0, 0.0
    for m in spec.metrics:
        try:
            mask = structure_mask(case, m.structure)
        except KeyError:
            mask = None
        if mask is None or not mask.any():
            if m.structure not in missing:
                missing.append(m.structure)
            continue
        value = m.kind.evaluate(dose, mask)
        score = piecewise_score(value, m.breakpoints)
        viol = m.hard.violation(value) if m.hard is not None else 0.0
        total += m.weight * score
        hinge += viol * viol
        entries.append({
            "structure": m.structure,
            "metric": m.kind.label,
            "value": value,
            "score": score,
            "weight": m.weight,
            "weighted": m.weight * score,
            "violation": viol,
        })
    if not entries:
        raise ScorecardError("no scorecard structure could be resolved in the case")
    mae = None
    if reference is not None:
        body = case.mask("body")
        mae = float(np.mean(np.abs(dose[body] - np.asarray(reference)[body])))
    return RewardReport(entries, float(total), float(hinge), mae, missing)


# ---------------------------------------------------------------------------
# config files

def spec_to_dict(spec):
    metrics = []
    for m in spec.metrics:
        d = {
            "structure": m.structure,
            "kind": m.kind.kind,
            "param": m.kind.param,
            "breakpoints": [[v, s] for v, s in m.breakpoints],
            "weight": m.weight,
        }
        if m.hard is not None:
            d["hard"] = {"op": m.hard.op, "threshold": m.hard.threshold}
        metrics.append(d)
    out = {"site": spec.site, "rx_template_gy": spec.rx_template_gy, "metrics": metrics}
    if spec.note:
        out["note"] = spec.note
    return out


def spec_from_dict(d):
    try:
        metrics = []
        for m in d["metrics"]:
            hard = m.get("hard")
            metrics.append(StructureMetric(
                structure=m["structure"],
                kind=MetricKind(m["kind"], m.get("param")),
                breakpoints=tuple(tuple(b) for b in m["breakpoints"]),
                weight=float(m.get("weight", 1.0)),
                hard=None if hard is None else HardConstraint(hard["op"], float(hard["threshold"])),
            ))
        return ScorecardSpec(d["site"], float(d["rx_template_gy"]), tuple(metrics), d.get("note", ""))
    except (KeyError, TypeError) as err:
        raise ScorecardError(f"malformed scorecard config: {err!r}") from None


def save_spec(spec, path):
    # repr-based float formatting in json keeps values bit-exact
    Path(path).write_text(json.dumps(spec_to_dict(spec), indent=2))


def load_spec(path):
    path = Path(path)
    try:
        return spec_from_dict(json.loads(path.read_text()))
    except OSError as err:
        raise OSError(f"cannot read scorecard {path}: {err}") from err


def default_spec(site):
    """Illustrative stand-in scorecard shipped with the package."""
    name = f"{site}.json"
    try:
        text = resources.files("diffkt3d.scorecards").joinpath(name).read_text()
    except FileNotFoundError:
        raise ScorecardError(f"no default scorecard for site {site!r}") from None
    return spec_from_dict(json.loads(text))
