"""Synthetic multi-modality radiotherapy cases.

Each case carries seven co-registered volumes (CT, PTV, OAR labels, body,
beam plate, angle plate, dose). The dose comes from a closed-form beam model,
so the whole data set is reproducible from ``(seed, config)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import io
from .numcore import stream

MODALITIES = ("ct", "ptv", "oar", "body", "beam", "angle", "dose")
MASK_MODALITIES = ("ptv", "oar", "body")
MAX_OARS = 4
SITES = ("han", "lung", "prostate")
DOSE_RANGE_FACTOR = 1.25

_SITE_PRESETS = {
    "han": dict(rx=(70.0, 66.0, 60.0), body=(0.36, 0.34, 0.40), ct_base=0.45),
    "lung": dict(rx=(60.0, 50.0, 45.0), body=(0.40, 0.32, 0.44), ct_base=0.40),
    "prostate": dict(rx=(78.0, 70.0, 60.0), body=(0.40, 0.33, 0.45), ct_base=0.50),
}
_OAR_CONTRAST = (-0.10, 0.10, 0.16, -0.06)


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class Volume:
    """Dense 3D grid ``(D, H, W)`` with voxel spacing in mm."""

    values: np.ndarray
    spacing_mm: tuple = (4.0, 4.0, 4.0)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 3 or min(vals.shape) < 4:
            raise PhantomError(f"volume must be 3-d with extents >= 4, got {vals.shape}")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))

    @property
    def shape(self):
        return self.values.shape


@dataclass
class PhantomConfig:
    shape: tuple = (16, 16, 16)
    site: str = "han"
    n_oars: int = MAX_OARS
    n_beams: int = 5
    spacing_mm: tuple = (4.0, 4.0, 4.0)
    attenuation_per_mm: float = 0.004
    beam_half_width_frac: float = 0.25
    patch_size: int = 4


@dataclass
class Case:
    id: str
    site: str
    volumes: dict
    prescription_gy: float
    beam_angles_deg: list
    spacing_mm: tuple = (4.0, 4.0, 4.0)
    isocenter_vox: tuple = (0.0, 0.0, 0.0)
    attenuation_per_mm: float = 0.004
    beam_half_width_frac: float = 0.25
    extra: dict = field(default_factory=dict)

    @property
    def shape(self):
        return next(iter(self.volumes.values())).shape

    def mask(self, name):
        return self.volumes[name].values > 0.5

    @property
    def dose_norm_max_gy(self):
        return DOSE_RANGE_FACTOR * self.prescription_gy

    def oar_labels(self):
        return decode_oar_labels(self.volumes["oar"].values)


# ---------------------------------------------------------------------------
# OAR label packing

def encode_oar_labels(labels):
    """Integer labels 0..4 -> one float channel; background 0, OAR k -> 0.5 + k/8."""
    labels = np.asarray(labels)
    out = np.where(labels > 0, 0.5 + 0.5 * labels / MAX_OARS, 0.0)
    return out.astype(np.float64)


def decode_oar_labels(channel):
    channel = np.asarray(channel, dtype=np.float64)
    k = np.rint((channel - 0.5) * 2 * MAX_OARS).astype(int)
    return np.where(channel > 0.25, np.clip(k, 1, MAX_OARS), 0)


# ---------------------------------------------------------------------------
# normalization to the model's [-1, 1] range

def modality_range(modality, prescription_gy):
    if modality == "dose":
        return 0.0, DOSE_RANGE_FACTOR * prescription_gy
    return 0.0, 1.0


def normalize(values, modality, prescription_gy):
    lo, hi = modality_range(modality, prescription_gy)
    return np.clip(2.0 * (np.asarray(values) - lo) / (hi - lo) - 1.0, -1.0, 1.0)


def denormalize(values, modality, prescription_gy):
    lo, hi = modality_range(modality, prescription_gy)
    return (np.asarray(values) + 1.0) * 0.5 * (hi - lo) + lo


def normalized_stack(case):
    """All modalities of ``case`` as a ``(7, D, H, W)`` array in [-1, 1]."""
    return np.stack([normalize(case.volumes[m].values, m, case.prescription_gy)
                     for m in MODALITIES])


# ---------------------------------------------------------------------------
# geometry helpers

def _grid(shape):
    return np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")


def _ellipsoid(shape, center, semi_axes):
    zz, yy, xx = _grid(shape)
    r = ((zz - center[0]) / semi_axes[0]) ** 2 + ((yy - center[1]) / semi_axes[1]) ** 2 \
        + ((xx - center[2]) / semi_axes[2]) ** 2
    return r <= 1.0


def rasterize_beam_plates(angles, isocenter, grid, half_width_frac=0.25):
    """Beam and angle plates for gantry angles rotating in the axial (H, W) plane.

    A beam is a rectangular corridor through ``isocenter`` (voxel coordinates
    ``(z, y, x)``). Angle 0 runs along +y (the H axis); 90 runs along +x.
    The angle plate stores ``angle / 360`` on each corridor; overlapping
    corridors take the mean.
    """
    shape = tuple(grid)
    iso = np.asarray(isocenter, dtype=np.float64)
    if iso.shape != (3,) or np.any(iso < 0) or np.any(iso > np.asarray(shape) - 1):
        raise PhantomError(f"isocenter {tuple(iso)} lies outside grid {shape}")
    zz, yy, xx = _grid(shape)
    hw_lat = half_width_frac * min(shape[1], shape[2])
    hw_z = half_width_frac * shape[0]
    beam = np.zeros(shape)
    angle_sum = np.zeros(shape)
    count = np.zeros(shape)
    for a in angles:
        th = np.deg2rad(a)
        perp = np.abs(-(yy - iso[1]) * np.sin(th) + (xx - iso[2]) * np.cos(th))
        inside = (perp <= hw_lat + 1e-9) & (np.abs(zz - iso[0]) <= hw_z + 1e-9)
        beam = np.maximum(beam, inside)
        angle_sum += inside * (float(a) % 360.0) / 360.0
        count += inside
    angle = np.divide(angle_sum, count, out=np.zeros(shape), where=count > 0)
    return beam, angle


def _depth_mm(body, angle_deg, spacing_mm, step=0.25):
    """Radiological path length in body from the source side to each voxel."""
    shape = body.shape
    zz, yy, xx = _grid(shape)
    th = np.deg2rad(angle_deg)
    dy, dx = np.cos(th), np.sin(th)
    mm_per_step = step * np.hypot(dy * spacing_mm[1], dx * spacing_mm[2])
    n_steps = int(np.ceil(np.hypot(shape[1], shape[2]) / step)) + 1
    zi = zz.astype(int)
    depth = np.zeros(shape)
    for k in range(n_steps):
        s = k * step
        iy = np.rint(yy - s * dy).astype(int)
        ix = np.rint(xx - s * dx).astype(int)
        ok = (iy >= 0) & (iy < shape[1]) & (ix >= 0) & (ix < shape[2])
        hit = np.zeros(shape)
        hit[ok] = body[zi[ok], iy[ok], ix[ok]]
        # the voxel itself counts half a step so depth starts at the surface
        depth += hit * (0.5 if k == 0 else 1.0) * mm_per_step
    return depth


def single_beam_dose(body, angle_deg, isocenter, spacing_mm, attenuation_per_mm,
                     half_width_frac, weight):
    """Un-normalized dose of one beam: weight * exp(-mu * depth) * lateral Gaussian."""
    if attenuation_per_mm < 0:
        raise PhantomError("attenuation_per_mm must be >= 0")
    shape = body.shape
    zz, yy, xx = _grid(shape)
    iso = np.asarray(isocenter, dtype=np.float64)
    th = np.deg2rad(angle_deg)
    perp = -(yy - iso[1]) * np.sin(th) + (xx - iso[2]) * np.cos(th)
    # profile sigma = 0.75 plate half-width keeps hot spots under the 1.25 Rx dose range
    sig_lat = 0.75 * half_width_frac * min(shape[1], shape[2])
    sig_z = 0.75 * half_width_frac * shape[0]
    lateral = np.exp(-0.5 * (perp / sig_lat) ** 2 - 0.5 * ((zz - iso[0]) / sig_z) ** 2)
    depth = _depth_mm(body, angle_deg, spacing_mm)
    return weight * np.exp(-attenuation_per_mm * depth) * lateral * body


def synthesize_dose(case, attenuation_per_mm=None, rescale=True):
    """Analytic dose for ``case``; PTV mean equals the prescription when ``rescale``."""
    mu = case.attenuation_per_mm if attenuation_per_mm is None else attenuation_per_mm
    if mu < 0:
        raise PhantomError("attenuation_per_mm must be >= 0")
    body = case.mask("body").astype(np.float64)
    ptv = case.mask("ptv")
    if not ptv.any():
        raise PhantomError(f"case {case.id}: empty PTV, dose cannot be normalized")
    rx = float(case.prescription_gy)
    n = len(case.beam_angles_deg)
    dose = np.zeros(body.shape)
    for a in case.beam_angles_deg:
        dose = dose + single_beam_dose(body, a, case.isocenter_vox, case.spacing_mm,
                                       mu, case.beam_half_width_frac, rx / n)
    if rescale:
        dose = dose * (rx / dose[ptv].mean())
    return Volume(dose, case.spacing_mm)


# ---------------------------------------------------------------------------
# case generation

def _place(rng, shape, body, semi_lo, semi_hi, forbidden, tries=400, margin=1):
    ext = np.asarray(shape, dtype=np.float64)
    inner = ndimage.binary_erosion(body, iterations=margin) if margin else body
    for _ in range(tries):
        semi = np.maximum(rng.uniform(semi_lo, semi_hi, size=3) * ext, 1.2)
        center = rng.uniform(semi, ext - 1 - semi)
        if np.any(center < 0) or np.any(center > ext - 1):
            continue
        m = _ellipsoid(shape, center, semi)
        if m.sum() < 4 or np.any(m & ~inner) or np.any(m & forbidden):
            continue
        return m, center
    return None, None


def generate_case(seed, config=None, case_id=None):
    """Build one phantom case; identical ``(seed, config)`` gives identical output."""
    cfg = config or PhantomConfig()
    shape = tuple(int(s) for s in cfg.shape)
    if len(shape) != 3:
        raise PhantomError(f"shape must have 3 extents, got {shape}")
    if any(s % cfg.patch_size for s in shape):
        raise PhantomError(f"shape {shape} must be divisible by patch size {cfg.patch_size}")
    if min(shape) < 8:
        raise PhantomError(f"shape {shape} too small to fit a PTV (extents must be >= 8)")
    if cfg.site not in SITES:
        raise PhantomError(f"unknown site {cfg.site!r}; expected one of {SITES}")
    if not 1 <= cfg.n_oars <= MAX_OARS:
        raise PhantomError(f"n_oars must be in 1..{MAX_OARS}")
    if cfg.n_beams < 1:
        raise PhantomError("n_beams must be >= 1")
    preset = _SITE_PRESETS[cfg.site]
    rng = stream(seed, "phantom", cfg.site)
    ext = np.asarray(shape, dtype=np.float64)

    center = (ext - 1) / 2 + rng.uniform(-0.5, 0.5, size=3)
    semi = np.asarray(preset["body"]) * ext * rng.uniform(0.92, 1.08, size=3)
    body = _ellipsoid(shape, center, semi)

    ptv, ptv_center = _place(rng, shape, body, 0.11, 0.19, np.zeros(shape, bool))
    if ptv is None:
        raise PhantomError(f"shape {shape} too small to fit a PTV inside the body")
    labels = np.zeros(shape, dtype=int)
    taken = ptv.copy()
    for k in range(1, cfg.n_oars + 1):
        m, _ = _place(rng, shape, body, 0.07, 0.12, taken, tries=2000)
        if m is None:
            raise PhantomError(f"could not place OAR {k} in shape {shape}")
        labels[m] = k
        taken |= m

    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=2.0, mode="nearest")
    field_ /= field_.std() + 1e-12
    ct = preset["ct_base"] + 0.04 * field_
    if cfg.site == "lung":
        for side in (-1, 1):
            lc = center + np.array([0.0, -0.05, side * 0.22]) * ext
            lung = _ellipsoid(shape, lc, np.array([0.28, 0.18, 0.14]) * ext)
            ct = np.where(lung & ~ptv & (labels == 0), 0.15 + 0.02 * field_, ct)
    ct = ct + 0.12 * ptv
    for k in range(1, cfg.n_oars + 1):
        ct = ct + _OAR_CONTRAST[k - 1] * (labels == k)
    ct = np.clip(ct, 0.0, 1.0) * body

    rx = float(rng.choice(preset["rx"]))
    start = rng.uniform(0.0, 360.0)
    jitter = rng.uniform(-10.0, 10.0, size=cfg.n_beams)
    angles = [round(float((start + i * 360.0 / cfg.n_beams + j) % 360.0), 3)
              for i, j in enumerate(jitter)]
    angles = [0.0 if a >= 360.0 else a for a in angles]

    zz, yy, xx = _grid(shape)
    iso = tuple(float(np.mean(c[ptv])) for c in (zz, yy, xx))
    beam, angle = rasterize_beam_plates(angles, iso, shape, cfg.beam_half_width_frac)

    spacing = tuple(float(s) for s in cfg.spacing_mm)
    vols = {
        "ct": ct, "ptv": ptv.astype(float), "oar": encode_oar_labels(labels),
        "body": body.astype(float), "beam": beam, "angle": angle,
    }
    case = Case(
        id=case_id or f"{cfg.site}-{seed:05d}", site=cfg.site,
        volumes={m: Volume(v, spacing) for m, v in vols.items()},
        prescription_gy=rx, beam_angles_deg=angles, spacing_mm=spacing,
        isocenter_vox=iso, attenuation_per_mm=float(cfg.attenuation_per_mm),
        beam_half_width_frac=float(cfg.beam_half_width_frac),
    )
    case.volumes["dose"] = synthesize_dose(case)
    # stored values must survive the float32 raster exactly
    case.volumes = {m: Volume(case.volumes[m].values.astype(np.float32).astype(np.float64), spacing)
                    for m in MODALITIES}
    return case


def generate_dataset(n, seed=0, config=None, sites=SITES):
    """``n`` cases cycling through ``sites``; case ``i`` uses seed ``seed + i``."""
    base = config or PhantomConfig()
    cases = []
    for i in range(n):
        site = sites[i % len(sites)]
        cfg = replace(base, site=site)
        cases.append(generate_case(seed + i, cfg, case_id=f"{site}-{seed + i:05d}"))
    return cases


def split_dataset(cases, fractions=(0.8, 0.1, 0.1)):
    """Deterministic train/val/test split by position (i.e. by seed range)."""
    n = len(cases)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return cases[:n_train], cases[n_train:n_train + n_val], cases[n_train + n_val:]


# ---------------------------------------------------------------------------
# case directory format

def _manifest(case):
    return {
        "id": case.id,
        "site": case.site,
        "prescription_gy": case.prescription_gy,
        "beam_angles_deg": list(case.beam_angles_deg),
        "spacing_mm": list(case.spacing_mm),
        "shape": list(case.shape),
        "isocenter_vox": list(case.isocenter_vox),
        "attenuation_per_mm": case.attenuation_per_mm,
        "beam_half_width_frac": case.beam_half_width_frac,
        "dose_norm_range_gy": [0.0, case.dose_norm_max_gy],
        "modalities": [m for m in MODALITIES if m in case.volumes],
    }


def save_case(case, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for m, vol in case.volumes.items():
        io.write_raster(d / f"{m}.raw", vol.values)
    (d / "manifest.json").write_text(json.dumps(_manifest(case), indent=2, sort_keys=True) + "\n")
    return d


def load_case(directory):
    d = Path(directory)
    try:
        meta = json.loads((d / "manifest.json").read_text())
    except OSError as err:
        raise OSError(f"cannot read case manifest in {d}: {err}") from err
    spacing = tuple(meta["spacing_mm"])
    vols = {m: Volume(io.read_raster(d / f"{m}.raw"), spacing) for m in meta["modalities"]}
    return Case(
        id=meta["id"], site=meta["site"], volumes=vols,
        prescription_gy=float(meta["prescription_gy"]),
        beam_angles_deg=[float(a) for a in meta["beam_angles_deg"]],
        spacing_mm=spacing, isocenter_vox=tuple(meta["isocenter_vox"]),
        attenuation_per_mm=float(meta["attenuation_per_mm"]),
        beam_half_width_frac=float(meta["beam_half_width_frac"]),
    )


def save_dataset(cases, directory):
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for c in cases:
        save_case(c, root / c.id)
    index = {"cases": [c.id for c in cases]}
    (root / "dataset.json").write_text(json.dumps(index, indent=2) + "\n")
    return root


def load_dataset(directory):
    root = Path(directory)
    index = json.loads((root / "dataset.json").read_text())
    return [load_case(root / cid) for cid in index["cases"]]
