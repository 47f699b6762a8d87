"""Comparative statics through the trained generator.

The sensitivity of built density inside a region R to the input factors is the
gradient of ``mean(G(x)[R])`` with respect to the population and luminosity
planes, obtained with a single backward pass. Around it sit the region
selectors, the spillover fraction (share of gradient mass outside R), ray
sampled distance-decay profiles and their corpus aggregation.
"""
from __future__ import annotations

import copy
import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import functional as F
from .autodiff.gradcheck import crosses_kink
from .autodiff.nn import Module
from .autodiff.tensor import Tensor, backward, no_grad, record_kinks
from .exceptions import InsufficientPatchesError, TileFormatError, ValidationError
from .raster import read_container, split_payload, write_container
from .stats import DEFAULT_THRESHOLD, label_patches

log = logging.getLogger(__name__)

REGION_MODES = ("urban_core", "secondary_top3")
REGION_ALIASES = {"core": "urban_core", "urban_core": "urban_core", "secondary_top3": "secondary_top3"}
FACTORS = ("pop", "lum")
GRADIENT_MAGIC = b"CSTK"
GRADIENT_LAYERS = ("g_pop", "g_lum", "roi")
DEFAULT_BIN_KM = 7.0
DEFAULT_RAYS = 50
RAY_STEP_PX = 0.5


# -- regions ---------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class RegionOfInterest:
    mask: np.ndarray
    mode: str = "custom"
    patch_ids: Tuple[int, ...] = ()
    centroid: Tuple[float, float] = field(default=(math.nan, math.nan))

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.ndim != 2:
            raise ValidationError("region mask must be 2-D")
        if not mask.any():
            raise ValidationError("region of interest is empty")
        mask = mask.copy()
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        rows, cols = np.nonzero(mask)
        object.__setattr__(self, "centroid", (float(rows.mean()), float(cols.mean())))

    @property
    def size(self) -> int:
        return int(self.mask.sum())

    @property
    def shape(self) -> Tuple[int, int]:
        return self.mask.shape


def region_select(built: np.ndarray, mode: str = "urban_core", threshold: float = DEFAULT_THRESHOLD,
                  connectivity: int = 4) -> RegionOfInterest:
    """Largest patch (``urban_core``) or the union of patches ranked 2-4
    (``secondary_top3``). Equal sizes rank by row-major first pixel."""
    key = REGION_ALIASES.get(mode)
    if key is None:
        raise ValidationError(f"unknown region mode {mode!r}; expected one of {sorted(REGION_ALIASES)}")
    lab = label_patches(np.asarray(built), threshold, connectivity)
    if key == "urban_core":
        if lab.n_patches < 1:
            raise InsufficientPatchesError("insufficient patches: built map has no patch")
        ranks = [0]
    else:
        if lab.n_patches < 4:
            raise InsufficientPatchesError(
                f"insufficient patches: secondary_top3 needs 4, found {lab.n_patches}")
        ranks = [1, 2, 3]
    ids = tuple(int(lab.order[r]) for r in ranks)
    return RegionOfInterest(np.isin(lab.labels, ids), key, ids)


# -- gradients -------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class GradientField:
    g_pop: np.ndarray
    g_lum: np.ndarray
    roi: RegionOfInterest
    g_water: Optional[np.ndarray] = None
    source: str = ""
    km_per_px: float = 1.0
    city_id: str = ""
    reduction: str = "mean over ROI"

    def __post_init__(self):
        for name in ("g_pop", "g_lum"):
            g = np.asarray(getattr(self, name))
            if g.shape != self.roi.shape:
                raise ValidationError(f"{name} shape {g.shape} does not match ROI {self.roi.shape}")
            if not np.all(np.isfinite(g)):
                raise ValidationError(f"{name} contains non-finite values")

    def factor(self, name: str) -> np.ndarray:
        if name not in FACTORS:
            raise ValidationError(f"unknown factor {name!r}")
        return self.g_pop if name == "pop" else self.g_lum

    @property
    def shape(self) -> Tuple[int, int]:
        return self.roi.shape


GeneratorLike = Union[Module, Callable[[Tensor], Tensor]]


def _resolve_generator(model, dtype) -> Tuple[Callable[[Tensor], Tensor], str]:
    # imported lazily: the estimator module pulls in sklearn plumbing
    from .gan.estimator import ConstrainedPix2Pix

    if isinstance(model, ConstrainedPix2Pix):
        if not hasattr(model, "generator_"):
            raise ValidationError("model is not fitted")
        if model.config_.input_mode != "factors":
            raise ValidationError(f"input gradients need a factors-mode model, got "
                                  f"{model.config_.input_mode!r}")
        model = model.generator_
    if isinstance(model, Module):
        g = copy.deepcopy(model)
        g.eval()
        if dtype is not None:
            g.astype(dtype)
        return g, type(model).__name__
    if callable(model):
        return model, getattr(model, "__name__", "callable")
    raise ValidationError(f"cannot take input gradients through {type(model).__name__}")


def _check_x(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4 and x.shape[0] == 1:
        x = x[0]
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValidationError(f"inputs must be (3, H, W) planes [pop, lum, water], got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("inputs contain non-finite values")
    return x


def _roi_mean(gen, x: Tensor, weights: np.ndarray) -> Tensor:
    out = gen(x)
    if out.size != weights.size:
        raise ValidationError(f"generator output has {out.size} values, expected {weights.size}")
    return F.sum(F.mul(F.reshape(out, weights.shape), weights))


def input_gradient(model: GeneratorLike, x, roi: RegionOfInterest, dtype=np.float64,
                   km_per_px: float = 1.0, city_id: str = "") -> GradientField:
    """d mean(G(x) over R) / dx for one (3, H, W) input, dropout off.

    ``model`` is a fitted estimator, a generator module or any callable
    mapping a (1, 3, H, W) Tensor to an (1, 1, H, W) map. Modules are copied
    and cast to ``dtype`` so the trained weights are never touched.
    """
    x = _check_x(x)
    if roi.shape != x.shape[1:]:
        raise ValidationError(f"ROI shape {roi.shape} does not match inputs {x.shape[1:]}")
    gen, source = _resolve_generator(model, dtype)
    weights = roi.mask.astype(np.float64) / roi.size
    xt = Tensor(x[None].astype(dtype or np.float64), requires_grad=True)
    backward(_roi_mean(gen, xt, weights))
    g = xt.grad[0].astype(np.float64)
    return GradientField(g[0], g[1], roi, g_water=g[2], source=source, km_per_px=km_per_px,
                         city_id=city_id)


@dataclass
class PixelCheck:
    channel: str
    row: int
    col: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class InputGradCheck:
    rows: List[PixelCheck]
    skipped: int
    tol: float

    @property
    def max_rel_err(self) -> float:
        return max((r.rel_err for r in self.rows), default=0.0)

    @property
    def passed(self) -> bool:
        return bool(self.rows) and self.max_rel_err < self.tol

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(("channel", "row", "col", "analytic", "numeric", "rel_err"))
            for r in self.rows:
                wr.writerow((r.channel, r.row, r.col, repr(float(r.analytic)), repr(float(r.numeric)), repr(float(r.rel_err))))


def check_input_gradient(model: GeneratorLike, x, roi: RegionOfInterest, n_pixels: int = 20,
                         seed: int = 0, h: float = 1e-6, tol: float = 1e-3,
                         floor: float = 1e-10) -> InputGradCheck:
    """Central differences on ``n_pixels`` random (factor, row, col) input
    coordinates, 64-bit. Coordinates whose perturbation moves an activation
    across a ReLU kink are skipped and replaced by fresh draws. Instance
    normalization couples every activation to every input pixel, so the
    exact sign-change test is used rather than a distance margin."""
    x = _check_x(x)
    gen, _ = _resolve_generator(model, np.float64)
    field_ = input_gradient(gen, x, roi)
    weights = roi.mask.astype(np.float64) / roi.size
    xt = Tensor(x[None].copy())

    def value() -> float:
        return float(_roi_mean(gen, xt, weights).data)

    with no_grad(), record_kinks() as base:
        value()
    rng = np.random.default_rng(seed)
    _, H, W = x.shape
    rows, skipped, attempts = [], 0, 0
    seen = set()
    while len(rows) < n_pixels and attempts < 20 * n_pixels:
        attempts += 1
        c, i, j = int(rng.integers(2)), int(rng.integers(H)), int(rng.integers(W))
        if (c, i, j) in seen:
            continue
        seen.add((c, i, j))
        orig = xt.data[0, c, i, j]
        step = h * (1.0 + abs(orig))
        with no_grad():
            xt.data[0, c, i, j] = orig + step
            with record_kinks() as kp:
                fp = value()
            xt.data[0, c, i, j] = orig - step
            with record_kinks() as km:
                fm = value()
            xt.data[0, c, i, j] = orig
        if crosses_kink(base, kp, km):
            skipped += 1
            continue
        numeric = (fp - fm) / (2 * step)
        analytic = float(field_.factor(FACTORS[c])[i, j])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        rows.append(PixelCheck(FACTORS[c], i, j, analytic, numeric, err))
    return InputGradCheck(rows, skipped, tol)


# -- spillover -------------------------------------------------------------
def spillover(g: np.ndarray, mask: np.ndarray) -> float:
    """sum |g| outside ``mask`` / sum |g|; defined as 0 when the total is 0."""
    a = np.abs(np.asarray(g, dtype=np.float64))
    mask = np.asarray(mask, dtype=bool)
    if a.shape != mask.shape:
        raise ValidationError(f"gradient shape {a.shape} does not match mask {mask.shape}")
    total = a.sum()
    if total == 0:
        warnings.warn("gradient is identically zero; spillover defined as 0", RuntimeWarning,
                      stacklevel=2)
        return 0.0
    return float(min(max(a[~mask].sum() / total, 0.0), 1.0))


def spillover_fraction(field_: GradientField, roi: Optional[RegionOfInterest] = None) -> Dict[str, float]:
    """Per-factor share of gradient magnitude outside the region."""
    roi = roi or field_.roi
    return {f: spillover(field_.factor(f), roi.mask) for f in FACTORS}


# -- distance-decay profiles ----------------------------------------------
@dataclass(frozen=True, eq=False)
class DecayProfile:
    edges_km: np.ndarray
    means: np.ndarray
    n_rays: int
    normalization: str = "none"

    def __post_init__(self):
        edges = np.asarray(self.edges_km, dtype=np.float64)
        if edges.size != np.asarray(self.means).size + 1 or np.any(np.diff(edges) <= 0):
            raise ValidationError("profile edges must be strictly increasing with len(means) + 1 entries")

    @property
    def centers_km(self) -> np.ndarray:
        return 0.5 * (self.edges_km[:-1] + self.edges_km[1:])

    @property
    def present(self) -> np.ndarray:
        return np.isfinite(self.means)


def bilinear(values: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Bilinear samples at fractional (row, col); points must lie in the grid hull."""
    H, W = values.shape
    r0 = np.clip(np.floor(rows).astype(np.int64), 0, max(H - 2, 0))
    c0 = np.clip(np.floor(cols).astype(np.int64), 0, max(W - 2, 0))
    r1, c1 = np.minimum(r0 + 1, H - 1), np.minimum(c0 + 1, W - 1)
    fr, fc = rows - r0, cols - c0
    top = values[r0, c0] * (1 - fc) + values[r0, c1] * fc
    bot = values[r1, c0] * (1 - fc) + values[r1, c1] * fc
    return top * (1 - fr) + bot * fr


def ray_angles(m: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.0, 2 * math.pi, size=m)


def ray_profile(values: np.ndarray, origin: Tuple[float, float], km_per_px: float,
                bin_km: float = DEFAULT_BIN_KM, m: int = DEFAULT_RAYS, max_km: Optional[float] = None,
                seed: int = 0, angles: Optional[Sequence[float]] = None,
                step_px: float = RAY_STEP_PX) -> DecayProfile:
    """Mean |values| by distance from ``origin`` along ``m`` rays.

    Angle 0 points along increasing column index. Each ray is sampled every
    ``step_px`` pixels until it leaves the image; samples are averaged per bin
    within a ray, then bins are averaged over the rays that reach them. Bins
    no ray reaches are NaN.
    """
    a = np.abs(np.asarray(values, dtype=np.float64))
    if a.ndim != 2:
        raise ValidationError("ray_profile needs a 2-D field")
    if not bin_km > 0:
        raise ValidationError("bin_km must be > 0")
    if not km_per_px > 0:
        raise ValidationError("km_per_px must be > 0")
    H, W = a.shape
    r0, c0 = origin
    if not (0 <= r0 <= H - 1 and 0 <= c0 <= W - 1):
        raise ValidationError(f"ray origin {origin} lies outside the image")
    theta = np.asarray(angles, dtype=np.float64) if angles is not None else None
    if theta is None:
        if m < 1:
            raise ValidationError("need at least one ray")
        theta = ray_angles(m, seed)
    if theta.size < 1:
        raise ValidationError("need at least one ray")
    if max_km is None:
        max_km = math.hypot(H - 1, W - 1) * km_per_px
    n_bins = max(1, int(math.ceil(max_km / bin_km - 1e-12)))
    edges = np.arange(n_bins + 1) * float(bin_km)

    t = np.arange(0.0, math.hypot(H, W) + step_px, step_px)
    sums = np.zeros((theta.size, n_bins))
    counts = np.zeros((theta.size, n_bins))
    for k, th in enumerate(theta):
        rr = r0 + t * math.sin(th)
        cc = c0 + t * math.cos(th)
        inside = (rr >= 0) & (rr <= H - 1) & (cc >= 0) & (cc <= W - 1)
        # stop at the first exit so a ray never re-enters
        stop = np.argmin(inside) if not inside.all() else inside.size
        d_km = t[:stop] * km_per_px
        keep = d_km < max_km
        b = np.floor(d_km[keep] / bin_km).astype(np.int64)
        v = bilinear(a, rr[:stop][keep], cc[:stop][keep])
        np.add.at(sums[k], b, v)
        np.add.at(counts[k], b, 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_ray = sums / counts
        reached = counts > 0
        n_reach = reached.sum(axis=0)
        means = np.where(n_reach > 0, np.where(reached, per_ray, 0.0).sum(axis=0) / n_reach, np.nan)
    return DecayProfile(edges, means, int(theta.size))


def roi_profile(field_: GradientField, factor: str = "pop", bin_km: float = DEFAULT_BIN_KM,
                m: int = DEFAULT_RAYS, seed: int = 0, max_km: Optional[float] = None) -> DecayProfile:
    """Decay profile of one factor's gradient from the ROI centroid."""
    return ray_profile(field_.factor(factor), field_.roi.centroid, field_.km_per_px, bin_km, m,
                       max_km=max_km, seed=seed)


def log_normalized(profile: DecayProfile) -> np.ndarray:
    """log10(bin mean / sum of bin means); NaN where absent or zero."""
    v = profile.means
    total = np.nansum(v)
    out = np.full(v.shape, np.nan)
    if total > 0:
        ok = np.isfinite(v) & (v > 0)
        out[ok] = np.log10(v[ok] / total)
    return out


AGGREGATE_COLUMNS = ("group", "bin_lo_km", "bin_hi_km", "q0", "q1", "q2", "q3", "q4", "mean_log", "n")


@dataclass
class AggregateRow:
    group: str
    bin_lo_km: float
    bin_hi_km: float
    quartiles: Tuple[float, float, float, float, float]
    mean_log: float
    n: int

    def as_tuple(self) -> tuple:
        return (self.group, self.bin_lo_km, self.bin_hi_km, *self.quartiles, self.mean_log, self.n)


def aggregate_profiles(profiles: Sequence[Tuple[str, DecayProfile]]) -> List[AggregateRow]:
    """Per (group, bin) min/Q1/median/Q3/max and mean of log-normalized magnitude.

    Bins where no city in the group has a finite value are dropped, and so are
    groups left empty.
    """
    groups: Dict[str, List[DecayProfile]] = {}
    for group, prof in profiles:
        groups.setdefault(str(group), []).append(prof)
    rows: List[AggregateRow] = []
    for group in sorted(groups):
        profs = groups[group]
        n_bins = max(p.means.size for p in profs)
        edges = max((p.edges_km for p in profs), key=len)
        logs = np.full((len(profs), n_bins), np.nan)
        for i, p in enumerate(profs):
            if p.edges_km.size > 1 and not np.allclose(p.edges_km, edges[:p.edges_km.size]):
                raise ValidationError(f"group {group!r} mixes profiles with different bin edges")
            logs[i, :p.means.size] = log_normalized(p)
        for b in range(n_bins):
            col = logs[:, b]
            col = col[np.isfinite(col)]
            if col.size == 0:
                continue
            q = tuple(float(v) for v in np.percentile(col, [0, 25, 50, 75, 100]))
            rows.append(AggregateRow(group, float(edges[b]), float(edges[b + 1]), q,
                                     float(col.mean()), int(col.size)))
    return rows


def write_aggregate_csv(rows: Sequence[AggregateRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(AGGREGATE_COLUMNS)
        for r in rows:
            wr.writerow(r.as_tuple())


@dataclass
class DecaySummary:
    group: str
    monotone_fraction: float
    d1_km: Optional[float]

    def as_dict(self) -> dict:
        return {"group": self.group, "monotone_fraction": self.monotone_fraction, "d1_km": self.d1_km}


def decay_summary(rows: Sequence[AggregateRow]) -> List[DecaySummary]:
    """Per group: share of steps beyond the second bin where the median does
    not increase, and the first distance where the median contribution drops
    below 1% (None if it never does)."""
    out = []
    for group in sorted({r.group for r in rows}):
        grp = sorted((r for r in rows if r.group == group), key=lambda r: r.bin_lo_km)
        med = np.array([r.quartiles[2] for r in grp])
        tail = med[1:]
        steps = np.diff(tail)
        frac = float(np.mean(steps <= 0)) if steps.size else 1.0
        below = [r.bin_lo_km for r in grp if r.quartiles[2] < -2.0]
        out.append(DecaySummary(group, frac, below[0] if below else None))
    return out


# -- persistence ----------------------------------------------------------
def save_gradient_field(field_: GradientField, path) -> None:
    """Tile-format file of kind ``gradient`` with layers g_pop, g_lum, roi."""
    H, W = field_.shape
    header = {
        "version": 1,
        "kind": "gradient",
        "width": W,
        "height": H,
        "km_per_px": float(field_.km_per_px),
        "city_id": field_.city_id,
        "layers": [{"id": lid, "dtype": "f32"} for lid in GRADIENT_LAYERS],
        "roi_mode": field_.roi.mode,
        "roi_patch_ids": list(field_.roi.patch_ids),
        "source": field_.source,
        "reduction": field_.reduction,
    }
    arrays = [field_.g_pop, field_.g_lum, field_.roi.mask.astype(np.float32)]
    write_container(path, GRADIENT_MAGIC, header, arrays)


def load_gradient_field(path) -> GradientField:
    header, payload = read_container(path, GRADIENT_MAGIC)
    if header.get("kind") != "gradient":
        raise TileFormatError(f"{path}: not a gradient file")
    ids = [entry["id"] for entry in header["layers"]]
    if tuple(ids) != GRADIENT_LAYERS:
        raise TileFormatError(f"{path}: unexpected gradient layers {ids}")
    shape = (int(header["height"]), int(header["width"]))
    g_pop, g_lum, roi = split_payload(payload, [shape] * 3, str(path))
    region = RegionOfInterest(roi > 0.5, header.get("roi_mode", "custom"),
                              tuple(header.get("roi_patch_ids", ())))
    return GradientField(g_pop.astype(np.float64), g_lum.astype(np.float64), region,
                         source=header.get("source", ""), km_per_px=float(header["km_per_px"]),
                         city_id=header.get("city_id", ""),
                         reduction=header.get("reduction", "mean over ROI"))
