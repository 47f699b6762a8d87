"""Urban-form statistics on built maps: built fraction, patches, box counting."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import ValidationError
from .validation import check_maps

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5


def built_area_fraction(built: np.ndarray) -> float:
    """Mean built density over the window."""
    built = np.asarray(built, dtype=np.float64)
    if built.size == 0:
        raise ValidationError("built map is empty")
    return float(built.mean())


# -- connected components ----------------------------------------------------

@dataclass
class PatchLabeling:
    labels: np.ndarray
    sizes: np.ndarray
    connectivity: int
    # label ids ordered like ``sizes``: by size descending, then by first pixel
    order: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_patches(self) -> int:
        return int(self.sizes.size)

    def mask(self, rank: int) -> np.ndarray:
        """Boolean mask of the patch at position ``rank`` (0 = largest)."""
        return self.labels == self.order[rank]


def _find(parent: List[int], i: int) -> int:
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


def label_patches(built: np.ndarray, threshold: float = DEFAULT_THRESHOLD,
                  connectivity: int = 4) -> PatchLabeling:
    """Two-pass union-find labelling of ``built > threshold``.

    Labels are numbered 1..K in row-major order of each patch's first pixel.
    """
    if connectivity not in (4, 8):
        raise ValidationError("connectivity must be 4 or 8")
    fg = np.asarray(built) > threshold
    if fg.ndim != 2:
        raise ValidationError("label_patches expects a 2-d map")
    h, w = fg.shape
    offsets = [(-1, 0), (0, -1)] if connectivity == 4 else [(-1, -1), (-1, 0), (-1, 1), (0, -1)]
    prov = [[0] * w for _ in range(h)]
    parent = [0]
    rows = fg.tolist()
    for i in range(h):
        row = rows[i]
        for j in range(w):
            if not row[j]:
                continue
            found = []
            for di, dj in offsets:
                ni, nj = i + di, j + dj
                if 0 <= ni and 0 <= nj < w and rows[ni][nj]:
                    found.append(prov[ni][nj])
            if not found:
                parent.append(len(parent))
                prov[i][j] = len(parent) - 1
                continue
            roots = [_find(parent, lab) for lab in found]
            root = min(roots)
            for r in roots:
                parent[r] = root
            prov[i][j] = root
    # roots are each component's smallest provisional label, i.e. its first pixel
    remap = np.zeros(len(parent), dtype=np.int64)
    next_id = 0
    for lab in range(1, len(parent)):
        r = _find(parent, lab)
        if r == lab:
            next_id += 1
            remap[lab] = next_id
    for lab in range(1, len(parent)):
        remap[lab] = remap[_find(parent, lab)]
    labels = remap[np.asarray(prov, dtype=np.int64)]
    counts = np.bincount(labels.ravel(), minlength=next_id + 1)[1:]
    ids = np.arange(1, next_id + 1)
    order = ids[np.lexsort((ids, -counts))]
    return PatchLabeling(labels=labels, sizes=counts[order - 1], connectivity=connectivity, order=order)


@dataclass
class PatchHistogram:
    bin_lo: np.ndarray
    bin_hi: np.ndarray
    counts: np.ndarray
    top_masks: List[np.ndarray]

    def as_dict(self) -> dict:
        return {"bin_lo": self.bin_lo.tolist(), "bin_hi": self.bin_hi.tolist(),
                "counts": self.counts.tolist()}


def patch_size_distribution(labeling: PatchLabeling, top_k: int = 20) -> PatchHistogram:
    """Counts of patch sizes in base-2 bins [2^k, 2^(k+1)), plus the top-k patch masks."""
    sizes = labeling.sizes
    if sizes.size == 0:
        empty = np.zeros(0, dtype=np.int64)
        return PatchHistogram(empty, empty, empty, [])
    k = np.floor(np.log2(sizes)).astype(np.int64)
    counts = np.bincount(k)
    lo = 2 ** np.arange(counts.size)
    masks = [labeling.mask(r) for r in range(min(top_k, labeling.n_patches))]
    return PatchHistogram(lo, 2 * lo, counts, masks)


# -- box counting ------------------------------------------------------------

@dataclass
class FractalResult:
    dimension: float
    log_inv_size: np.ndarray
    log_count: np.ndarray
    box_sizes: np.ndarray
    counts: np.ndarray
    used: np.ndarray
    clamped: bool = False


BOX_METHODS = ("gliding", "grid")


def box_counts(fg: np.ndarray, min_pixels: int = 1, method: str = "gliding") -> Tuple[np.ndarray, np.ndarray]:
    """Occupied-box counts for box sizes side/2, side/4, ..., 2 on a square power-of-two grid.

    ``grid`` tiles the map once from the origin. ``gliding`` averages the
    count over every placement of the tiling on the torus, which makes the
    counts (fractional in general) invariant under toroidal shifts.
    """
    if method not in BOX_METHODS:
        raise ValidationError(f"box counting method must be one of {BOX_METHODS}")
    side = fg.shape[0]
    sizes, counts = [], []
    s = side // 2
    while s >= 2:
        if method == "grid":
            blocks = fg.reshape(side // s, s, side // s, s).sum(axis=(1, 3))
            count = float(np.count_nonzero(blocks >= min_pixels))
        else:
            a = np.pad(fg.astype(np.int64), ((0, s), (0, s)), mode="wrap")
            sat = np.zeros((side + s + 1, side + s + 1), dtype=np.int64)
            sat[1:, 1:] = a.cumsum(axis=0).cumsum(axis=1)
            win = sat[s:, s:] - sat[:-s, s:] - sat[s:, :-s] + sat[:-s, :-s]
            count = np.count_nonzero(win[:side, :side] >= min_pixels) / float(s * s)
        sizes.append(s)
        counts.append(count)
        s //= 2
    return np.array(sizes), np.array(counts, dtype=np.float64)


def _pad_pow2(fg: np.ndarray) -> np.ndarray:
    side = max(fg.shape)
    side = 1 << max(int(math.ceil(math.log2(side))), 1)
    if fg.shape == (side, side):
        return fg
    out = np.zeros((side, side), dtype=bool)
    out[:fg.shape[0], :fg.shape[1]] = fg
    return out


def fractal_dimension(built: np.ndarray, threshold: float = DEFAULT_THRESHOLD,
                      min_pixels: int = 1, method: str = "gliding") -> FractalResult:
    """Box-counting dimension of ``built > threshold``.

    The slope of log N(s) against log(1/s) is fitted by least squares over the
    box sizes with N(s) > 0; of the two coarsest sizes, any with N(s) < 4 are
    left out of the fit. Non-square or non-power-of-two maps are zero-padded.
    By default N(s) is the gliding-box count (see :func:`box_counts`).
    """
    fg = np.asarray(built) > threshold
    if fg.ndim != 2:
        raise ValidationError("fractal_dimension expects a 2-d map")
    if min_pixels < 1:
        raise ValidationError("min_pixels must be >= 1")
    fg = _pad_pow2(fg)
    sizes, counts = box_counts(fg, min_pixels, method)
    used = counts > 0
    used[:2] &= counts[:2] >= 4
    if used.sum() < 3:
        raise ValidationError(f"only {int(used.sum())} usable box scales; need >= 3")
    x = np.log(1.0 / sizes[used])
    y = np.log(counts[used])
    slope = float(np.polyfit(x, y, 1)[0])
    clamped = not 0.0 <= slope <= 2.0
    with np.errstate(divide="ignore"):
        log_count = np.where(counts > 0, np.log(np.where(counts > 0, counts, 1.0)), -np.inf)
    return FractalResult(float(np.clip(slope, 0.0, 2.0)), np.log(1.0 / sizes),
                         log_count, sizes, counts, used, clamped)


# -- comparison --------------------------------------------------------------

def pearson_r2(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValidationError(f"length mismatch {x.size} vs {y.size}")
    if x.size < 3:
        raise ValidationError("pearson_r2 needs at least 3 points")
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx <= 0 or syy <= 0:
        raise ValidationError("zero variance: Pearson correlation is undefined")
    r = float(xc @ yc) / math.sqrt(sxx * syy)
    return min(r * r, 1.0)


@dataclass
class StatsRecord:
    city_id: str
    source: str
    a: float
    f: float
    n_patches: int
    largest_patch_px: int
    hist: Dict[str, list]
    f_clamped: bool = False
    extent_km: Optional[float] = None


def city_stats(built: np.ndarray, city_id: str, source: str = "real",
               threshold: float = DEFAULT_THRESHOLD, connectivity: int = 4,
               min_pixels: int = 1, extent_km: Optional[float] = None) -> StatsRecord:
    """All per-city statistics. ``f`` is NaN when too few box scales are occupied."""
    if source not in ("real", "generated"):
        raise ValidationError("source must be 'real' or 'generated'")
    lab = label_patches(built, threshold, connectivity)
    hist = patch_size_distribution(lab, top_k=0)
    try:
        fr = fractal_dimension(built, threshold, min_pixels)
        f, clamped = fr.dimension, fr.clamped
    except ValidationError:
        f, clamped = float("nan"), False
    largest = int(lab.sizes[0]) if lab.n_patches else 0
    return StatsRecord(city_id, source, built_area_fraction(built), f, lab.n_patches, largest,
                       hist.as_dict(), clamped, extent_km)


@dataclass
class ComparisonReport:
    r2_a: float
    r2_f: float
    pairs: List[dict]
    dropped: List[str]

    def summary(self) -> dict:
        def finite(v: float) -> Optional[float]:
            return v if math.isfinite(v) else None

        return {"r2_a": finite(self.r2_a), "r2_f": finite(self.r2_f), "n_pairs": len(self.pairs),
                "dropped": self.dropped}


def _r2_or_nan(name: str, x: Sequence[float], y: Sequence[float], strict: bool) -> float:
    if strict:
        return pearson_r2(x, y)
    try:
        return pearson_r2(x, y)
    except ValidationError as exc:
        log.warning("R^2(%s) undefined: %s", name, exc)
        return float("nan")


def compare_stats(real: Iterable[StatsRecord], generated: Iterable[StatsRecord],
                  strict: bool = True) -> ComparisonReport:
    """Pair records by city id and compute R^2 of a and f between the two sources.

    An undefined R^2 (fewer than 3 finite pairs, or a constant statistic)
    raises in strict mode; otherwise it is reported as NaN with a warning.
    """
    real = {r.city_id: r for r in real}
    gen = {g.city_id: g for g in generated}
    dropped = sorted(set(real) ^ set(gen))
    if dropped:
        log.warning("dropping %d unpaired city ids: %s", len(dropped), ", ".join(dropped[:10]))
    ids = sorted(set(real) & set(gen))
    if len(ids) < 3:
        raise ValidationError(f"need >= 3 paired cities, got {len(ids)}")
    pairs = [{"city_id": i, "a_real": real[i].a, "a_gen": gen[i].a,
              "f_real": real[i].f, "f_gen": gen[i].f} for i in ids]
    r2_a = _r2_or_nan("a", [p["a_real"] for p in pairs], [p["a_gen"] for p in pairs], strict)
    fpairs = [p for p in pairs if math.isfinite(p["f_real"]) and math.isfinite(p["f_gen"])]
    if len(fpairs) < len(pairs):
        log.warning("%d cities lack a fractal dimension; excluded from R^2(f)", len(pairs) - len(fpairs))
    r2_f = _r2_or_nan("f", [p["f_real"] for p in fpairs], [p["f_gen"] for p in fpairs], strict)
    return ComparisonReport(r2_a, r2_f, pairs, dropped)


STATS_COLUMNS = ("city_id", "source", "a", "f", "n_patches", "largest_patch_px")


def write_stats_csv(records: Iterable[StatsRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(STATS_COLUMNS)
        for r in records:
            wr.writerow([r.city_id, r.source, repr(float(r.a)), repr(float(r.f)), r.n_patches, r.largest_patch_px])


def write_histograms_json(records: Iterable[StatsRecord], path) -> None:
    data = [{"city_id": r.city_id, "source": r.source, **r.hist} for r in records]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=1)


def write_scatter_csv(report: ComparisonReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.DictWriter(fh, fieldnames=["city_id", "a_real", "a_gen", "f_real", "f_gen"])
        wr.writeheader()
        for p in report.pairs:
            wr.writerow(p)


class UrbanFormStats(BaseEstimator, TransformerMixin):
    """Stateless transformer: built maps (n, H, W) -> [a, f, n_patches, largest_patch_px]."""

    def __init__(self, threshold: float = DEFAULT_THRESHOLD, connectivity: int = 4,
                 min_box_pixels: int = 1):
        self.threshold = threshold
        self.connectivity = connectivity
        self.min_box_pixels = min_box_pixels

    def fit(self, X, y=None):
        check_maps(X)
        self.n_features_out_ = 4
        return self

    def transform(self, X) -> np.ndarray:
        maps = check_maps(X)
        rows = []
        for m in maps:
            r = city_stats(m, "", "real", self.threshold, self.connectivity, self.min_box_pixels)
            rows.append([r.a, r.f, r.n_patches, r.largest_patch_px])
        return np.asarray(rows, dtype=np.float64)

    def get_feature_names_out(self, input_features=None):
        return np.array(["a", "f", "n_patches", "largest_patch_px"], dtype=object)
