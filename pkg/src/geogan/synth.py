"""Procedural synthetic cities.

All randomness comes from numpy's Philox generator, a counter-based bit
generator keyed directly by the 64-bit city seed, so a given
:class:`SynthParams` produces the same stack on every platform.

Built land grows from ``n_seeds`` nuclei on a grid ``subpixels`` times finer
than the tile. At each of ``growth_steps`` steps a batch of free land cells is
drawn with probability proportional to ``exp(-d / tau)``, where ``d`` is the
Euclidean distance to the nearest built cell, times a crowding factor
``(1 + built neighbours)^2``. The tile's ``bld`` layer is the built fraction
of each pixel's block of cells. Population is a blur of built density mixed with smooth noise; night
lights are a saturating function of population with light bleeding over water.
Only the built layer is water-masked.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from scipy import ndimage

from .exceptions import ValidationError
from .raster import LUM_MAX, CityStack, apply_water_mask, normalize_layers, save_tile

log = logging.getLogger(__name__)

WATER_MODES = ("none", "river", "coast", "blobs")
POP_SCALE = 30_000.0
RURAL_POP = 0.002
TILE_SUFFIX = ".cstk"
MANIFEST_NAME = "manifest.jsonl"
_NEIGHBOURS = np.array([[1, 1, 1], [1, 0, 1], [1, 1, 1]], dtype=np.float64)


@dataclass(frozen=True)
class SynthParams:
    seed: int = 0
    size: int = 64
    n_seeds: int = 6
    growth_steps: int = 40
    # "mixed" draws one of WATER_MODES per city from the city's own stream
    water_mode: str = "mixed"
    noise_scale: float = 0.1
    pop_coupling: float = 0.8
    lum_coupling: float = 0.8
    tau: float = 4.0
    subpixels: int = 4
    growth_rate: float = 0.0035
    window_km: float = 100.0

    def validate(self) -> None:
        if self.size < 16:
            raise ValidationError("synthetic city size must be >= 16")
        if self.n_seeds < 0 or self.growth_steps < 0:
            raise ValidationError("n_seeds and growth_steps must be >= 0")
        if self.n_seeds == 0 and self.growth_steps > 0:
            raise ValidationError("growth needs at least one seed")
        if self.water_mode not in WATER_MODES + ("mixed",):
            raise ValidationError(f"unknown water_mode {self.water_mode!r}")
        if self.noise_scale < 0:
            raise ValidationError("noise_scale must be >= 0")
        for name in ("pop_coupling", "lum_coupling"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1]")
        if self.subpixels < 1:
            raise ValidationError("subpixels must be >= 1")
        if not self.tau > 0:
            raise ValidationError("tau must be > 0")
        if not 0 <= self.seed < 2 ** 64:
            raise ValidationError("seed must be a 64-bit unsigned integer")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed)))


def city_id_for(seed: int) -> str:
    return f"syn-{seed:08d}"


def _unit(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    return (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)


def _water(mode: str, n: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    s = n / 64.0
    if mode == "none":
        return np.zeros((n, n))
    if mode == "river":
        centre = rng.uniform(0.3, 0.7) * n
        amp = rng.uniform(2, 8) * s
        wavelength = rng.uniform(0.6, 1.5) * n
        phase = rng.uniform(0, 2 * math.pi)
        width = rng.uniform(1.5, 3.5) * s
        along, across = (xx, yy) if rng.random() < 0.5 else (yy, xx)
        path = centre + amp * np.sin(2 * math.pi * along / wavelength + phase)
        return (np.abs(across - path) < width).astype(np.float64)
    if mode == "coast":
        theta = rng.uniform(0, 2 * math.pi)
        u = (xx - n / 2) * math.cos(theta) + (yy - n / 2) * math.sin(theta)
        v = -(xx - n / 2) * math.sin(theta) + (yy - n / 2) * math.cos(theta)
        offset = rng.uniform(0.15, 0.35) * n
        wave = rng.uniform(1, 4) * s * np.sin(2 * math.pi * v / rng.uniform(0.3, 0.8) / n
                                              + rng.uniform(0, 2 * math.pi))
        return (u > offset + wave).astype(np.float64)
    if mode == "blobs":
        water = np.zeros((n, n))
        for _ in range(int(rng.integers(2, 5))):
            cy, cx = rng.uniform(0, n, size=2)
            r = rng.uniform(3, 8) * s
            water[(yy - cy) ** 2 + (xx - cx) ** 2 < r * r] = 1.0
        return water
    raise ValidationError(f"unknown water_mode {mode!r}")


def _grow(params: SynthParams, water: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Grow a footprint on a ``subpixels``-times finer grid; returns the fine mask."""
    n, k = params.size, params.subpixels
    nf = n * k
    built = np.zeros(nf * nf, dtype=bool)
    land = np.flatnonzero(water.reshape(-1) == 0)
    if params.n_seeds == 0 or land.size == 0:
        return built.reshape(nf, nf)
    # nuclei sit in distinct coarse cells: the first near the window centre,
    # the others anywhere in the inner region
    ly, lx = np.divmod(land, n)
    r2 = (ly + 0.5 - n / 2) ** 2 + (lx + 0.5 - n / 2) ** 2
    inner = land[r2 < (n / 3) ** 2]
    pool = inner if inner.size >= params.n_seeds else land
    py, px = np.divmod(pool, n)
    pr2 = (py + 0.5 - n / 2) ** 2 + (px + 0.5 - n / 2) ** 2
    first = pool[np.argmin(pr2 + rng.uniform(0, n, size=pool.size))]
    rest = rng.choice(pool[pool != first], size=min(params.n_seeds - 1, pool.size - 1), replace=False)
    cells = np.concatenate([[first], rest])
    cy, cx = np.divmod(cells, n)
    oy, ox = rng.integers(0, k, size=(2, cells.size))
    built[(cy * k + oy) * nf + cx * k + ox] = True

    vigor = rng.uniform(0.4, 1.6)
    per_step = max(1, int(round(vigor * params.growth_rate * nf * nf)))
    free_land = np.kron(water, np.ones((k, k))).reshape(-1) == 0
    for _ in range(params.growth_steps):
        grid = built.reshape(nf, nf)
        dist = ndimage.distance_transform_edt(~grid).reshape(-1)
        cand = np.flatnonzero(free_land & ~built)
        if cand.size == 0:
            break
        crowd = ndimage.convolve(grid.astype(np.float64), _NEIGHBOURS, mode="constant").reshape(-1)
        w = np.exp(-dist[cand] / params.tau) * (1.0 + crowd[cand]) ** 2
        picked = rng.choice(cand, size=min(per_step, cand.size), replace=False, p=w / w.sum())
        built[picked] = True
    return built.reshape(nf, nf)


def generate_city(params: SynthParams) -> CityStack:
    """Build one raw-unit synthetic city.

    ``bld`` is the built fraction of each pixel, i.e. the block mean of the
    subpixel footprint.
    """
    params.validate()
    rng = make_rng(params.seed)
    n = params.size
    s = n / 64.0
    mode = params.water_mode
    if mode == "mixed":
        mode = WATER_MODES[int(rng.integers(len(WATER_MODES)))]
    water = _water(mode, n, rng)

    k = params.subpixels
    fine = _grow(params, water, rng).astype(np.float64)
    bld = apply_water_mask(fine.reshape(n, k, n, k).mean(axis=(1, 3)), water)

    smooth = _unit(ndimage.gaussian_filter(rng.standard_normal((n, n)), 4 * s))
    urban = _unit(ndimage.gaussian_filter(bld, 1.5 * s))
    pop_frac = (params.pop_coupling * urban + (1 - params.pop_coupling) * urban * smooth
                + RURAL_POP * (0.5 + smooth))
    pop = POP_SCALE * pop_frac * np.exp(params.noise_scale * rng.standard_normal((n, n)))

    glow = 1.0 - np.exp(-3.0 * pop / POP_SCALE)
    smooth2 = _unit(ndimage.gaussian_filter(rng.standard_normal((n, n)), 4 * s))
    lum_frac = (params.lum_coupling * glow + (1 - params.lum_coupling) * glow * smooth2) \
        * np.exp(params.noise_scale * rng.standard_normal((n, n)))
    lum = np.clip(LUM_MAX * ndimage.gaussian_filter(lum_frac, 0.75 * s), 0, LUM_MAX)

    yy, xx = np.mgrid[0:n, 0:n]
    angle = np.arctan2(yy - n / 2, xx - n / 2)
    radius = n * (0.3 + 0.05 * np.sin(3 * angle + rng.uniform(0, 2 * math.pi)))
    boundary = (((yy - n / 2) ** 2 + (xx - n / 2) ** 2) < radius ** 2).astype(np.float64)

    layers = {"pop": pop, "lum": lum, "bld": bld, "water": water, "boundary": boundary}
    return CityStack(layers, km_per_px=params.window_km / n, city_id=city_id_for(params.seed))


def split_ids(ids: List[str], test_fraction: float = 0.1) -> Dict[str, str]:
    """Deterministic hash split: the floor(n * test_fraction) ids with the
    smallest SHA-256 digest go to ``test``, the rest to ``train``."""
    n_test = int(math.floor(len(ids) * test_fraction + 1e-9))
    ranked = sorted(ids, key=lambda i: hashlib.sha256(i.encode("utf-8")).hexdigest())
    test = set(ranked[:n_test])
    return {i: ("test" if i in test else "train") for i in ids}


def generate_dataset(n: int, base_seed: int, out_dir, params: Optional[SynthParams] = None,
                     normalize: bool = True, test_fraction: float = 0.1) -> List[dict]:
    """Write ``n`` tiles plus ``manifest.jsonl`` into ``out_dir``.

    City ``i`` uses seed ``base_seed + i``. Returns the manifest records.
    """
    if n < 1:
        raise ValidationError("dataset size n must be >= 1")
    params = params or SynthParams()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [base_seed + i for i in range(n)]
    ids = [city_id_for(sd) for sd in seeds]
    splits = split_ids(ids, test_fraction)
    records = []
    for sd, cid in zip(seeds, ids):
        stack = generate_city(replace(params, seed=sd))
        if normalize:
            stack = normalize_layers(stack)
        fname = cid + TILE_SUFFIX
        save_tile(stack, out / fname)
        records.append({"city_id": cid, "seed": sd, "split": splits[cid], "path": fname})
    with open(out / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    log.info("wrote %d tiles to %s", n, out)
    return records


def read_manifest(path) -> List[dict]:
    """Records from a manifest file (or a directory containing ``manifest.jsonl``).

    Relative tile paths are resolved against the manifest's directory.
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            rec["path"] = str((path.parent / rec["path"]).resolve())
            records.append(rec)
    return records


def params_dict(params: SynthParams) -> dict:
    return asdict(params)
