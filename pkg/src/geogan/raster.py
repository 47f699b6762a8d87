"""City tile data model and its on-disk container format.

Container layout (all integers little-endian)::

    4 bytes   magic ("CSTK" for city tiles)
    4 bytes   u32 header length L, including the trailing newline
    L bytes   UTF-8 JSON header terminated by "\\n"
    payload   planar float32 arrays, row-major, in header order

Tile headers carry ``version``, ``width``, ``height``, ``km_per_px``,
``city_id``, ``layers`` ([{"id", "dtype"}]), ``normalized`` ({id: bool}),
``norm_scheme`` and ``pop_max_cap``. Model checkpoints reuse the same container
with a different magic and a tensor list in place of layers.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .exceptions import StateError, TileFormatError, TruncationError, ValidationError

TILE_MAGIC = b"CSTK"
FORMAT_VERSION = 1
LAYER_IDS = ("pop", "lum", "bld", "water", "boundary")
BINARY_LAYERS = ("water", "boundary")
LUM_MAX = 180.0
DEFAULT_POP_CAP = 50_000.0
NORM_SCHEME = "log1p-cap"


# -- generic container -------------------------------------------------------

def write_container(path, magic: bytes, header: dict, arrays: Sequence[np.ndarray]) -> None:
    text = json.dumps(header, separators=(",", ":")) + "\n"
    head = text.encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


def read_container(path, magic: bytes) -> Tuple[dict, bytes]:
    blob = Path(path).read_bytes()
    if len(blob) < 8 or blob[:4] != magic:
        raise TileFormatError(f"{path}: bad magic, expected {magic!r}")
    (hlen,) = struct.unpack("<I", blob[4:8])
    if 8 + hlen > len(blob):
        raise TruncationError(f"{path}: header length {hlen} exceeds file size")
    raw = blob[8:8 + hlen]
    if not raw.endswith(b"\n"):
        raise TileFormatError(f"{path}: header is not newline-terminated")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TileFormatError(f"{path}: corrupt header ({exc})") from exc
    if not isinstance(header, dict):
        raise TileFormatError(f"{path}: header must be a JSON object")
    if header.get("version") != FORMAT_VERSION:
        raise TileFormatError(f"{path}: unsupported format version {header.get('version')!r}")
    return header, blob[8 + hlen:]


def split_payload(payload: bytes, shapes: Sequence[Tuple[int, ...]], where="payload") -> List[np.ndarray]:
    sizes = [int(np.prod(s)) * 4 for s in shapes]
    if sum(sizes) != len(payload):
        raise TruncationError(f"{where}: expected {sum(sizes)} payload bytes, found {len(payload)}")
    out, offset = [], 0
    for shape, nbytes in zip(shapes, sizes):
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=offset)
        out.append(arr.reshape(shape).astype(np.float32))
        offset += nbytes
    return out


# -- data model --------------------------------------------------------------

@dataclass(frozen=True)
class TileHeader:
    width: int
    height: int
    km_per_px: float
    city_id: str
    layers: Tuple[str, ...]
    normalized: Mapping[str, bool]
    norm_scheme: str = NORM_SCHEME
    pop_max_cap: float = DEFAULT_POP_CAP
    version: int = FORMAT_VERSION
    magic: bytes = TILE_MAGIC

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "width": self.width,
            "height": self.height,
            "km_per_px": self.km_per_px,
            "city_id": self.city_id,
            "layers": [{"id": lid, "dtype": "f32"} for lid in self.layers],
            "normalized": {lid: bool(self.normalized.get(lid, False)) for lid in self.layers},
            "norm_scheme": self.norm_scheme,
            "pop_max_cap": self.pop_max_cap,
        }

    @classmethod
    def from_json(cls, h: dict) -> "TileHeader":
        try:
            layers = h["layers"]
            ids = tuple(entry["id"] for entry in layers)
            for entry in layers:
                if entry.get("dtype") != "f32":
                    raise TileFormatError(f"unsupported dtype {entry.get('dtype')!r} for layer {entry['id']}")
            return cls(
                width=int(h["width"]),
                height=int(h["height"]),
                km_per_px=float(h["km_per_px"]),
                city_id=str(h["city_id"]),
                layers=ids,
                normalized={k: bool(v) for k, v in h.get("normalized", {}).items()},
                norm_scheme=h.get("norm_scheme", NORM_SCHEME),
                pop_max_cap=float(h.get("pop_max_cap", DEFAULT_POP_CAP)),
                version=int(h["version"]),
            )
        except (KeyError, TypeError) as exc:
            raise TileFormatError(f"header missing or malformed field: {exc}") from exc


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float32, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class CityStack:
    """Aligned raster layers for one city window. Immutable after construction."""

    layers: Mapping[str, np.ndarray]
    km_per_px: float
    city_id: str = "city"
    normalized: Mapping[str, bool] = field(default_factory=dict)
    pop_max_cap: float = DEFAULT_POP_CAP

    def __post_init__(self):
        if not self.layers:
            raise ValidationError("a city stack needs at least one layer")
        unknown = set(self.layers) - set(LAYER_IDS)
        if unknown:
            raise ValidationError(f"unknown layer ids: {sorted(unknown)}")
        try:
            km = float(self.km_per_px)
        except (TypeError, ValueError):
            km = float("nan")
        if not (math.isfinite(km) and km > 0):
            raise ValidationError(f"km_per_px must be finite and > 0, got {self.km_per_px!r}")
        frozen = {lid: _freeze(self.layers[lid]) for lid in LAYER_IDS if lid in self.layers}
        shapes = {a.shape for a in frozen.values()}
        if len(shapes) != 1 or len(next(iter(shapes))) != 2:
            raise ValidationError(f"layers must be 2-d and share one shape, got {shapes}")
        norm = {lid: bool(self.normalized.get(lid, False)) for lid in frozen}
        object.__setattr__(self, "layers", MappingProxyType(frozen))
        object.__setattr__(self, "normalized", MappingProxyType(norm))
        object.__setattr__(self, "km_per_px", km)
        self._validate_values()

    def _validate_values(self) -> None:
        for lid, arr in self.layers.items():
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"layer {lid} has non-finite values")
            if lid in BINARY_LAYERS and not np.all((arr == 0) | (arr == 1)):
                raise ValidationError(f"layer {lid} must be binary (0/1)")
        if "bld" in self.layers and (self.layers["bld"].min() < 0 or self.layers["bld"].max() > 1):
            raise ValidationError("bld values must lie in [0, 1]")
        if "pop" in self.layers and self.layers["pop"].min() < 0:
            raise ValidationError("pop values must be >= 0")
        if "lum" in self.layers:
            hi = 1.0 if self.normalized["lum"] else LUM_MAX
            lum = self.layers["lum"]
            if lum.min() < 0 or lum.max() > hi:
                raise ValidationError(f"lum values must lie in [0, {hi}]")

    @property
    def height(self) -> int:
        return next(iter(self.layers.values())).shape[0]

    @property
    def width(self) -> int:
        return next(iter(self.layers.values())).shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)

    @property
    def extent_km(self) -> float:
        return self.width * self.km_per_px

    def __getitem__(self, lid: str) -> np.ndarray:
        return self.layers[lid]

    def __contains__(self, lid: str) -> bool:
        return lid in self.layers

    def header(self) -> TileHeader:
        return TileHeader(self.width, self.height, self.km_per_px, self.city_id,
                          tuple(self.layers), dict(self.normalized), NORM_SCHEME, self.pop_max_cap)

    def with_layers(self, **updates) -> "CityStack":
        layers = dict(self.layers)
        layers.update(updates)
        return replace(self, layers=layers)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CityStack):
            return NotImplemented
        return (self.header() == other.header()
                and all(np.array_equal(self.layers[k], other.layers[k]) for k in self.layers))


# -- I/O ---------------------------------------------------------------------

def save_tile(stack: CityStack, path) -> None:
    header = stack.header()
    write_container(path, TILE_MAGIC, header.to_json(), [stack.layers[lid] for lid in header.layers])


def read_tile_header(path) -> TileHeader:
    header, _ = read_container(path, TILE_MAGIC)
    return TileHeader.from_json(header)


def load_tile(path) -> CityStack:
    raw, payload = read_container(path, TILE_MAGIC)
    header = TileHeader.from_json(raw)
    unknown = [lid for lid in header.layers if lid not in LAYER_IDS]
    if unknown:
        raise ValidationError(f"{path}: unknown layer ids {unknown}")
    if header.width < 1 or header.height < 1:
        raise TileFormatError(f"{path}: bad dimensions {header.width}x{header.height}")
    arrays = split_payload(payload, [(header.height, header.width)] * len(header.layers), str(path))
    return CityStack(dict(zip(header.layers, arrays)), header.km_per_px, header.city_id,
                     header.normalized, header.pop_max_cap)


# -- transforms --------------------------------------------------------------

def normalize_layers(stack: CityStack, pop_max_cap: Optional[float] = None) -> CityStack:
    """Log-scale pop and lum into [0, 1]; other layers pass through."""
    cap = float(pop_max_cap if pop_max_cap is not None else stack.pop_max_cap)
    if not cap > 0:
        raise ValidationError("pop_max_cap must be > 0")
    targets = [lid for lid in ("pop", "lum") if lid in stack.layers]
    if any(stack.normalized[lid] for lid in targets):
        raise StateError(f"stack {stack.city_id} is already normalized")
    layers = dict(stack.layers)
    norm = dict(stack.normalized)
    if "pop" in layers:
        pop = np.log1p(layers["pop"].astype(np.float64)) / np.log1p(cap)
        layers["pop"] = np.clip(pop, 0.0, 1.0)
        norm["pop"] = True
    if "lum" in layers:
        lum = np.log1p(layers["lum"].astype(np.float64)) / np.log1p(LUM_MAX)
        layers["lum"] = np.clip(lum, 0.0, 1.0)
        norm["lum"] = True
    return replace(stack, layers=layers, normalized=norm, pop_max_cap=cap)


def apply_water_mask(layer: np.ndarray, water: np.ndarray) -> np.ndarray:
    layer = np.asarray(layer)
    water = np.asarray(water)
    if layer.shape != water.shape:
        raise ValidationError(f"shape mismatch {layer.shape} vs {water.shape}")
    return layer * (1 - water).astype(layer.dtype)


def _overlap_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) matrix of overlap lengths, in input-pixel units."""
    edges_out = np.arange(n_out + 1) * (n_in / n_out)
    lo = np.maximum(edges_out[:-1, None], np.arange(n_in)[None, :])
    hi = np.minimum(edges_out[1:, None], np.arange(1, n_in + 1)[None, :])
    return np.clip(hi - lo, 0.0, None)


def resample(stack: CityStack, size: int, allow_upsample: bool = False) -> CityStack:
    """Resize to ``size`` x ``size``: area average for continuous layers, max for binary."""
    if size < 8:
        raise ValidationError("target size must be >= 8")
    if stack.width != stack.height:
        raise ValidationError("resample expects a square stack")
    n = stack.width
    if size == n:
        return stack
    if size > n and not allow_upsample:
        raise ValidationError(f"upsampling {n} -> {size} is disabled")
    m = _overlap_matrix(n, size)
    avg = m / m.sum(axis=1, keepdims=True)
    touch = (m > 1e-12).astype(np.float64)
    layers = {}
    for lid, arr in stack.layers.items():
        a = arr.astype(np.float64)
        if lid in BINARY_LAYERS:
            layers[lid] = ((touch @ a @ touch.T) > 0).astype(np.float32)
        else:
            layers[lid] = avg @ a @ avg.T
    if "bld" in layers:
        layers["bld"] = np.clip(layers["bld"], 0.0, 1.0)
    return replace(stack, layers=layers, km_per_px=stack.km_per_px * n / size)


def _to_byte(values: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def render_rgb(stack: CityStack, channel_map: Optional[Mapping[str, Optional[str]]] = None,
               shade_outside_boundary: bool = False) -> np.ndarray:
    """(H, W, 3) uint8 image. Default map: green=pop, blue=bld. Water is white."""
    channel_map = dict(channel_map or {"r": None, "g": "pop", "b": "bld"})
    bad = [k for k in channel_map if k not in ("r", "g", "b")]
    if bad:
        raise ValidationError(f"unknown channels {bad}; use r, g, b")
    rgb = np.zeros(stack.shape + (3,), dtype=np.uint8)
    for i, ch in enumerate("rgb"):
        lid = channel_map.get(ch)
        if lid is None:
            continue
        if lid not in stack.layers:
            raise ValidationError(f"layer {lid!r} not present in stack {stack.city_id}")
        rgb[..., i] = _to_byte(stack.layers[lid])
    if shade_outside_boundary and "boundary" in stack.layers:
        outside = stack.layers["boundary"] == 0
        rgb[outside] = (rgb[outside] // 2 + 64).astype(np.uint8)
    if "water" in stack.layers:
        rgb[stack.layers["water"] == 1] = 255
    return rgb


def export_png(stack: CityStack, path, channel_map: Optional[Mapping[str, Optional[str]]] = None,
               shade_outside_boundary: bool = False) -> None:
    from PIL import Image

    Image.fromarray(render_rgb(stack, channel_map, shade_outside_boundary), mode="RGB").save(path)


def export_gray_png(values: np.ndarray, path, signed: bool = False) -> None:
    """Single-channel rendering; ``signed`` maps [-max|v|, max|v|] onto [0, 255]."""
    from PIL import Image

    v = np.asarray(values, dtype=np.float64)
    if signed:
        peak = np.abs(v).max() or 1.0
        v = 0.5 + 0.5 * v / peak
    Image.fromarray(_to_byte(v), mode="L").save(path)
