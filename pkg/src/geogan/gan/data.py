"""Convert city stacks into estimator arrays."""
from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np

from ..exceptions import ValidationError
from ..raster import CityStack, load_tile, normalize_layers
from ..synth import read_manifest
from .estimator import INPUT_MODES


def stacks_to_arrays(stacks: Sequence[CityStack], input_mode: str = "factors"
                     ) -> Tuple[np.ndarray, np.ndarray]:
    """(X, y) with X = input planes per ``input_mode`` and y = bld."""
    if input_mode not in INPUT_MODES:
        raise ValidationError(f"unknown input_mode {input_mode!r}")
    if not stacks:
        raise ValidationError("no city stacks given")
    names = INPUT_MODES[input_mode]
    X, y = [], []
    for s in stacks:
        missing = [n for n in names + ("bld",) if n not in s]
        if missing:
            raise ValidationError(f"{s.city_id} lacks layers {missing}")
        if any(not s.normalized[n] for n in ("pop", "lum") if n in names):
            s = normalize_layers(s)
        X.append(np.stack([s[n] for n in names]))
        y.append(s["bld"])
    return np.stack(X).astype(np.float32), np.stack(y).astype(np.float32)


def load_split(manifest, split: str = "train") -> Tuple[List[str], List[CityStack]]:
    """City ids and stacks for one split (``"all"`` for every record)."""
    records = read_manifest(manifest)
    chosen = [r for r in records if split == "all" or r["split"] == split]
    return [r["city_id"] for r in chosen], [load_tile(r["path"]) for r in chosen]
