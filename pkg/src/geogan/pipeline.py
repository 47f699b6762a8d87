"""End-to-end run: synth -> train -> generate -> stats -> sensitivity -> similar.

    python3 -m geogan.pipeline --out work/ [--n 200] [--epochs 30] [--alpha 100]

Each stage is the corresponding CLI subcommand, so every stage directory
carries its own ``run.json``.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

from .cli import EXIT_OK, main as cli_main
from .exceptions import GeoGanError


@dataclass
class PipelinePaths:
    root: Path

    @property
    def data(self) -> Path:
        return self.root / "data"

    def run(self, tag: str = "") -> Path:
        return self.root / f"run{tag}"

    def checkpoint(self, tag: str = "") -> Path:
        return self.run(tag) / "model.gckp"

    @property
    def generated(self) -> Path:
        return self.root / "generated"

    @property
    def stats(self) -> Path:
        return self.root / "stats"

    def sensitivity(self, region: str = "core") -> Path:
        return self.root / f"sensitivity_{region}"

    @property
    def similar(self) -> Path:
        return self.root / "similar"


class StageFailed(GeoGanError):
    def __init__(self, stage: str, code: int):
        super().__init__(f"stage {stage!r} exited with code {code}")
        self.stage, self.code = stage, code


def _stage(name: str, argv: List[str]) -> None:
    code = cli_main(argv)
    if code != EXIT_OK:
        raise StageFailed(name, code)


def synth_and_train(root, n: int = 200, seed: int = 0, size: int = 64, epochs: int = 30,
                    alpha: float = 100.0, threads: int = 1, tag: str = "",
                    extra_train: Optional[List[str]] = None) -> PipelinePaths:
    paths = PipelinePaths(Path(root))
    if not (paths.data / "manifest.jsonl").exists():
        _stage("synth", ["synth", "--n", str(n), "--seed", str(seed), "--size", str(size),
                         "--out", str(paths.data)])
    _stage("train", ["train", "--data", str(paths.data), "--out", str(paths.run(tag)),
                     "--epochs", str(epochs), "--alpha", repr(float(alpha)), "--seed", str(seed),
                     "--threads", str(threads)] + list(extra_train or []))
    return paths


def analyse(paths: PipelinePaths, tag: str = "", bin_km: float = 7.0, rays: int = 50,
            k: int = 3, regions=("core", "secondary_top3")) -> PipelinePaths:
    ckpt = str(paths.checkpoint(tag))
    _stage("generate", ["generate", "--data", str(paths.data), "--checkpoint", ckpt,
                        "--out", str(paths.generated), "--split", "test", "--png"])
    _stage("stats", ["stats", "--data", str(paths.data), "--generated", str(paths.generated),
                     "--out", str(paths.stats), "--svg"])
    for region in regions:
        _stage("sensitivity", ["sensitivity", "--data", str(paths.data), "--checkpoint", ckpt,
                               "--out", str(paths.sensitivity(region)), "--region", region,
                               "--bin-km", repr(float(bin_km)), "--rays", str(rays),
                               "--skip-insufficient", "--svg", "--png"])
    _stage("similar", ["similar", "--data", str(paths.data), "--checkpoint", ckpt,
                       "--out", str(paths.similar), "--k", str(k), "--split", "test"])
    return paths


def run_pipeline(root, n: int = 200, seed: int = 0, size: int = 64, epochs: int = 30,
                 alpha: float = 100.0, threads: int = 1) -> PipelinePaths:
    paths = synth_and_train(root, n, seed, size, epochs, alpha, threads)
    return analyse(paths)


def main(argv: Optional[List[str]] = None) -> int:
    p = argparse.ArgumentParser(prog="python3 -m geogan.pipeline", description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--alpha", type=float, default=100.0)
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args(argv)
    try:
        paths = run_pipeline(args.out, args.n, args.seed, args.size, args.epochs, args.alpha, args.threads)
    except StageFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    print(f"pipeline outputs in {paths.root}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
