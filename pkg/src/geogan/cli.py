"""Batch command line: ``geogan <subcommand> [flags]``.

Every subcommand that takes ``--out`` writes ``run.json`` there before doing
any work; ``geogan replay <run.json>`` re-executes it. Exit codes: 0 ok,
2 usage or validation error, 3 I/O error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .exceptions import NumericError, TileFormatError, ValidationError

log = logging.getLogger("geogan")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
RUN_FILE = "run.json"
CHECKPOINT_NAME = "model.gckp"
TRAIN_LOG_NAME = "train_log.csv"


class GradCheckFailed(NumericError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(f"{self.prog}: {message}")


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{what} not found: {p}")
    return p


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _write_run_json(args, argv: Sequence[str]) -> None:
    out = _out_dir(args)
    record = {
        "tool": "geogan",
        "version": __version__,
        "command": args.command,
        "argv": list(argv),
        "args": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "seed": getattr(args, "seed", None),
        "threads": getattr(args, "threads", None),
    }
    with open(out / RUN_FILE, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _threads(args) -> int:
    return args.threads if args.threads else (os.cpu_count() or 1)


# -- subcommands ------------------------------------------------------------
def cmd_synth(args) -> int:
    from .synth import SynthParams, generate_dataset

    params = SynthParams(size=args.size, water_mode=args.water_mode)
    records = generate_dataset(args.n, args.seed, args.out, params)
    n_test = sum(r["split"] == "test" for r in records)
    print(f"wrote {len(records)} tiles ({len(records) - n_test} train / {n_test} test) to {args.out}")
    return EXIT_OK


def _load(data: str, split: str):
    from .gan.data import load_split

    _require(data, "dataset")
    ids, stacks = load_split(data, split)
    if not stacks:
        raise ValidationError(f"no cities in split {split!r} of {data}")
    return ids, stacks


def _load_model(path):
    from .gan.estimator import ConstrainedPix2Pix

    return ConstrainedPix2Pix.load(_require(path, "checkpoint"))


def cmd_train(args) -> int:
    from .gan.data import stacks_to_arrays
    from .gan.estimator import ConstrainedPix2Pix

    _, stacks = _load(args.data, "train")
    X, y = stacks_to_arrays(stacks, args.mode)
    out = Path(args.out)
    est = ConstrainedPix2Pix(
        image_size=X.shape[-1], base_width=args.base_width, depth=args.depth, dropout=args.dropout,
        l1_weight=args.lambda_, alpha=args.alpha, lr=args.lr, batch_size=args.batch,
        epochs=args.epochs, seed=args.seed, input_mode=args.mode, threads=_threads(args),
        checkpoint_every=args.checkpoint_every,
        checkpoint_dir=str(out / "checkpoints") if args.checkpoint_every else None,
        log_path=str(out / TRAIN_LOG_NAME), record_time=args.record_time, verbose=1)
    est.fit(X, y)
    est.save(out / CHECKPOINT_NAME)
    last = est.history_[-1] if est.history_ else None
    msg = f"trained {est.epoch_} epochs ({est.step_} steps) on {X.shape[0]} cities"
    if last:
        msg += f"; last L1 {last.l1:.4f}, overlap {last.overlap_rate:.5f}"
    print(msg)
    return EXIT_OK


def cmd_generate(args) -> int:
    from .gan.data import stacks_to_arrays
    from .raster import export_png, save_tile
    from .synth import MANIFEST_NAME, TILE_SUFFIX

    est = _load_model(args.checkpoint)
    ids, stacks = _load(args.data, args.split)
    X, _ = stacks_to_arrays(stacks, est.config_.input_mode)
    pred = est.predict(X)
    out = Path(args.out)
    records = []
    for cid, stack, p in zip(ids, stacks, pred):
        gen = stack.with_layers(bld=np.clip(p, 0.0, 1.0))
        save_tile(gen, out / (cid + TILE_SUFFIX))
        records.append({"city_id": cid, "seed": None, "split": args.split, "path": cid + TILE_SUFFIX})
        if args.png:
            export_png(gen, out / f"{cid}.png")
    if args.samples:
        sdir = out / "samples"
        sdir.mkdir(exist_ok=True)
        draws = est.sample(X, seed=args.seed, n_samples=args.samples)
        for k in range(args.samples):
            for cid, stack, p in zip(ids, stacks, draws[k]):
                save_tile(stack.with_layers(bld=np.clip(p, 0.0, 1.0)), sdir / f"{cid}_s{k}{TILE_SUFFIX}")
    with open(out / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"generated {len(records)} built maps into {out}")
    return EXIT_OK


def _stats_for(data: str, source: str, split: str, only: Optional[set] = None):
    from .stats import city_stats

    ids, stacks = _load(data, split)
    recs = []
    for cid, s in zip(ids, stacks):
        if only is not None and cid not in only:
            continue
        recs.append(city_stats(s["bld"], cid, source, extent_km=s.extent_km))
    return recs


def cmd_stats(args) -> int:
    from .stats import compare_stats, write_histograms_json, write_scatter_csv, write_stats_csv
    from .svg import scatter_svg

    out = Path(args.out)
    if args.generated:
        gen = _stats_for(args.generated, "generated", "all")
        real = _stats_for(args.data, "real", "all", {g.city_id for g in gen})
    else:
        gen, real = [], _stats_for(args.data, "real", args.split)
    records = real + gen
    write_stats_csv(records, out / "stats.csv")
    write_histograms_json(records, out / "histograms.json")
    if not gen:
        print(f"wrote statistics for {len(real)} cities")
        return EXIT_OK
    report = compare_stats(real, gen, strict=False)
    write_scatter_csv(report, out / "scatter.csv")
    summary = report.summary()
    with open(out / "r2.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    if args.svg:
        pairs = report.pairs
        scatter_svg([p["a_real"] for p in pairs], [p["a_gen"] for p in pairs], out / "scatter_a.svg",
                    f"built-area fraction, R2={report.r2_a:.3f}", "real a", "generated a")
        scatter_svg([p["f_real"] for p in pairs], [p["f_gen"] for p in pairs], out / "scatter_f.svg",
                    f"fractal dimension, R2={report.r2_f:.3f}", "real f", "generated f")
    print(f"R2(a) = {report.r2_a:.4f}, R2(f) = {report.r2_f:.4f} over {len(report.pairs)} cities")
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    from .exceptions import InsufficientPatchesError
    from .gan.data import stacks_to_arrays
    from .raster import export_gray_png
    from .sensitivity import (FACTORS, aggregate_profiles, decay_summary, input_gradient,
                              region_select, roi_profile, save_gradient_field, spillover_fraction,
                              write_aggregate_csv)
    from .svg import box_svg, line_svg

    est = _load_model(args.checkpoint)
    if est.config_.input_mode != "factors":
        raise ValidationError("sensitivity needs a model trained with --mode factors")
    ids, stacks = _load(args.data, args.split)
    if args.limit:
        ids, stacks = ids[:args.limit], stacks[:args.limit]
    X, _ = stacks_to_arrays(stacks, "factors")
    out = Path(args.out)
    gdir = out / "gradients"
    gdir.mkdir(exist_ok=True)
    spill_rows, prof_rows, grouped = [], [], {f: [] for f in FACTORS}
    skipped = []
    for cid, stack, x in zip(ids, stacks, X):
        try:
            roi = region_select(stack["bld"], args.region)
        except InsufficientPatchesError as exc:
            if not args.skip_insufficient:
                raise InsufficientPatchesError(f"{cid}: {exc}") from exc
            skipped.append(cid)
            log.warning("%s skipped: %s", cid, exc)
            continue
        field_ = input_gradient(est, x, roi, km_per_px=stack.km_per_px, city_id=cid)
        save_gradient_field(field_, gdir / f"{cid}.cstk")
        if args.png:
            for f in FACTORS:
                export_gray_png(field_.factor(f), gdir / f"{cid}_{f}.png", signed=True)
        sp = spillover_fraction(field_)
        spill_rows.append((cid, roi.mode, roi.size, repr(float(sp["pop"])), repr(float(sp["lum"]))))
        for f in FACTORS:
            prof = roi_profile(field_, f, args.bin_km, args.rays, seed=args.seed)
            grouped[f].append(("all", prof))
            for lo, hi, v in zip(prof.edges_km[:-1], prof.edges_km[1:], prof.means):
                prof_rows.append((cid, f, lo, hi, repr(float(v))))
    if not spill_rows:
        raise InsufficientPatchesError("insufficient patches in every city")
    with open(out / "spillover.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(("city_id", "region", "roi_px", "spill_pop", "spill_lum"))
        wr.writerows(spill_rows)
    with open(out / "profiles.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(("city_id", "factor", "bin_lo_km", "bin_hi_km", "mean_abs_grad"))
        wr.writerows(prof_rows)
    summary = {"region": args.region, "bin_km": args.bin_km, "rays": args.rays,
               "n_cities": len(spill_rows), "skipped": skipped, "factors": {}}
    for f in FACTORS:
        rows = aggregate_profiles(grouped[f])
        write_aggregate_csv(rows, out / f"decay_{f}.csv")
        summary["factors"][f] = {
            "decay": [s.as_dict() for s in decay_summary(rows)],
            "spillover_median": float(np.median([float(r[3 if f == "pop" else 4]) for r in spill_rows])),
        }
        if args.svg:
            line_svg({"median": ([(r.bin_lo_km + r.bin_hi_km) / 2 for r in rows],
                                 [r.quartiles[2] for r in rows])},
                     out / f"decay_{f}.svg", f"gradient decay ({f})", "distance from ROI (km)",
                     "log10 normalized |grad|")
    if args.svg:
        boxes = []
        for k, f in enumerate(FACTORS):
            vals = np.array([float(r[3 + k]) for r in spill_rows])
            boxes.append((f, list(np.percentile(vals, [0, 25, 50, 75, 100]))))
        box_svg(boxes, out / "spillover.svg", "gradient spillover", "fraction outside ROI")
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    print(f"sensitivity for {len(spill_rows)} cities written to {out}")
    return EXIT_OK


def cmd_similar(args) -> int:
    from .gan.data import stacks_to_arrays
    from .kdtree import build_similarity_index

    est = _load_model(args.checkpoint)
    ids, stacks = _load(args.data, args.split)
    if args.k >= len(ids):
        raise ValidationError(f"--k {args.k} needs at least {args.k + 1} cities, found {len(ids)}")
    X, y = stacks_to_arrays(stacks, est.config_.input_mode)
    feats = est.extract_features(X, y)
    index = build_similarity_index(feats, ids)
    out = Path(args.out)
    with open(out / "neighbors.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(("city_id", "rank", "neighbor_id", "distance"))
        for cid, v in zip(ids, feats):
            nbr, dist = index.query(v, args.k + 1)
            ranked = [(n, d) for n, d in zip(nbr, dist) if n != cid][:args.k]
            for r, (n, d) in enumerate(ranked, 1):
                wr.writerow((cid, r, n, repr(float(d))))
    np.savetxt(out / "features.csv", feats, delimiter=",", header=",".join(ids), comments="")
    print(f"top {args.k} neighbours for {len(ids)} cities written to {out / 'neighbors.csv'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .autodiff.gradcheck import check_primitives

    out = Path(args.out) if args.out else None
    failed = []
    if args.scope in ("primitives", "all"):
        reports = check_primitives(seed=args.seed)
        rows = []
        for name, rep in reports.items():
            status = "PASS" if rep.passed else "FAIL"
            print(f"{status} {name:<16} max rel err {rep.max_rel_err:.3e}")
            if not rep.passed:
                failed.append(name)
            for c in rep.checks:
                rows.append((name, c.name, repr(float(c.max_rel_err)), c.checked, c.skipped,
                             int(c.max_rel_err < rep.tol)))
        if out:
            with open(out / "gradcheck_primitives.csv", "w", newline="", encoding="utf-8") as fh:
                wr = csv.writer(fh)
                wr.writerow(("primitive", "tensor", "max_rel_err", "checked", "skipped", "passed"))
                wr.writerows(rows)
    if args.scope in ("sensitivity", "all"):
        rep = _sensitivity_check(args)
        for r in rep.rows:
            log.info("%s (%d,%d) analytic %.6e numeric %.6e rel %.2e", r.channel, r.row, r.col,
                     r.analytic, r.numeric, r.rel_err)
        status = "PASS" if rep.passed else "FAIL"
        print(f"{status} sensitivity      {len(rep.rows)} pixels, max rel err {rep.max_rel_err:.3e}, "
              f"{rep.skipped} skipped at kinks")
        if not rep.passed:
            failed.append("sensitivity")
        if out:
            rep.write_csv(out / "gradcheck_sensitivity.csv")
    if failed:
        raise GradCheckFailed(f"gradient check failed for: {', '.join(failed)}")
    return EXIT_OK


def _sensitivity_check(args):
    from .gan.data import stacks_to_arrays
    from .gan.networks import UNetGenerator
    from .sensitivity import check_input_gradient, region_select
    from .synth import SynthParams, generate_city
    from .raster import normalize_layers

    if args.data:
        _, stacks = _load(args.data, "all")
        stack = stacks[0]
    else:
        stack = normalize_layers(generate_city(SynthParams(seed=args.seed, size=args.size)))
    X, _ = stacks_to_arrays([stack], "factors")
    model = _load_model(args.checkpoint) if args.checkpoint else \
        UNetGenerator(3, 16, 4, 0.2, stack.width, seed=args.seed)
    roi = region_select(stack["bld"], "urban_core")
    return check_input_gradient(model, X[0], roi, n_pixels=args.samples, seed=args.seed)


def cmd_replay(args) -> int:
    path = _require(args.run_json, "run file")
    with open(path, encoding="utf-8") as fh:
        record = json.load(fh)
    argv = record.get("argv")
    if not isinstance(argv, list) or not argv:
        raise ValidationError(f"{path} has no replayable argv")
    return main(argv)


# -- parser -----------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="geogan", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"geogan {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic city dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--water-mode", default="mixed",
                   choices=("mixed", "none", "river", "coast", "blobs"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the constrained pix2pix model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--alpha", type=float, default=100.0)
    t.add_argument("--lambda", dest="lambda_", type=float, default=100.0)
    t.add_argument("--dropout", type=float, default=0.2)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--lr", type=float, default=2e-4)
    t.add_argument("--threads", type=int, default=None)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--mode", choices=("factors", "water_only"), default="factors")
    t.add_argument("--base-width", type=int, default=16)
    t.add_argument("--depth", type=int, default=4)
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--record-time", action="store_true",
                   help="fill the wall_ms log column (makes logs run-dependent)")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="predict built maps for a dataset split")
    g.add_argument("--data", required=True)
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--split", default="test", choices=("train", "test", "all"))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--samples", type=int, default=0, help="extra stochastic draws per city")
    g.add_argument("--png", action="store_true")
    g.set_defaults(func=cmd_generate)

    st = sub.add_parser("stats", help="urban-form statistics and real-vs-generated R2")
    st.add_argument("--data", required=True)
    st.add_argument("--generated", default=None)
    st.add_argument("--out", required=True)
    st.add_argument("--split", default="all", choices=("train", "test", "all"))
    st.add_argument("--svg", action="store_true")
    st.set_defaults(func=cmd_stats)

    se = sub.add_parser("sensitivity", help="ROI input gradients, spillover and decay profiles")
    se.add_argument("--data", required=True)
    se.add_argument("--checkpoint", required=True)
    se.add_argument("--out", required=True)
    se.add_argument("--split", default="test", choices=("train", "test", "all"))
    se.add_argument("--region", choices=("core", "secondary_top3"), default="core")
    se.add_argument("--bin-km", type=float, default=7.0)
    se.add_argument("--rays", type=int, default=50)
    se.add_argument("--seed", type=int, default=0)
    se.add_argument("--limit", type=int, default=0)
    se.add_argument("--skip-insufficient", action="store_true")
    se.add_argument("--png", action="store_true")
    se.add_argument("--svg", action="store_true")
    se.set_defaults(func=cmd_sensitivity)

    si = sub.add_parser("similar", help="k nearest cities in discriminator feature space")
    si.add_argument("--data", required=True)
    si.add_argument("--checkpoint", required=True)
    si.add_argument("--out", required=True)
    si.add_argument("--k", type=int, default=3)
    si.add_argument("--split", default="all", choices=("train", "test", "all"))
    si.set_defaults(func=cmd_similar)

    gc = sub.add_parser("gradcheck", help="finite-difference checks of the autodiff engine")
    gc.add_argument("--scope", choices=("primitives", "sensitivity", "all"), default="primitives")
    gc.add_argument("--samples", type=int, default=20)
    gc.add_argument("--checkpoint", default=None)
    gc.add_argument("--data", default=None)
    gc.add_argument("--size", type=int, default=64)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--out", default=None)
    gc.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("replay", help="re-run the command recorded in a run.json")
    r.add_argument("run_json")
    r.set_defaults(func=cmd_replay)
    return p


def _setup_logging() -> None:
    level = os.environ.get("GEOGAN_LOG", "WARNING").upper()
    if level.isdigit():
        lvl = int(level)
    else:
        lvl = logging.getLevelName(level)
        if not isinstance(lvl, int):
            lvl = logging.WARNING
    logging.basicConfig(level=lvl, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger().setLevel(lvl)


def _validate_counts(args) -> None:
    for name in ("n", "epochs", "batch", "rays", "k", "samples", "threads", "size", "limit"):
        v = getattr(args, name, None)
        if v is None:
            continue
        floor = 0 if name in ("epochs", "samples", "limit") else 1
        if name == "size" and v < 16:
            raise ValidationError("--size must be >= 16")
        if v < floor:
            raise ValidationError(f"--{name} must be >= {floor}")
    if getattr(args, "bin_km", 1.0) <= 0:
        raise ValidationError("--bin-km must be > 0")


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        _validate_counts(args)
        if args.command != "replay" and getattr(args, "out", None):
            _write_run_json(args, argv)
        return args.func(args)
    except SystemExit as exc:
        # --help / --version
        return int(exc.code or 0)
    except (TileFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
