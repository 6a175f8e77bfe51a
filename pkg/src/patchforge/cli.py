"""patchforge command line: ingest, mask, polygon, sample, grid, load,
bench, metrics, probe.

Conventions: float output is fixed 6-decimal for greppability; failures
print one ``error: ...`` line to stderr and exit 1; bad usage exits 2.
A JSON file passed via --config supplies defaults for any tunable flag
not given explicitly. The tile cache budget defaults to the
PATCHFORGE_CACHE_BYTES environment variable when set.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from . import foreground, metrics, pipeline, probe, report, sampler, store
from .rng import RandomStream

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

ENV_CACHE_BYTES = "PATCHFORGE_CACHE_BYTES"


def _fmt(value: float) -> str:
    return f"{value:.6f}"


def _opt(args, name, default=None):
    """Explicit flag wins, then the --config document, then the default."""
    value = getattr(args, name, None)
    if value is not None:
        return value
    return getattr(args, "_config", {}).get(name.replace("_", "-"), default)


def _cache_bytes(args) -> int:
    value = _opt(args, "cache_bytes")
    if value is None:
        value = os.environ.get(ENV_CACHE_BYTES, store.DEFAULT_CACHE_BYTES)
    return int(value)


def _parse_mpps(text: str) -> list:
    """Parse "0.5" or "0.25:1,0.5:2" into [(mpp, weight), ...]."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" in part:
            mpp, weight = part.split(":", 1)
            out.append((float(mpp), float(weight)))
        else:
            out.append((float(part), 1.0))
    if not out:
        raise ValueError(f"no magnifications in {text!r}")
    return out


def _load_rgb(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"))


def _open_slides(args, slide_ids=None):
    root = _opt(args, "store")
    index = store.read_index(root)
    ids = slide_ids or _opt(args, "slides")
    if isinstance(ids, str):
        ids = [s.strip() for s in ids.split(",") if s.strip()]
    if not ids:
        ids = list(index.slides)
    cache = store.TileCache(_cache_bytes(args))
    return {sid: store.open_slide(root, sid, cache=cache) for sid in ids}


def _polygon_for(slide, args) -> foreground.ForegroundPolygon:
    poly_dir = _opt(args, "polygons")
    sid = slide.record.slide_id
    if poly_dir:
        path = Path(poly_dir) / f"{sid}.json"
        if not path.exists():
            raise foreground.EmptyForegroundError(f"no polygon file {path}")
        return foreground.ForegroundPolygon.load(path)
    thumb, scale = slide.thumbnail()
    mask = foreground.mask_from_rgb(
        thumb, float(_opt(args, "threshold", foreground.DEFAULT_LUMINANCE_THRESHOLD)),
        scale=scale,
    )
    return foreground.polygon_from_mask(mask, slide_id=sid)


# --------------------------------------------------------------------------
# subcommand handlers


def cmd_ingest(args) -> int:
    pixels = _load_rgb(args.image)
    record = store.ingest_image(
        pixels,
        args.slide_id,
        float(_opt(args, "base_mpp", 0.25)),
        args.store,
        tile_size=int(_opt(args, "tile_size", 256)),
        downsample_factor=int(_opt(args, "factor", 2)),
        codec=_opt(args, "codec", "png"),
        layout=_opt(args, "layout", "files"),
    )
    print(
        f"ingested {args.slide_id}: {record.width}x{record.height}, "
        f"{len(record.levels)} levels, {len(record.chunks)} chunks"
    )
    return EXIT_OK


def cmd_mask(args) -> int:
    pixels = _load_rgb(args.image)
    mask = foreground.mask_from_rgb(
        pixels,
        float(_opt(args, "threshold", foreground.DEFAULT_LUMINANCE_THRESHOLD)),
        scale=float(_opt(args, "scale", 1.0)),
    )
    Image.fromarray(mask.bits.astype(np.uint8) * 255).save(args.out)
    print(f"foreground_fraction={_fmt(mask.bits.mean())}")
    return EXIT_OK


def cmd_polygon(args) -> int:
    scale = float(_opt(args, "scale", 1.0))
    if args.mask:
        mask = foreground.load_mask_png(args.mask, scale=scale)
    else:
        mask = foreground.mask_from_rgb(
            _load_rgb(args.image),
            float(_opt(args, "threshold", foreground.DEFAULT_LUMINANCE_THRESHOLD)),
            scale=scale,
        )
    poly = foreground.polygon_from_mask(
        mask,
        min_region_px=float(_opt(args, "min_region", foreground.DEFAULT_MIN_REGION_PX)),
        slide_id=_opt(args, "slide_id", ""),
    )
    poly.save(args.out)
    print(f"rings={len(poly.rings)} area={_fmt(poly.area())}")
    return EXIT_OK


def cmd_sample(args) -> int:
    slides = _open_slides(args)
    pairs = [(s.record, _polygon_for(s, args)) for s in slides.values()]
    weights_arg = _opt(args, "weights")
    slide_weights = None
    if weights_arg:
        text = weights_arg
        if not text.lstrip().startswith("{"):
            text = Path(text).read_text(encoding="utf-8")
        slide_weights = {str(k): float(v) for k, v in json.loads(text).items()}
    seed = int(_opt(args, "seed", 0))
    epoch_size = int(_opt(args, "epoch_size", sampler.DEFAULT_EPOCH_SIZE))
    count = _opt(args, "count")
    count = int(count) if count is not None else epoch_size
    config = sampler.SamplerConfig(
        patch_size=int(_opt(args, "size", sampler.DEFAULT_PATCH_SIZE)),
        min_foreground=float(
            _opt(args, "min_foreground", sampler.DEFAULT_MIN_FOREGROUND)
        ),
        target_mpps=_parse_mpps(_opt(args, "mpp", "0.25")),
        slide_strategy="weighted" if slide_weights else "uniform",
        slide_weights=slide_weights,
        epoch_size=max(epoch_size, count),
        seed=seed,
        max_attempts_per_slide=int(
            _opt(args, "max_attempts", sampler.DEFAULT_MAX_ATTEMPTS)
        ),
    )
    if args.dry_run:
        if args.out:
            Path(args.out).write_text("", encoding="utf-8")
        print(f"dry-run ok: {len(pairs)} slide(s) samplable, 0 patches emitted")
        return EXIT_OK
    stream = sampler.epoch_stream(config, pairs)
    cap = _opt(args, "cap")
    if cap is not None:
        stream = sampler.capped_stream(
            stream, int(cap), RandomStream(seed, "cache"), total=count
        )
    else:
        stream = itertools.islice(stream, count)
    written = sampler.write_manifest(stream, args.out)
    print(f"wrote {written} specs to {args.out}")
    return EXIT_OK


def cmd_grid(args) -> int:
    positions = sampler.grid_positions(
        int(args.extent), int(args.size), int(args.stride)
    )
    for pos in positions:
        print(pos)
    return EXIT_OK


def cmd_load(args) -> int:
    specs = sampler.read_manifest(args.manifest)
    if not specs:
        raise ValueError(f"manifest {args.manifest} holds no specs")
    slides = _open_slides(args, slide_ids={s.slide_id for s in specs})
    if args.dry_run:
        for spec in specs:
            sampler.validate_spec(spec, slides[spec.slide_id].record)
        print(f"dry-run ok: {len(specs)} specs valid, 0 patches emitted")
        return EXIT_OK
    config = pipeline.LoaderConfig(
        concurrency=int(_opt(args, "concurrency", 4)),
        prefetch_depth=int(
            _opt(args, "prefetch_depth", max(8, int(_opt(args, "concurrency", 4))))
        ),
        ordered=not args.unordered,
        on_error="raise" if args.fail_fast else "skip",
    )
    run = pipeline.run_loader(specs, slides, config)
    loaded_specs = []
    patches = []
    for spec, pixels in run:
        loaded_specs.append(spec)
        patches.append(pipeline.normalize_patch(pixels) if args.normalize else pixels)
    for failure in run.errors:
        print(f"error loading seq {failure.spec.seq}: {failure.error}", file=sys.stderr)
    if not patches:
        raise RuntimeError("no patch could be loaded")
    pack = np.stack(patches)
    pipeline.write_patch_pack(pack, args.out, specs=loaded_specs)
    print(
        f"packed {len(patches)} patches to {args.out} "
        f"({len(run.errors)} failed)"
    )
    return EXIT_OK


def cmd_bench(args) -> int:
    n_patches = int(_opt(args, "tiles", 200))
    tile_size = int(_opt(args, "tile_size", 64))
    seed = int(_opt(args, "seed", 0))
    root = _opt(args, "store")
    tmp = None
    if root is None:
        tmp = tempfile.TemporaryDirectory(prefix="patchforge-bench-")
        root = tmp.name
    try:
        slide_id = "bench"
        tiles_x = 10
        tiles_y = -(-n_patches // tiles_x)
        pipeline.make_synthetic_store(
            root,
            slide_id=slide_id,
            tiles_x=tiles_x,
            tiles_y=tiles_y,
            tile_size=tile_size,
            seed=seed,
        )
        bench = pipeline.run_benchmark(
            root,
            slide_id,
            n_patches=n_patches,
            concurrency=int(_opt(args, "concurrency", 8)),
            latency_ms=float(_opt(args, "latency_ms", 10.0)),
            cache_bytes=int(_opt(args, "cache_bytes", 0)),
        )
    finally:
        if tmp is not None:
            tmp.cleanup()
    if args.out:
        pipeline.save_bench_report(bench, args.out)
        if not args.no_figures:
            for fig in report.render_bench_figures(bench, Path(args.out).with_suffix("")):
                print(f"figure: {fig}")
        print(f"report: {args.out}")
    print(f"patches_per_sec={_fmt(bench.patches_per_sec)}")
    print(f"p50_latency_ms={_fmt(bench.p50_latency_ms)}")
    print(f"p99_latency_ms={_fmt(bench.p99_latency_ms)}")
    print(f"cache_hit_rate={_fmt(bench.cache_hit_rate)}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    values = metrics.read_embeddings(args.embeddings)
    if args.metric == "odcorr":
        print(f"odcorr={_fmt(metrics.odcorr(values))}")
    else:
        print(f"rankme={_fmt(metrics.rankme(values))}")
    return EXIT_OK


def cmd_probe(args) -> int:
    values = metrics.read_embeddings(args.embeddings)
    labels, groups = metrics.read_labels(args.labels)
    if len(labels) != values.shape[0]:
        raise ValueError(
            f"{len(labels)} labels for {values.shape[0]} embedding rows"
        )
    seed = int(_opt(args, "seed", 0))
    val_fraction = float(_opt(args, "val_fraction", 0.25))
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val-fraction must be in (0, 1)")
    assignment = probe.split_stratified_grouped(
        labels, groups, [1.0 - val_fraction, val_fraction], seed
    )
    train_idx = np.flatnonzero(assignment == 0)
    val_idx = np.flatnonzero(assignment == 1)
    if len(val_idx) == 0 or len(train_idx) == 0:
        raise ValueError("split produced an empty train or val side")
    labels_arr = np.asarray(labels)
    config = probe.ProbeConfig(
        batch_size=min(int(_opt(args, "batch_size", 4096)), len(train_idx)),
        total_steps=int(_opt(args, "total_steps", 12_500)),
    )
    result = probe.run_probe(
        values[train_idx],
        labels_arr[train_idx],
        values[val_idx],
        labels_arr[val_idx],
        config,
        seed=seed,
        n_runs=int(_opt(args, "runs", probe.DEFAULT_RUNS)),
    )
    if args.out:
        Path(args.out).write_text(
            json.dumps(result.to_json_dict(), indent=2), encoding="utf-8"
        )
        if not args.no_figures:
            for fig in report.render_probe_figures(result, Path(args.out).with_suffix("")):
                print(f"figure: {fig}")
        print(f"result: {args.out}")
    for i, run in enumerate(result.runs):
        print(f"run{i}_balanced_accuracy={_fmt(run.balanced_accuracy)}")
    print(f"mean={_fmt(result.mean)}")
    print(f"std={_fmt(result.std)}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _add_common(parser, *, seed=False, config=True, cache=False):
    if config:
        parser.add_argument("--config", help="JSON file with default flag values")
    if seed:
        parser.add_argument("--seed", type=int, help="random seed (default 0)")
    if cache:
        parser.add_argument(
            "--cache-bytes",
            type=int,
            dest="cache_bytes",
            help=f"tile cache budget (default ${ENV_CACHE_BYTES} or "
            f"{store.DEFAULT_CACHE_BYTES})",
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchforge",
        description="Online patch extraction from tiled image pyramids, "
        "embedding metrics, and linear-probe evaluation.",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("ingest", help="build a tiled pyramid from an image")
    p.add_argument("--image", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--slide-id", dest="slide_id", required=True)
    p.add_argument("--base-mpp", dest="base_mpp", type=float)
    p.add_argument("--tile-size", dest="tile_size", type=int)
    p.add_argument("--factor", type=int, help="downsample factor between levels")
    p.add_argument("--codec", choices=store.CODECS)
    p.add_argument("--layout", choices=("files", "packed"))
    _add_common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("mask", help="threshold an image into a foreground mask")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--scale", type=float)
    _add_common(p)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("polygon", help="trace a mask into foreground polygons")
    p.add_argument("--mask", help="binary mask PNG (nonzero = foreground)")
    p.add_argument("--image", help="RGB image to threshold when no mask is given")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--scale", type=float)
    p.add_argument("--min-region", dest="min_region", type=float)
    p.add_argument("--slide-id", dest="slide_id")
    _add_common(p)
    p.set_defaults(func=cmd_polygon)

    p = sub.add_parser("sample", help="emit a manifest of sampled patch specs")
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True, help="manifest JSONL path")
    p.add_argument("--count", type=int, help="number of specs to emit")
    p.add_argument("--epoch-size", dest="epoch_size", type=int)
    p.add_argument("--mpp", help="target mpp list, e.g. 0.5 or 0.25:1,0.5:2")
    p.add_argument("--size", type=int, help="output patch size in px")
    p.add_argument("--min-foreground", dest="min_foreground", type=float)
    p.add_argument("--slides", help="comma-separated slide ids (default: all)")
    p.add_argument("--weights", help="slide weights as inline JSON or a JSON file")
    p.add_argument("--polygons", help="directory of per-slide polygon JSON files")
    p.add_argument("--threshold", type=float, help="mask threshold fallback")
    p.add_argument("--max-attempts", dest="max_attempts", type=int)
    p.add_argument("--cap", type=int, help="distinct-spec cap (replay after)")
    p.add_argument("--dry-run", action="store_true")
    _add_common(p, seed=True, cache=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("grid", help="print grid offsets for inference tiling")
    p.add_argument("--extent", required=True, type=int)
    p.add_argument("--size", required=True, type=int)
    p.add_argument("--stride", required=True, type=int)
    _add_common(p, config=False)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("load", help="load manifest patches into a patch pack")
    p.add_argument("--store", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="patch pack output path")
    p.add_argument("--concurrency", type=int)
    p.add_argument("--prefetch-depth", dest="prefetch_depth", type=int)
    p.add_argument("--unordered", action="store_true")
    p.add_argument("--fail-fast", dest="fail_fast", action="store_true")
    p.add_argument("--normalize", action="store_true", help="store float32 [-1,1]")
    p.add_argument("--dry-run", action="store_true")
    _add_common(p, cache=True)
    p.set_defaults(func=cmd_load)

    p = sub.add_parser("bench", help="synthetic-latency loader benchmark")
    p.add_argument("--store", help="store directory (default: temporary)")
    p.add_argument("--out", help="report JSON path")
    p.add_argument("--tiles", type=int, help="number of tile patches (default 200)")
    p.add_argument("--tile-size", dest="tile_size", type=int)
    p.add_argument("--latency-ms", dest="latency_ms", type=float)
    p.add_argument("--concurrency", type=int)
    p.add_argument("--no-figures", dest="no_figures", action="store_true")
    _add_common(p, seed=True, cache=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("metrics", help="unsupervised embedding metrics")
    msub = p.add_subparsers(dest="metric", required=True)
    for name in ("odcorr", "rankme"):
        mp = msub.add_parser(name)
        mp.add_argument("--embeddings", required=True)
        _add_common(mp)
        mp.set_defaults(func=cmd_metrics, metric=name)

    p = sub.add_parser("probe", help="linear probing of an embedding file")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--labels", required=True, help="labels sidecar JSONL")
    p.add_argument("--out", help="result JSON path")
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--total-steps", dest="total_steps", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--no-figures", dest="no_figures", action="store_true")
    _add_common(p, seed=True)
    p.set_defaults(func=cmd_probe)

    return parser


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "command", None) is None:
        parser.print_help()
        return EXIT_USAGE
    config_path = getattr(args, "config", None)
    try:
        args._config = (
            json.loads(Path(config_path).read_text(encoding="utf-8"))
            if config_path
            else {}
        )
        return args.func(args)
    except (
        OSError,
        ValueError,
        RuntimeError,
        store.StoreError,
        foreground.EmptyForegroundError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def main() -> int:
    return run_cli(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
