"""Concurrent patch loading, normalization, packed patch files, benchmark.

The loader turns a spec stream into pixel patches using a bounded worker
pool with backpressure: at most ``prefetch_depth`` assemblies are in flight
or waiting to be consumed, so memory stays bounded no matter how slow the
consumer is. Ordered emission (the default) preserves the spec sequence for
reproducible training; unordered trades that for completion-order
throughput.
"""

from __future__ import annotations

import json
import math
import struct
import threading
import time
from collections import deque
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import RandomStream
from .sampler import PatchSpec
from .store import Slide, TileCache, Transport, ingest_image, open_slide

PACK_MAGIC = b"KPB1"
_PACK_HEADER = struct.Struct("<4sIIIB3x")  # magic, count, out_size, channels, dtype
_DTYPE_TAGS = {np.dtype(np.uint8): 0, np.dtype(np.float32): 1}
_TAG_DTYPES = {0: np.dtype(np.uint8), 1: np.dtype(np.float32)}


class PackFormatError(ValueError):
    pass


class LoaderError(RuntimeError):
    """A patch failed to load under the fail-fast error policy."""


@dataclass
class LoaderConfig:
    concurrency: int = 4
    prefetch_depth: int = 8
    ordered: bool = True
    on_error: str = "skip"  # "skip" collects failures, "raise" fails fast

    def __post_init__(self):
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        if self.prefetch_depth < self.concurrency:
            raise ValueError("prefetch_depth must be >= concurrency")
        if self.on_error not in ("skip", "raise"):
            raise ValueError("on_error must be 'skip' or 'raise'")


@dataclass
class LoaderFailure:
    spec: PatchSpec
    error: Exception


class LoaderRun:
    """Iterator over (spec, pixels); failures collect on .errors."""

    def __init__(self, gen, errors: list):
        self._gen = gen
        self.errors = errors

    def __iter__(self):
        return self

    def __next__(self):
        return next(self._gen)


def run_loader(specs, slides, config: LoaderConfig | None = None) -> LoaderRun:
    """Load every spec exactly once through a bounded worker pool.

    ``slides`` is a Slide or a mapping slide_id -> Slide. Every input spec
    ends up either in the output stream or (under the skip policy) in
    ``LoaderRun.errors``; ordered mode emits in input order.
    """
    config = config or LoaderConfig()
    if isinstance(slides, Slide):
        slides = {slides.record.slide_id: slides}
    errors: list = []

    def task(spec: PatchSpec) -> np.ndarray:
        slide = slides.get(spec.slide_id)
        if slide is None:
            raise LoaderError(f"no open slide for id {spec.slide_id!r}")
        return slide.read_region(spec.rect(), spec.target_mpp, spec.out_size)

    def handle(spec, fut):
        try:
            return fut.result()
        except Exception as exc:
            if config.on_error == "raise":
                raise LoaderError(f"patch seq {spec.seq} failed: {exc}") from exc
            errors.append(LoaderFailure(spec, exc))
            return None

    def gen_ordered():
        with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
            it = iter(specs)
            pending: deque = deque()

            def refill():
                while len(pending) < config.prefetch_depth:
                    spec = next(it, None)
                    if spec is None:
                        return
                    pending.append((spec, pool.submit(task, spec)))

            refill()
            while pending:
                spec, fut = pending.popleft()
                pixels = handle(spec, fut)
                refill()
                if pixels is not None:
                    yield spec, pixels

    def gen_unordered():
        with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
            it = iter(specs)
            pending: dict = {}

            def refill():
                while len(pending) < config.prefetch_depth:
                    spec = next(it, None)
                    if spec is None:
                        return
                    pending[pool.submit(task, spec)] = spec

            refill()
            while pending:
                done, _ = wait(pending, return_when=FIRST_COMPLETED)
                for fut in done:
                    spec = pending.pop(fut)
                    pixels = handle(spec, fut)
                    refill()
                    if pixels is not None:
                        yield spec, pixels

    gen = gen_ordered() if config.ordered else gen_unordered()
    return LoaderRun(gen, errors)


def normalize_patch(pixels: np.ndarray) -> np.ndarray:
    """Map uint8 RGB onto float32 [-1, 1]: v -> (v/255 - 0.5) / 0.5."""
    arr = np.asarray(pixels, dtype=np.float32)
    return (arr / np.float32(255.0) - np.float32(0.5)) / np.float32(0.5)


def write_patch_pack(patches: np.ndarray, path, specs=None) -> Path:
    """Write a (count, S, S, 3) array of patches as one binary pack.

    When specs are given, a sidecar manifest ``<path>.manifest.jsonl`` is
    written next to the pack; its path is returned either way.
    """
    arr = np.asarray(patches)
    if arr.ndim != 4 or arr.shape[3] != 3 or arr.shape[1] != arr.shape[2]:
        raise PackFormatError(
            f"patches must be (count, size, size, 3), got {arr.shape}"
        )
    tag = _DTYPE_TAGS.get(arr.dtype)
    if tag is None:
        raise PackFormatError(f"unsupported dtype {arr.dtype}; use uint8 or float32")
    count, out_size = arr.shape[0], arr.shape[1]
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_PACK_HEADER.pack(PACK_MAGIC, count, out_size, 3, tag))
        fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    if specs is not None:
        manifest = path.with_name(path.name + ".manifest.jsonl")
        with open(manifest, "w", encoding="utf-8") as fh:
            for spec in specs:
                fh.write(spec.to_json_line())
                fh.write("\n")
    return path


def read_patch_pack(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _PACK_HEADER.size:
        raise PackFormatError("file too short for a pack header")
    magic, count, out_size, channels, tag = _PACK_HEADER.unpack_from(data)
    if magic != PACK_MAGIC:
        raise PackFormatError(f"bad magic {magic!r}")
    if channels != 3:
        raise PackFormatError(f"channels must be 3, header says {channels}")
    dtype = _TAG_DTYPES.get(tag)
    if dtype is None:
        raise PackFormatError(f"unknown dtype tag {tag}")
    expected = count * out_size * out_size * 3 * dtype.itemsize
    payload = data[_PACK_HEADER.size :]
    if len(payload) != expected:
        raise PackFormatError(
            f"payload is {len(payload)} bytes, header implies {expected}"
        )
    arr = np.frombuffer(payload, dtype=dtype.newbyteorder("<"))
    return arr.reshape(count, out_size, out_size, 3).astype(dtype)


# ---------------------------------------------------------------------------
# Benchmark harness: a procedural slide plus a latency-injecting transport,
# so throughput behavior is measurable without any real imaging data.


class LatencyTransport(Transport):
    """Adds a fixed delay to every fetch, mimicking remote storage."""

    def __init__(self, latency_s: float, **kwargs):
        super().__init__(**kwargs)
        self.latency_s = latency_s
        self._fetches = 0
        self._lock = threading.Lock()

    @property
    def fetch_count(self) -> int:
        return self._fetches

    def fetch(self, locator, root):
        with self._lock:
            self._fetches += 1
        if self.latency_s > 0:
            time.sleep(self.latency_s)
        return super().fetch(locator, root)


def synthetic_image(width: int, height: int, seed: int = 0) -> np.ndarray:
    """Deterministic blobby RGB test image."""
    rng = RandomStream(seed, "synthetic-image")
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    field = np.zeros((height, width))
    for _ in range(12):
        cx = rng.uniform(0, width)
        cy = rng.uniform(0, height)
        sigma = rng.uniform(0.05, 0.25) * max(width, height)
        amp = rng.uniform(0.3, 1.0)
        field += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2))
    field -= field.min()
    if field.max() > 0:
        field /= field.max()
    r = (255 * field).astype(np.uint8)
    g = (255 * (1.0 - field)).astype(np.uint8)
    b = (255 * np.abs(2 * field - 1.0)).astype(np.uint8)
    return np.stack([r, g, b], axis=2)


def make_synthetic_store(
    store_root,
    *,
    slide_id: str = "synthetic",
    tiles_x: int = 10,
    tiles_y: int = 20,
    tile_size: int = 64,
    base_mpp: float = 0.25,
    seed: int = 0,
    codec: str = "raw",
    layout: str = "packed",
):
    """Ingest a procedural slide sized exactly tiles_x x tiles_y level-0 tiles."""
    img = synthetic_image(tiles_x * tile_size, tiles_y * tile_size, seed=seed)
    return ingest_image(
        img,
        slide_id,
        base_mpp,
        store_root,
        tile_size=tile_size,
        codec=codec,
        layout=layout,
    )


def tile_specs(record, max_patches: int | None = None) -> list:
    """One spec per level-0 tile: distinct patches touching distinct chunks."""
    t = record.tile_size
    nx, ny = record.tile_grid(0)
    specs = []
    for ty in range(ny):
        for tx in range(nx):
            if (tx + 1) * t > record.width or (ty + 1) * t > record.height:
                continue
            specs.append(
                PatchSpec(
                    slide_id=record.slide_id,
                    x=tx * t,
                    y=ty * t,
                    width=t,
                    height=t,
                    target_mpp=record.base_mpp,
                    out_size=t,
                    seq=len(specs),
                )
            )
            if max_patches is not None and len(specs) >= max_patches:
                return specs
    return specs


@dataclass
class BenchReport:
    patches_per_sec: float
    p50_latency_ms: float
    p99_latency_ms: float
    cache_hit_rate: float
    wall_time_s: float
    n_patches: int
    concurrency: int
    latencies_ms: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "patches_per_sec": self.patches_per_sec,
            "p50_latency_ms": self.p50_latency_ms,
            "p99_latency_ms": self.p99_latency_ms,
            "cache_hit_rate": self.cache_hit_rate,
        }


class _TimingSlide:
    """Slide proxy that records per-patch assembly latency."""

    def __init__(self, slide: Slide, sink: list):
        self._slide = slide
        self._sink = sink
        self.record = slide.record

    def read_region(self, rect, target_mpp, out_size):
        start = time.perf_counter()
        out = self._slide.read_region(rect, target_mpp, out_size)
        self._sink.append((time.perf_counter() - start) * 1000.0)
        return out


def run_benchmark(
    store_root,
    slide_id: str,
    *,
    n_patches: int = 200,
    concurrency: int = 8,
    prefetch_depth: int | None = None,
    latency_ms: float = 10.0,
    cache_bytes: int = 0,
) -> BenchReport:
    """Stream tile-aligned patches through the loader under injected latency.

    cache_bytes of 0 keeps every fetch cold so the measurement reflects the
    transport path.
    """
    transport = LatencyTransport(latency_ms / 1000.0)
    cache = TileCache(cache_bytes)
    slide = open_slide(store_root, slide_id, cache=cache, transport=transport)
    specs = tile_specs(slide.record, max_patches=n_patches)
    if len(specs) < n_patches:
        raise ValueError(
            f"slide only provides {len(specs)} tile patches, need {n_patches}"
        )
    latencies: list = []
    timing = _TimingSlide(slide, latencies)
    config = LoaderConfig(
        concurrency=concurrency,
        prefetch_depth=prefetch_depth or max(concurrency * 2, concurrency),
        ordered=True,
        on_error="raise",
    )
    start = time.perf_counter()
    n_out = 0
    for _spec, _pixels in run_loader(specs, {slide_id: timing}, config):
        n_out += 1
    wall = time.perf_counter() - start
    lat = np.array(latencies) if latencies else np.zeros(1)
    return BenchReport(
        patches_per_sec=n_out / wall if wall > 0 else math.inf,
        p50_latency_ms=float(np.percentile(lat, 50)),
        p99_latency_ms=float(np.percentile(lat, 99)),
        cache_hit_rate=cache.hit_rate,
        wall_time_s=wall,
        n_patches=n_out,
        concurrency=concurrency,
        latencies_ms=list(lat),
    )


def save_bench_report(report: BenchReport, path) -> None:
    Path(path).write_text(
        json.dumps(report.to_json_dict(), indent=2), encoding="utf-8"
    )
