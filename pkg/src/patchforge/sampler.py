"""Deterministic patch sampling: slides -> streams of patch specs.

A stream is a pure function of (seed, config, slide set). Each source of
randomness draws from its own named substream, so changing e.g. the number
of magnification draws never shifts slide choices. Parallel workers shard
by seed offset (worker i uses seed + i) and stay independently
reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .foreground import ForegroundPolygon, overlap_fraction
from .rng import RandomStream
from .store import SlideRecord, round_half_away

DEFAULT_PATCH_SIZE = 256
DEFAULT_MIN_FOREGROUND = 0.40
DEFAULT_EPOCH_SIZE = 1_280_000
DEFAULT_MAX_ATTEMPTS = 100


class ExhaustedAttemptsError(RuntimeError):
    """No candidate on this slide met the foreground minimum."""


class NoSamplableSlideError(RuntimeError):
    """Every slide kept failing; the stream cannot make progress."""


@dataclass
class SamplerConfig:
    patch_size: int = DEFAULT_PATCH_SIZE
    min_foreground: float = DEFAULT_MIN_FOREGROUND
    target_mpps: list = field(default_factory=lambda: [(0.25, 1.0)])  # (mpp, weight)
    slide_strategy: str = "uniform"  # "uniform" | "weighted"
    slide_weights: dict | None = None  # slide_id -> weight, used when weighted
    epoch_size: int = DEFAULT_EPOCH_SIZE
    seed: int = 0
    max_attempts_per_slide: int = DEFAULT_MAX_ATTEMPTS

    def __post_init__(self):
        if not 0.0 <= self.min_foreground <= 1.0:
            raise ValueError("min_foreground must be in [0, 1]")
        if self.epoch_size < 1:
            raise ValueError("epoch_size must be >= 1")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.slide_strategy not in ("uniform", "weighted"):
            raise ValueError("slide_strategy must be 'uniform' or 'weighted'")
        if not self.target_mpps:
            raise ValueError("target_mpps must not be empty")
        weights = [w for _, w in self.target_mpps]
        if any(w < 0 for w in weights) or sum(weights) <= 0:
            raise ValueError("mpp weights must be >= 0 and not all zero")


@dataclass(frozen=True)
class PatchSpec:
    """One patch to extract: full-resolution footprint plus target scale."""

    slide_id: str
    x: int
    y: int
    width: int
    height: int
    target_mpp: float
    out_size: int
    seq: int

    def rect(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.width, self.height)

    def to_json_line(self) -> str:
        return json.dumps(
            {
                "slide_id": self.slide_id,
                "x": self.x,
                "y": self.y,
                "width": self.width,
                "height": self.height,
                "target_mpp": self.target_mpp,
                "out_size": self.out_size,
                "seq": self.seq,
            }
        )

    @classmethod
    def from_json_line(cls, line: str) -> "PatchSpec":
        doc = json.loads(line)
        return cls(
            slide_id=str(doc["slide_id"]),
            x=int(doc["x"]),
            y=int(doc["y"]),
            width=int(doc["width"]),
            height=int(doc["height"]),
            target_mpp=float(doc["target_mpp"]),
            out_size=int(doc["out_size"]),
            seq=int(doc["seq"]),
        )


@dataclass
class StreamSet:
    """One independent substream per randomness consumer."""

    slide: RandomStream
    coords: RandomStream
    mpp: RandomStream
    cache: RandomStream

    @classmethod
    def from_seed(cls, seed: int) -> "StreamSet":
        return cls(
            slide=RandomStream(seed, "slide"),
            coords=RandomStream(seed, "coords"),
            mpp=RandomStream(seed, "mpp"),
            cache=RandomStream(seed, "cache"),
        )


def footprint_px(out_size: int, target_mpp: float, base_mpp: float) -> int:
    """Level-0 pixel side covered by an out_size patch at target_mpp."""
    return max(1, round_half_away(out_size * target_mpp / base_mpp))


def sample_slide(config: SamplerConfig, slide_ids: list, rng: RandomStream) -> str:
    """Pick a slide id: uniformly, or proportional to config.slide_weights."""
    if not slide_ids:
        raise ValueError("no slides to sample from")
    if config.slide_strategy == "uniform":
        return slide_ids[rng.randrange(len(slide_ids))]
    weights = [(config.slide_weights or {}).get(sid, 0.0) for sid in slide_ids]
    return slide_ids[rng.weighted_index(weights)]


def sample_patch(
    record: SlideRecord,
    poly: ForegroundPolygon,
    config: SamplerConfig,
    streams: StreamSet,
    seq: int = 0,
) -> PatchSpec:
    """Rejection-sample one admissible patch on a slide.

    Each candidate draws a magnification from the weighted list and a
    top-left corner uniformly over the polygon's bounding box (clamped so
    the footprint stays inside the slide), and is accepted when its
    foreground overlap reaches the configured minimum. Gives up after
    max_attempts_per_slide candidates so a sparse slide cannot stall the
    stream.
    """
    bx0, by0, bx1, by1 = poly.bounding_box()
    mpps = [m for m, _ in config.target_mpps]
    weights = [w for _, w in config.target_mpps]
    for _ in range(config.max_attempts_per_slide):
        mpp = mpps[streams.mpp.weighted_index(weights)]
        fp = footprint_px(config.patch_size, mpp, record.base_mpp)
        x_lo = max(0, int(bx0))
        y_lo = max(0, int(by0))
        x_hi = min(record.width - fp, int(bx1))
        y_hi = min(record.height - fp, int(by1))
        if x_hi < x_lo or y_hi < y_lo:
            continue  # footprint cannot fit near this polygon
        x = streams.coords.randint(x_lo, x_hi)
        y = streams.coords.randint(y_lo, y_hi)
        if overlap_fraction(poly, (x, y, fp, fp)) >= config.min_foreground:
            return PatchSpec(
                slide_id=record.slide_id,
                x=x,
                y=y,
                width=fp,
                height=fp,
                target_mpp=mpp,
                out_size=config.patch_size,
                seq=seq,
            )
    raise ExhaustedAttemptsError(
        f"no admissible patch on slide {record.slide_id!r} after "
        f"{config.max_attempts_per_slide} attempts"
    )


def grid_positions(extent: int, size: int, stride: int) -> list:
    """Offsets 0, stride, 2*stride, ... while offset + size <= extent."""
    if size > extent:
        raise ValueError(f"size {size} exceeds extent {extent}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return list(range(0, extent - size + 1, stride))


def epoch_stream(config: SamplerConfig, slides: list):
    """Yield exactly config.epoch_size admissible patch specs.

    ``slides`` is a list of (SlideRecord, ForegroundPolygon) pairs. A slide
    whose sampling attempt is exhausted is silently redrawn and does not
    consume a sequence number. Deterministic given (config.seed, config,
    slide set); shard workers with seed + worker_index.
    """
    if not slides:
        raise NoSamplableSlideError("no slides provided")
    streams = StreamSet.from_seed(config.seed)
    by_id = {rec.slide_id: (rec, poly) for rec, poly in slides}
    ids = [rec.slide_id for rec, _ in slides]
    failure_limit = max(100, 10 * len(slides))
    consecutive_failures = 0
    seq = 0
    while seq < config.epoch_size:
        sid = sample_slide(config, ids, streams.slide)
        record, poly = by_id[sid]
        try:
            spec = sample_patch(record, poly, config, streams, seq=seq)
        except ExhaustedAttemptsError:
            consecutive_failures += 1
            if consecutive_failures >= failure_limit:
                raise NoSamplableSlideError(
                    f"no slide produced an admissible patch in "
                    f"{consecutive_failures} consecutive slide draws"
                )
            continue
        consecutive_failures = 0
        yield spec
        seq += 1


class CappedCache:
    """Retains the first ``cap`` distinct specs; later draws replay them."""

    def __init__(self, cap: int | None):
        if cap is not None and cap < 1:
            raise ValueError("cap must be >= 1 (or None for unlimited)")
        self.cap = cap
        self.stored: list = []

    @property
    def full(self) -> bool:
        return self.cap is not None and len(self.stored) >= self.cap

    def admit(self, spec: PatchSpec) -> None:
        if self.cap is not None and not self.full:
            self.stored.append(spec)

    def draw(self, rng: RandomStream) -> PatchSpec:
        if not self.stored:
            raise ValueError("cannot draw from an empty cache")
        return self.stored[rng.randrange(len(self.stored))]


def capped_stream(inner, cap: int | None, rng: RandomStream, total: int | None = None):
    """Limit a spec stream to ``cap`` distinct specs.

    The first ``cap`` items pass through and are retained; afterwards every
    emitted item is drawn uniformly from the retained set and the inner
    stream is no longer advanced. ``cap=None`` is pure pass-through. With
    ``total=None`` and a cap, the stream is endless once the cache fills,
    mirroring training loops that draw from the cache indefinitely.
    """
    cache = CappedCache(cap)
    count = 0
    if cap is None:
        for item in inner:
            if total is not None and count >= total:
                return
            yield item
            count += 1
        return
    for item in inner:
        if total is not None and count >= total:
            return
        if cache.full:
            break
        cache.admit(item)
        yield item
        count += 1
    while total is None or count < total:
        yield cache.draw(rng)
        count += 1


def write_manifest(specs, path) -> int:
    """Write specs as JSONL; returns the number of lines written."""
    count = 0
    with open(Path(path), "w", encoding="utf-8") as fh:
        for spec in specs:
            fh.write(spec.to_json_line())
            fh.write("\n")
            count += 1
    return count


def read_manifest(path) -> list:
    with open(Path(path), encoding="utf-8") as fh:
        return [PatchSpec.from_json_line(line) for line in fh if line.strip()]


def validate_spec(
    spec: PatchSpec,
    record: SlideRecord,
    poly: ForegroundPolygon | None = None,
    config: SamplerConfig | None = None,
) -> None:
    """Re-check a spec's structural invariants; raises ValueError on breach."""
    if spec.slide_id != record.slide_id:
        raise ValueError("spec references a different slide")
    if spec.x < 0 or spec.y < 0:
        raise ValueError("negative patch origin")
    if spec.x + spec.width > record.width or spec.y + spec.height > record.height:
        raise ValueError("patch footprint exceeds slide bounds")
    expected = footprint_px(spec.out_size, spec.target_mpp, record.base_mpp)
    if spec.width != expected or spec.height != expected:
        raise ValueError(
            f"footprint {spec.width} != round(out_size * mpp / base) = {expected}"
        )
    if poly is not None and config is not None:
        frac = overlap_fraction(poly, spec.rect())
        if frac < config.min_foreground:
            raise ValueError(
                f"overlap {frac:.4f} below minimum {config.min_foreground}"
            )
