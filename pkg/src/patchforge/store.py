"""Chunked image pyramid store.

A store holds one or more slides as multi-level tile pyramids plus JSON
metadata. Layout on disk:

    <root>/index.json                      store index
    <root>/slides/<id>.json                per-slide record
    <root>/chunks/<id>/<level>/<tx>_<ty>.<ext>   one file per tile, or
    <root>/chunks/<id>.bin                 packed tiles addressed by byte range

Tiles can live in individual files, in a packed local file, or behind any
HTTP server that honors Range requests; a locator per tile says where and
how. Region reads at arbitrary coordinates and target resolutions are
assembled from the level closest (in log space) to the requested microns
per pixel and resized bilinearly to the requested output size.
"""

from __future__ import annotations

import io
import json
import math
import threading
import time
import urllib.error
import urllib.request
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

CODECS = ("raw", "png", "jpeg")
_CODEC_EXT = {"raw": ".raw", "png": ".png", "jpeg": ".jpg"}

STORE_FORMAT_VERSION = 1
DEFAULT_CACHE_BYTES = 64 * 1024 * 1024

# Byte-range transport retry policy: attempts and initial backoff (doubles
# after each failure).
RETRY_ATTEMPTS = 3
RETRY_BASE_DELAY_S = 0.1


class StoreError(Exception):
    """Base class for store failures."""


class SlideNotFoundError(StoreError):
    pass


class IntegrityError(StoreError):
    """Metadata violates a store invariant; message names the invariant."""


class TransportError(StoreError):
    """Chunk bytes could not be retrieved (retryable at the call site)."""


class DecodeError(StoreError):
    """Chunk bytes could not be decoded (not retryable)."""


class OutOfBoundsError(StoreError):
    pass


def round_half_away(x: float) -> int:
    """Round half away from zero (3.5 -> 4, -3.5 -> -4)."""
    return int(math.floor(x + 0.5)) if x >= 0 else int(math.ceil(x - 0.5))


@dataclass(frozen=True)
class ChunkLocator:
    """Where one tile's bytes live and how they are encoded."""

    kind: str  # "inline-file" | "byte-range"
    path: str  # filesystem path or URL, relative paths resolve under root
    codec: str
    offset: int | None = None
    length: int | None = None

    def __post_init__(self):
        if self.kind not in ("inline-file", "byte-range"):
            raise IntegrityError(f"unknown locator kind {self.kind!r}")
        if self.codec not in CODECS:
            raise IntegrityError(f"unknown codec {self.codec!r}")
        if self.kind == "byte-range":
            if self.offset is None or self.offset < 0:
                raise IntegrityError("byte-range locator needs offset >= 0")
            if self.length is None or self.length < 1:
                raise IntegrityError("byte-range locator needs length >= 1")

    def to_json_dict(self) -> dict:
        doc = {"kind": self.kind, "path": self.path, "codec": self.codec}
        if self.kind == "byte-range":
            doc["offset"] = self.offset
            doc["length"] = self.length
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ChunkLocator":
        return cls(
            kind=doc["kind"],
            path=doc["path"],
            codec=doc["codec"],
            offset=doc.get("offset"),
            length=doc.get("length"),
        )


@dataclass(frozen=True)
class LevelInfo:
    width: int
    height: int
    mpp: float
    downsample: int


@dataclass
class SlideRecord:
    """Validated pyramid metadata for one slide."""

    slide_id: str
    base_mpp: float
    tile_size: int
    levels: list
    chunks: dict = field(default_factory=dict)  # (level, tx, ty) -> ChunkLocator

    @property
    def width(self) -> int:
        return self.levels[0].width

    @property
    def height(self) -> int:
        return self.levels[0].height

    def tile_grid(self, level: int) -> tuple[int, int]:
        lvl = self.levels[level]
        t = self.tile_size
        return (lvl.width + t - 1) // t, (lvl.height + t - 1) // t

    def tile_dims(self, level: int, tx: int, ty: int) -> tuple[int, int]:
        """Actual (width, height) of a tile; edge tiles are cropped."""
        lvl = self.levels[level]
        t = self.tile_size
        return min(t, lvl.width - tx * t), min(t, lvl.height - ty * t)

    def validate(self) -> None:
        if self.tile_size < 16:
            raise IntegrityError(f"tile_size {self.tile_size} < 16")
        if not self.levels:
            raise IntegrityError("record has no levels")
        lvl0 = self.levels[0]
        if lvl0.downsample != 1:
            raise IntegrityError("level 0 must have downsample 1")
        if not math.isclose(lvl0.mpp, self.base_mpp, rel_tol=1e-9):
            raise IntegrityError("level 0 mpp must equal base_mpp")
        prev_mpp = 0.0
        for i, lvl in enumerate(self.levels):
            if lvl.mpp <= prev_mpp:
                raise IntegrityError(f"levels not sorted by increasing mpp at {i}")
            prev_mpp = lvl.mpp
            if not math.isclose(lvl.mpp, self.base_mpp * lvl.downsample, rel_tol=1e-9):
                raise IntegrityError(
                    f"level {i} mpp {lvl.mpp} != base_mpp * downsample"
                )
            exp_w = -(-lvl0.width // lvl.downsample)
            exp_h = -(-lvl0.height // lvl.downsample)
            if abs(lvl.width - exp_w) > 1 or abs(lvl.height - exp_h) > 1:
                raise IntegrityError(
                    f"level {i} dims ({lvl.width}x{lvl.height}) do not match "
                    f"level 0 / downsample ({exp_w}x{exp_h})"
                )
        for li in range(len(self.levels)):
            nx, ny = self.tile_grid(li)
            for ty in range(ny):
                for tx in range(nx):
                    loc = self.chunks.get((li, tx, ty))
                    if loc is None:
                        raise IntegrityError(f"missing chunk locator ({li}, {tx}, {ty})")
                    if loc.codec == "raw":
                        tw, th = self.tile_dims(li, tx, ty)
                        if loc.kind == "byte-range" and loc.length != tw * th * 3:
                            raise IntegrityError(
                                f"raw chunk ({li}, {tx}, {ty}) length {loc.length} "
                                f"!= {tw}x{th}x3"
                            )

    def to_json_dict(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "base_mpp": self.base_mpp,
            "tile_size": self.tile_size,
            "levels": [
                {
                    "width_px": l.width,
                    "height_px": l.height,
                    "mpp": l.mpp,
                    "downsample": l.downsample,
                }
                for l in self.levels
            ],
            "chunks": {
                f"{li}/{tx}_{ty}": loc.to_json_dict()
                for (li, tx, ty), loc in sorted(self.chunks.items())
            },
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "SlideRecord":
        try:
            levels = [
                LevelInfo(
                    width=int(l["width_px"]),
                    height=int(l["height_px"]),
                    mpp=float(l["mpp"]),
                    downsample=int(l["downsample"]),
                )
                for l in doc["levels"]
            ]
            chunks = {}
            for key, locdoc in doc["chunks"].items():
                li, rest = key.split("/")
                tx, ty = rest.split("_")
                chunks[(int(li), int(tx), int(ty))] = ChunkLocator.from_json_dict(locdoc)
            return cls(
                slide_id=str(doc["slide_id"]),
                base_mpp=float(doc["base_mpp"]),
                tile_size=int(doc["tile_size"]),
                levels=levels,
                chunks=chunks,
            )
        except (KeyError, ValueError) as exc:
            raise IntegrityError(f"malformed slide record: {exc}") from exc


@dataclass
class StoreIndex:
    format_version: int = STORE_FORMAT_VERSION
    slides: list = field(default_factory=list)
    records: dict = field(default_factory=dict)  # slide_id -> relative json path

    def validate(self) -> None:
        if self.format_version != STORE_FORMAT_VERSION:
            raise IntegrityError(
                f"unsupported store format_version {self.format_version}"
            )
        if len(set(self.slides)) != len(self.slides):
            raise IntegrityError("duplicate slide ids in index")

    def to_json_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "slides": self.slides,
            "records": self.records,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "StoreIndex":
        return cls(
            format_version=int(doc.get("format_version", -1)),
            slides=list(doc.get("slides", [])),
            records=dict(doc.get("records", {})),
        )


class TileCache:
    """Thread-safe LRU cache of decoded tiles, bounded by total bytes."""

    def __init__(self, byte_capacity: int = DEFAULT_CACHE_BYTES):
        if byte_capacity < 0:
            raise ValueError("byte_capacity must be >= 0")
        self.byte_capacity = byte_capacity
        self._entries: OrderedDict = OrderedDict()
        self._bytes = 0
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    @property
    def current_bytes(self) -> int:
        return self._bytes

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0

    def get(self, key):
        with self._lock:
            arr = self._entries.get(key)
            if arr is None:
                self.misses += 1
                return None
            self._entries.move_to_end(key)
            self.hits += 1
            return arr

    def put(self, key, arr: np.ndarray) -> None:
        size = arr.nbytes
        if size > self.byte_capacity:
            return
        arr.flags.writeable = False
        with self._lock:
            old = self._entries.pop(key, None)
            if old is not None:
                self._bytes -= old.nbytes
            while self._bytes + size > self.byte_capacity and self._entries:
                _, evicted = self._entries.popitem(last=False)
                self._bytes -= evicted.nbytes
            self._entries[key] = arr
            self._bytes += size

    def keys(self):
        with self._lock:
            return list(self._entries.keys())


class Transport:
    """Resolves chunk locators to bytes from disk or HTTP range sources."""

    def __init__(
        self,
        attempts: int = RETRY_ATTEMPTS,
        base_delay_s: float = RETRY_BASE_DELAY_S,
        sleep=time.sleep,
    ):
        self.attempts = attempts
        self.base_delay_s = base_delay_s
        self._sleep = sleep

    def fetch(self, locator: ChunkLocator, root: Path) -> bytes:
        if locator.kind == "inline-file":
            return self._read_file(self._resolve(locator.path, root))
        delay = self.base_delay_s
        last_exc: Exception | None = None
        for attempt in range(self.attempts):
            try:
                return self._fetch_range(locator, root)
            except TransportError as exc:
                last_exc = exc
                if attempt + 1 < self.attempts:
                    self._sleep(delay)
                    delay *= 2
        raise TransportError(
            f"fetch failed after {self.attempts} attempts: {last_exc}"
        ) from last_exc

    @staticmethod
    def _resolve(path: str, root: Path) -> str:
        if path.startswith(("http://", "https://")) or Path(path).is_absolute():
            return path
        return str(Path(root) / path)

    def _read_file(self, path: str) -> bytes:
        try:
            return Path(path).read_bytes()
        except OSError as exc:
            raise TransportError(f"cannot read {path}: {exc}") from exc

    def _fetch_range(self, locator: ChunkLocator, root: Path) -> bytes:
        target = self._resolve(locator.path, root)
        offset, length = locator.offset, locator.length
        if target.startswith(("http://", "https://")):
            data = self._http_range(target, offset, length)
        else:
            try:
                with open(target, "rb") as fh:
                    fh.seek(offset)
                    data = fh.read(length)
            except OSError as exc:
                raise TransportError(f"cannot read {target}: {exc}") from exc
        if len(data) != length:
            raise TransportError(
                f"short read from {target}: got {len(data)} of {length} bytes"
            )
        return data

    def _http_range(self, url: str, offset: int, length: int) -> bytes:
        req = urllib.request.Request(
            url, headers={"Range": f"bytes={offset}-{offset + length - 1}"}
        )
        try:
            with urllib.request.urlopen(req, timeout=30) as resp:
                body = resp.read()
                if resp.status == 200 and len(body) > length:
                    # Server ignored the Range header and sent everything.
                    body = body[offset : offset + length]
                return body
        except (urllib.error.URLError, OSError, TimeoutError) as exc:
            raise TransportError(f"HTTP range fetch failed for {url}: {exc}") from exc


def decode_tile(data: bytes, codec: str, width: int, height: int) -> np.ndarray:
    """Decode chunk bytes into an (height, width, 3) uint8 array."""
    if codec == "raw":
        expected = width * height * 3
        if len(data) != expected:
            raise DecodeError(
                f"raw tile has {len(data)} bytes, expected {expected}"
            )
        return np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3)
    try:
        img = Image.open(io.BytesIO(data))
        arr = np.asarray(img.convert("RGB"))
    except Exception as exc:
        raise DecodeError(f"cannot decode {codec} tile: {exc}") from exc
    if arr.shape[:2] != (height, width):
        raise DecodeError(
            f"decoded tile is {arr.shape[1]}x{arr.shape[0]}, "
            f"expected {width}x{height}"
        )
    return arr


def encode_tile(arr: np.ndarray, codec: str) -> bytes:
    if codec == "raw":
        return np.ascontiguousarray(arr).tobytes()
    buf = io.BytesIO()
    fmt = "PNG" if codec == "png" else "JPEG"
    kwargs = {"quality": 90} if codec == "jpeg" else {}
    Image.fromarray(arr).save(buf, format=fmt, **kwargs)
    return buf.getvalue()


def _box_downsample(arr: np.ndarray, factor: int) -> np.ndarray:
    """Box-filter average over factor x factor blocks; edge blocks average
    only the pixels they actually contain."""
    h, w = arr.shape[:2]
    row_idx = np.arange(0, h, factor)
    col_idx = np.arange(0, w, factor)
    sums = np.add.reduceat(
        np.add.reduceat(arr.astype(np.float64), row_idx, axis=0), col_idx, axis=1
    )
    row_counts = np.diff(np.append(row_idx, h))
    col_counts = np.diff(np.append(col_idx, w))
    counts = np.outer(row_counts, col_counts)[:, :, None]
    return np.floor(sums / counts + 0.5).astype(np.uint8)


def _index_path(root: Path) -> Path:
    return Path(root) / "index.json"


def read_index(store_root) -> StoreIndex:
    path = _index_path(Path(store_root))
    if not path.exists():
        raise StoreError(f"no store at {store_root} (missing index.json)")
    index = StoreIndex.from_json_dict(json.loads(path.read_text(encoding="utf-8")))
    index.validate()
    return index


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2), encoding="utf-8")


def ingest_image(
    pixels: np.ndarray,
    slide_id: str,
    base_mpp: float,
    store_root,
    *,
    tile_size: int = 256,
    downsample_factor: int = 2,
    codec: str = "png",
    layout: str = "files",
) -> SlideRecord:
    """Build a tiled pyramid from an RGB image and write it into the store.

    The pyramid is produced by repeated box-filter downsampling by
    ``downsample_factor``; it stops once a level fits a single tile, i.e.
    max(width, height) <= tile_size. ``layout`` "files" writes one file per
    tile; "packed" concatenates all tiles into one binary blob addressed by
    byte-range locators (the shape a range-serving HTTP source needs).
    """
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ValueError("pixels must be an (H, W, 3) uint8 array")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError("image must be at least 1x1")
    if tile_size < 16:
        raise ValueError("tile_size must be >= 16")
    if downsample_factor < 2:
        raise ValueError("downsample_factor must be >= 2")
    if codec not in CODECS:
        raise ValueError(f"codec must be one of {CODECS}")
    if layout not in ("files", "packed"):
        raise ValueError("layout must be 'files' or 'packed'")

    root = Path(store_root)
    level_arrays = [arr]
    while max(level_arrays[-1].shape[0], level_arrays[-1].shape[1]) > tile_size:
        level_arrays.append(_box_downsample(level_arrays[-1], downsample_factor))

    levels = [
        LevelInfo(
            width=a.shape[1],
            height=a.shape[0],
            mpp=base_mpp * downsample_factor**i,
            downsample=downsample_factor**i,
        )
        for i, a in enumerate(level_arrays)
    ]
    record = SlideRecord(
        slide_id=slide_id, base_mpp=base_mpp, tile_size=tile_size, levels=levels
    )

    try:
        pack_fh = None
        pack_rel = f"chunks/{slide_id}.bin"
        if layout == "packed":
            pack_path = root / pack_rel
            pack_path.parent.mkdir(parents=True, exist_ok=True)
            pack_fh = open(pack_path, "wb")
        offset = 0
        ext = _CODEC_EXT[codec]
        for li, larr in enumerate(level_arrays):
            nx, ny = record.tile_grid(li)
            for ty in range(ny):
                for tx in range(nx):
                    t = tile_size
                    tile = larr[ty * t : (ty + 1) * t, tx * t : (tx + 1) * t]
                    data = encode_tile(tile, codec)
                    if layout == "files":
                        rel = f"chunks/{slide_id}/{li}/{tx}_{ty}{ext}"
                        path = root / rel
                        path.parent.mkdir(parents=True, exist_ok=True)
                        path.write_bytes(data)
                        loc = ChunkLocator(kind="inline-file", path=rel, codec=codec)
                    else:
                        pack_fh.write(data)
                        loc = ChunkLocator(
                            kind="byte-range",
                            path=pack_rel,
                            codec=codec,
                            offset=offset,
                            length=len(data),
                        )
                        offset += len(data)
                    record.chunks[(li, tx, ty)] = loc
        if pack_fh is not None:
            pack_fh.close()
    except OSError as exc:
        raise StoreError(f"cannot write chunks under {root}: {exc}") from exc

    record.validate()
    try:
        _write_json(root / "slides" / f"{slide_id}.json", record.to_json_dict())
        index_path = _index_path(root)
        if index_path.exists():
            index = read_index(root)
        else:
            index = StoreIndex()
        if slide_id not in index.slides:
            index.slides.append(slide_id)
        index.records[slide_id] = f"slides/{slide_id}.json"
        _write_json(index_path, index.to_json_dict())
    except OSError as exc:
        raise StoreError(f"cannot write metadata under {root}: {exc}") from exc
    return record


def select_level(record: SlideRecord, target_mpp: float) -> int:
    """Index of the level closest to target_mpp in log space.

    Ties go to the finer (smaller-mpp) level: shrinking a finer read loses
    less than enlarging a coarser one.
    """
    if target_mpp <= 0:
        raise ValueError("target_mpp must be positive")
    best, best_dist = 0, math.inf
    for i, lvl in enumerate(record.levels):
        dist = abs(math.log(lvl.mpp / target_mpp))
        if dist < best_dist - 1e-12:
            best, best_dist = i, dist
    return best


class Slide:
    """Read access to one slide: cached tile fetches and region assembly."""

    def __init__(
        self,
        record: SlideRecord,
        store_root,
        cache: TileCache | None = None,
        transport: Transport | None = None,
    ):
        self.record = record
        self.root = Path(store_root)
        self.cache = cache if cache is not None else TileCache()
        self.transport = transport if transport is not None else Transport()
        self._inflight: dict = {}
        self._inflight_lock = threading.Lock()

    def select_level(self, target_mpp: float) -> int:
        return select_level(self.record, target_mpp)

    def thumbnail(self) -> tuple[np.ndarray, float]:
        """Full coarsest level plus its scale relative to level 0."""
        li = len(self.record.levels) - 1
        lvl = self.record.levels[li]
        arr = self._read_window(li, 0, 0, lvl.width, lvl.height)
        return arr, 1.0 / lvl.downsample

    def fetch_chunk(self, key: tuple[int, int, int]) -> np.ndarray:
        """Decoded tile for (level, tx, ty); concurrent callers of the same
        key share one transport read."""
        li, tx, ty = key
        if not 0 <= li < len(self.record.levels):
            raise OutOfBoundsError(f"level {li} out of range")
        nx, ny = self.record.tile_grid(li)
        if not (0 <= tx < nx and 0 <= ty < ny):
            raise OutOfBoundsError(f"tile ({tx}, {ty}) outside grid {nx}x{ny}")
        cache_key = (self.record.slide_id, li, tx, ty)

        while True:
            arr = self.cache.get(cache_key)
            if arr is not None:
                return arr
            with self._inflight_lock:
                event = self._inflight.get(cache_key)
                if event is None:
                    self._inflight[cache_key] = threading.Event()
                    break
            event.wait()
            # Leader finished; loop to read the cache (or fetch ourselves if
            # the entry was already evicted).

        try:
            arr = self._fetch_and_decode(key)
            self.cache.put(cache_key, arr)
            arr.flags.writeable = False
            return arr
        finally:
            with self._inflight_lock:
                self._inflight.pop(cache_key).set()

    def _fetch_and_decode(self, key) -> np.ndarray:
        li, tx, ty = key
        loc = self.record.chunks[(li, tx, ty)]
        tw, th = self.record.tile_dims(li, tx, ty)
        data = self.transport.fetch(loc, self.root)
        return decode_tile(data, loc.codec, tw, th)

    def read_region(
        self,
        rect_level0: tuple[int, int, int, int],
        target_mpp: float,
        out_size: int,
    ) -> np.ndarray:
        """Read the rect (level-0 coordinates) at target_mpp as an
        out_size x out_size RGB patch.

        The source window comes from the closest pyramid level; its side is
        round(out_size * target_mpp / level_mpp) pixels there, positioned at
        the rect's top-left mapped into that level. A window that overruns
        the level by at most one pixel (rounding slack) is clamped with edge
        replication. Bilinear resize maps the window to out_size; when the
        window already matches out_size the pixels pass through untouched.
        """
        x, y, w, h = rect_level0
        if out_size < 1:
            raise ValueError("out_size must be >= 1")
        if w < 1 or h < 1:
            raise OutOfBoundsError("rect must have positive extent")
        if x < 0 or y < 0 or x + w > self.record.width or y + h > self.record.height:
            raise OutOfBoundsError(
                f"rect {rect_level0} outside level-0 bounds "
                f"{self.record.width}x{self.record.height}"
            )
        li = self.select_level(target_mpp)
        lvl = self.record.levels[li]
        side = max(1, round_half_away(out_size * target_mpp / lvl.mpp))
        sx = round_half_away(x / lvl.downsample)
        sy = round_half_away(y / lvl.downsample)
        window = self._read_window(li, sx, sy, side, side)
        if side == out_size:
            return window
        img = Image.fromarray(window).resize(
            (out_size, out_size), Image.Resampling.BILINEAR
        )
        return np.asarray(img)

    def _read_window(self, li: int, sx: int, sy: int, w: int, h: int) -> np.ndarray:
        lvl = self.record.levels[li]
        slack = 1  # rounding may overshoot the level edge by one pixel
        if (
            sx < -slack
            or sy < -slack
            or sx + w > lvl.width + slack
            or sy + h > lvl.height + slack
        ):
            raise OutOfBoundsError(
                f"window ({sx}, {sy}, {w}, {h}) outside level {li} "
                f"({lvl.width}x{lvl.height})"
            )
        cx0, cy0 = max(sx, 0), max(sy, 0)
        cx1 = max(min(sx + w, lvl.width), cx0 + 1)
        cy1 = max(min(sy + h, lvl.height), cy0 + 1)
        cx0, cy0 = min(cx0, lvl.width - 1), min(cy0, lvl.height - 1)
        out = np.empty((cy1 - cy0, cx1 - cx0, 3), dtype=np.uint8)
        t = self.record.tile_size
        for ty in range(cy0 // t, (cy1 - 1) // t + 1):
            for tx in range(cx0 // t, (cx1 - 1) // t + 1):
                tile = self.fetch_chunk((li, tx, ty))
                ix0, iy0 = max(cx0, tx * t), max(cy0, ty * t)
                ix1 = min(cx1, tx * t + tile.shape[1])
                iy1 = min(cy1, ty * t + tile.shape[0])
                out[iy0 - cy0 : iy1 - cy0, ix0 - cx0 : ix1 - cx0] = tile[
                    iy0 - ty * t : iy1 - ty * t, ix0 - tx * t : ix1 - tx * t
                ]
        if (cy1 - cy0, cx1 - cx0) == (h, w) and (cx0, cy0) == (sx, sy):
            return out
        # Edge replication for any slack rows/columns: clip the requested
        # index range into the fetched core.
        xs = np.clip(np.arange(sx, sx + w), cx0, cx1 - 1) - cx0
        ys = np.clip(np.arange(sy, sy + h), cy0, cy1 - 1) - cy0
        return out[np.ix_(ys, xs)]


def open_slide(
    store_root,
    slide_id: str,
    *,
    cache: TileCache | None = None,
    transport: Transport | None = None,
) -> Slide:
    """Open a slide from a store root, validating all metadata eagerly."""
    root = Path(store_root)
    index = read_index(root)
    if slide_id not in index.slides:
        raise SlideNotFoundError(f"slide {slide_id!r} not in store {root}")
    rel = index.records.get(slide_id, f"slides/{slide_id}.json")
    record_path = root / rel
    if not record_path.exists():
        raise SlideNotFoundError(f"record document missing for slide {slide_id!r}")
    record = SlideRecord.from_json_dict(
        json.loads(record_path.read_text(encoding="utf-8"))
    )
    if record.slide_id != slide_id:
        raise IntegrityError(
            f"record names slide {record.slide_id!r}, expected {slide_id!r}"
        )
    record.validate()
    return Slide(record, root, cache=cache, transport=transport)
