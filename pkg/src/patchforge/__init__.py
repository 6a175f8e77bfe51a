"""patchforge: online patch extraction from tiled image pyramids.

Library surface in one import: the chunked pyramid store, foreground
polygon admission, deterministic patch sampling, the concurrent loader,
embedding metrics, and the linear-probe protocol.
"""

from .foreground import (
    BinaryMask,
    EmptyForegroundError,
    ForegroundPolygon,
    load_mask_png,
    mask_from_rgb,
    overlap_fraction,
    polygon_from_mask,
)
from .metrics import (
    odcorr,
    rankme,
    read_embeddings,
    read_labels,
    write_embeddings,
    write_labels,
)
from .pipeline import (
    LoaderConfig,
    normalize_patch,
    read_patch_pack,
    run_benchmark,
    run_loader,
    write_patch_pack,
)
from .probe import (
    ProbeConfig,
    ProbeResult,
    balanced_accuracy,
    lr_at_step,
    run_probe,
    split_stratified_grouped,
    train_probe,
)
from .rng import RandomStream
from .sampler import (
    CappedCache,
    PatchSpec,
    SamplerConfig,
    StreamSet,
    capped_stream,
    epoch_stream,
    grid_positions,
    read_manifest,
    sample_patch,
    sample_slide,
    write_manifest,
)
from .store import (
    ChunkLocator,
    Slide,
    SlideRecord,
    TileCache,
    Transport,
    ingest_image,
    open_slide,
    read_index,
    select_level,
)

__version__ = "0.1.0"
