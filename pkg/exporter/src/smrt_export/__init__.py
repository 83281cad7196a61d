"""Hidden-state exporter: transformer activations to SMRT dump files."""

from .export import (
    LAST,
    ExportError,
    ExportFailed,
    ExportJob,
    ExportSummary,
    LayerOutOfRange,
    ModelLoadError,
    export,
    load_model,
    render_benchmark_queries,
)
from .format import (
    FORMAT_VERSION,
    MAGIC,
    ROLE_PADDING,
    ROLE_POOLING,
    ROLE_SPECIAL,
    ROLE_TEXT,
    ROLE_VISION,
    ExportRecord,
    write_manifest,
    write_records,
)

__version__ = "0.1.0"
