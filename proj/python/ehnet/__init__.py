from ._core import (
    REPORT_HEADER,
    Base,
    Config,
    ConfigError,
    Error,
    NumericError,
    ablate,
    eaus_update,
    evaluate,
    export_dataset,
    kmeans,
    render,
    taxonomy,
    train_base,
)

__all__ = [
    "REPORT_HEADER",
    "Base",
    "Config",
    "ConfigError",
    "Error",
    "NumericError",
    "ablate",
    "eaus_update",
    "evaluate",
    "export_dataset",
    "kmeans",
    "render",
    "taxonomy",
    "train_base",
]
