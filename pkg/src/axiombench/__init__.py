"""axiombench: model-generated feature scenarios for scoring attribution methods."""

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]


def __getattr__(name):
    # Lazy so the CLI can pin BLAS thread env vars before numpy loads.
    if name == "backend_name":
        from .backend import backend_name
        return backend_name
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
