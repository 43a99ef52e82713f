"""cxrforge: a from-scratch CNN engine and CLI for 3-class chest X-ray triage.

Submodules are imported lazily so the CLI can cap BLAS threads before numpy
loads. ``import cxrforge; cxrforge.tensor`` still works via PEP 562.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "tensor",
    "model",
    "checkpoint",
    "losses",
    "optim",
    "train",
    "data",
    "synthetic",
    "evaluate",
    "config",
    "cli",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
