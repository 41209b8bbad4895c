"""Layer-wise neural regression collapse diagnostics.

Kept import-light on purpose: the CLI pins BLAS thread counts through
environment variables, which only works if numpy has not been imported yet.
Submodules (linalg, data, nn, nrc, runner) load on first attribute access.
"""

__version__ = "0.1.0"

_SUBMODULES = ("linalg", "data", "nn", "nrc", "runner", "binio", "cli")


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
