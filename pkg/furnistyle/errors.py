# furnistyle/errors.py
"""
Exception hierarchy shared by every module.

Each exception carries the process exit code the CLI uses for it:
    1 : usage / config error
    2 : data error
    3 : numerics error
"""

from __future__ import annotations


EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICS = 3


class FurnistyleError(Exception):
    """Base class for all errors raised by this package."""

    exit_code: int = EXIT_USAGE


# ─── Usage / config ─────────────────────────────────────────────────
class ConfigError(FurnistyleError):
    exit_code = EXIT_USAGE


class ContractError(FurnistyleError):
    """A caller violated a documented precondition."""

    exit_code = EXIT_USAGE


# ─── Data ───────────────────────────────────────────────────────────
class InputError(FurnistyleError):
    exit_code = EXIT_DATA


class SamplingError(FurnistyleError):
    exit_code = EXIT_DATA


class MetricError(FurnistyleError):
    exit_code = EXIT_DATA


# ─── Numerics ───────────────────────────────────────────────────────
class NumericsError(FurnistyleError):
    """Non-finite values. `batch_index` is set when raised from training."""

    exit_code = EXIT_NUMERICS

    def __init__(self, message: str, batch_index: int | None = None):
        super().__init__(message)
        self.batch_index = batch_index


class ShapeError(FurnistyleError):
    exit_code = EXIT_NUMERICS


class DomainError(FurnistyleError):
    exit_code = EXIT_NUMERICS


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, FurnistyleError):
        return exc.exit_code
    if isinstance(exc, (FileNotFoundError, IsADirectoryError, PermissionError)):
        return EXIT_DATA
    return EXIT_USAGE
