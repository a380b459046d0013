"""
Exception hierarchy shared by every fashionkit module.

The CLI maps each family to a stable exit code:
ConfigError -> 1, DataError -> 2, TrainingError -> 3.
"""

from typing import Optional


class FashionKitError(Exception):
    """Base class for all fashionkit errors"""


class ConfigError(FashionKitError):
    """Invalid configuration file, key or value"""

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.path = path


class RegistryError(ConfigError):
    """Duplicate or unknown registry entry"""


class UsageError(ConfigError):
    """Bad command-line usage"""


class DataError(FashionKitError):
    """Base class for annotation and dataset problems"""


class AnnotationError(DataError):
    """Malformed annotation file"""

    def __init__(self, message: str, source: Optional[str] = None, line: Optional[int] = None):
        location = ""
        if source is not None:
            location = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(location + message)
        self.source = source
        self.line = line


class ValidationError(DataError):
    """Well-formed data that violates a dataset invariant"""


class CheckpointError(DataError):
    """Corrupt checkpoint file or config fingerprint mismatch"""


class TrainingError(FashionKitError):
    """Runtime failure while training or fetching artifacts"""


class NonFiniteLossError(TrainingError):
    """Loss became NaN or infinite"""

    def __init__(self, value: float, iteration: int):
        super().__init__(f"non-finite loss {value} at iteration {iteration}")
        self.value = value
        self.iteration = iteration


class ChecksumError(TrainingError):
    """Downloaded artifact failed size or sha256 verification"""
