"""Exception types shared across the package."""


class AdvTTTError(Exception):
    """Base class; ``code`` is the machine-readable identifier used by the CLI."""

    code = "ERROR"


class ConfigurationError(AdvTTTError, ValueError):
    code = "CONFIGURATION_ERROR"


class ContractError(AdvTTTError, ValueError):
    code = "CONTRACT_ERROR"


class DegenerateVolumeError(AdvTTTError, ValueError):
    code = "DEGENERATE_VOLUME"


class DivergenceError(AdvTTTError, RuntimeError):
    """Raised when a loss becomes non-finite; ``snapshot`` holds diagnostic state."""

    code = "DIVERGENCE"

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class MissingArtifactError(AdvTTTError, FileNotFoundError):
    def __init__(self, message, code="MISSING_ARTIFACT"):
        super().__init__(message)
        self.code = code


class ArtifactExistsError(AdvTTTError, FileExistsError):
    code = "TARGET_EXISTS"
