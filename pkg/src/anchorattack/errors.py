"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration (dimension divisibility, bad ranges, unknown keys)."""


class ShapeError(ValueError):
    """Tensor shape does not match what the operation requires."""


class DegenerateFeatureError(ValueError):
    """A token row has zero norm; cosine similarity is undefined there."""


class DisjointnessError(ValueError):
    """Guidance and evaluation sets share a source id."""


class DegenerateMemoryError(ValueError):
    """All guidance features are identical; the memory has zero variance."""


class WireError(RuntimeError):
    """Base class for wire-protocol failures. Carries a short machine code."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


class ProtocolVersionError(WireError):
    def __init__(self, message: str):
        super().__init__("version", message)


class MalformedMessageError(WireError):
    def __init__(self, message: str):
        super().__init__("malformed", message)


class RemoteServerError(WireError):
    """The server answered with an error reply; ``code`` echoes the reply."""


class TransportError(WireError):
    def __init__(self, message: str):
        super().__init__("transport", message)
