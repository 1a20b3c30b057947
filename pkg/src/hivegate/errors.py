"""Exception types shared by the proxy and the emulation harness."""


class HivegateError(Exception):
    """Base class for all hivegate errors."""


class MalformedFraming(HivegateError):
    """The byte stream violates HTTP/1.1 framing; the connection is rejected."""


class BodyTooLarge(HivegateError):
    """Declared body exceeds the configured maximum payload size."""


class QueueFull(HivegateError):
    """A route queue is at its configured maximum length."""


class UnknownDestination(HivegateError):
    """A logical endpoint name is not present in the upstream table."""


class ProgramError(HivegateError):
    """A runtime fault inside an adaptation program. The data path fails open."""


class BudgetExceeded(ProgramError):
    """An adaptation program exhausted its step budget."""


class StaleHandleError(ProgramError):
    """A queue or message handle was used after its execution context closed."""


class ConfigError(HivegateError):
    """Manifest validation failed. Carries every diagnostic found in one pass."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(self.diagnostics))


class ScenarioError(HivegateError):
    """A scenario file or generator/link spec is invalid."""
