"""Exception types shared across the package.

The CLI maps these onto distinct exit codes (validation vs. solver vs. I/O),
and the HTTP service maps them onto structured error responses.
"""


class SchedulerError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(SchedulerError, ValueError):
    """Invalid argument, configuration value, or malformed document."""


class ParseError(SchedulerError, ValueError):
    """Malformed input file; message names the offending line."""


class UnpackableSampleError(SchedulerError):
    """A single sample exceeds the microbatch token capacity even alone."""

    def __init__(self, adapter_id: str, sample_id: str, padded_tokens: int, capacity: int):
        self.adapter_id = adapter_id
        self.sample_id = sample_id
        self.padded_tokens = padded_tokens
        self.capacity = capacity
        super().__init__(
            f"sample {sample_id!r} of adapter {adapter_id!r} needs "
            f"{padded_tokens} padded tokens but capacity is {capacity}"
        )

    def __reduce__(self):
        return (type(self), (self.adapter_id, self.sample_id, self.padded_tokens, self.capacity))


class InfeasibleBinCountError(SchedulerError):
    """No packing into the requested number of non-empty bins exists."""


class SolverError(SchedulerError):
    """Solver budget expired before any feasible solution was found."""
