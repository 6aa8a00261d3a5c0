"""Exception hierarchy shared by every module."""


class MeduError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(MeduError, ValueError):
    """Invalid configuration or argument value (CLI exit code 2)."""


class EmptyClientError(MeduError):
    """A client holds no data; the round cannot use it."""


class StoreFormatError(MeduError):
    """A history or checkpoint file could not be parsed.

    ``round_index`` is set when the failure happened inside a round record.
    """

    def __init__(self, message, round_index=None):
        if round_index is not None:
            message = f"round {round_index}: {message}"
        super().__init__(message)
        self.round_index = round_index


class DecodeError(MeduError):
    """A stored record decodes to something impossible (bad index, bad bitmap)."""

    def __init__(self, message, t=None, user=None):
        where = []
        if t is not None:
            where.append(f"t={t}")
        if user is not None:
            where.append(f"user={user}")
        if where:
            message = f"[{', '.join(where)}] {message}"
        super().__init__(message)
        self.t = t
        self.user = user
