"""Exception hierarchy shared by every layer of the store."""


class DocStarError(Exception):
    """Base class for all errors raised by this package."""


class InvalidEvalPoints(DocStarError, ValueError):
    pass


class UnsupportedCharacter(DocStarError, ValueError):
    pass


class EncodingOverflow(DocStarError, ValueError):
    pass


class DuplicateKeyword(DocStarError, ValueError):
    pass


class LayoutOverflow(DocStarError, ValueError):
    pass


class RowFull(DocStarError):
    pass


class BadUpdate(DocStarError, ValueError):
    pass


class BadAddress(DocStarError, ValueError):
    pass


class InsufficientBins(DocStarError, ValueError):
    pass


class ConfigError(DocStarError):
    pass


class ContentTooLong(DocStarError, ValueError):
    pass


class UnknownClient(DocStarError, KeyError):
    def __str__(self) -> str:
        # KeyError would repr() the message
        return str(self.args[0]) if self.args else "unknown client"


class PeerTimeout(DocStarError, TimeoutError):
    pass


class FramingError(DocStarError):
    pass


class ProtocolError(DocStarError):
    pass


class ProtocolAbort(DocStarError):
    """A server-side check failed and the query session was torn down.

    ``test`` names the failed check (``"A"``, ``"1"``, ``"optinv_verify"`` ...).
    Clients only ever learn this name.
    """

    def __init__(self, test: str, message: str = ""):
        self.test = test
        super().__init__(message or f"session aborted by test {test}")


class MalformedClientVector(ProtocolAbort):
    pass


class AccessDenied(ProtocolAbort):
    pass


class TamperedRandomness(ProtocolAbort):
    pass


class MaliciousServerDetected(ProtocolAbort):
    pass


class NoAccessOrAbsent(DocStarError):
    """Phase 1 produced no zero: the keyword is absent or the client lacks access."""


class ServerMisbehavior(DocStarError):
    def __init__(self, phase: int, message: str = ""):
        self.phase = phase
        super().__init__(message or f"server answers inconsistent in phase {phase}")
