"""Exception types shared across the package."""


class WxUnpackError(Exception):
    """Base class for all errors raised by wxunpack."""


class EmptyInput(WxUnpackError, ValueError):
    pass


class PeError(WxUnpackError):
    """Input could not be parsed as a PE32 image."""


class NotPe(PeError):
    pass


class Truncated(PeError):
    pass


class Malformed(PeError):
    pass


class EmptyDump(WxUnpackError, ValueError):
    pass


class OepOutOfRange(WxUnpackError, ValueError):
    pass


class BadRecipe(WxUnpackError, ValueError):
    pass


class SignatureMismatch(WxUnpackError):
    pass


class NotSupported(WxUnpackError):
    pass


class ParseError(WxUnpackError):
    pass


class StubInconsistent(WxUnpackError):
    pass


class NoDumps(WxUnpackError):
    pass


class NegativeApf(WxUnpackError, ValueError):
    pass
