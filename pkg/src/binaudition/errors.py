"""Exception hierarchy shared by all modules."""


class BinauditionError(Exception):
    """Base class for library errors."""


class EmptyStreamError(BinauditionError, ValueError):
    pass


class SilentBinError(BinauditionError, ValueError):
    """Left+right energy at a bin is too small to normalize."""


class SilentChannelError(SilentBinError):
    """One channel has (near) zero magnitude, so ILD diverges."""


class NoValidFrequencyError(BinauditionError, ValueError):
    pass


class FormatError(BinauditionError, ValueError):
    """A container file is malformed or truncated."""


class CompatibilityError(BinauditionError, ValueError):
    """A container was built for a different direction grid or version."""


class DivergenceError(BinauditionError, RuntimeError):
    pass
