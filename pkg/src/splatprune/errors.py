"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failure classes to
process exit statuses without a lookup table.
"""


class SplatPruneError(Exception):
    exit_code = 4


# -- parse (2) -----------------------------------------------------------------

class ParseError(SplatPruneError):
    exit_code = 2


class MissingProperty(ParseError):
    def __init__(self, name):
        super().__init__(f"missing required property {name!r}")
        self.name = name


class UnsupportedFormat(ParseError):
    pass


class TruncatedPayload(ParseError):
    pass


# -- config (3) ----------------------------------------------------------------

class ConfigError(SplatPruneError, ValueError):
    exit_code = 3


class InvalidFraction(ConfigError):
    pass


class RatioOutOfRange(ConfigError):
    pass


class KTooLarge(ConfigError):
    pass


class DomainError(ConfigError):
    pass


# -- pipeline (4) --------------------------------------------------------------

class PipelineError(SplatPruneError):
    exit_code = 4


class EmptyScene(PipelineError):
    pass


class EmptyInput(PipelineError):
    pass


class LengthMismatch(PipelineError):
    pass


class DegenerateFrame(PipelineError):
    pass


class NoCameras(PipelineError):
    pass


class NonConvergence(PipelineError):
    pass


class WouldRemoveAll(PipelineError):
    pass


class EmptySpec(PipelineError):
    pass
