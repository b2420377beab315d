"""Exception hierarchy shared by every sprout module.

Each class carries a short ``category`` string; the CLI prints it in the
``error: <category>: <detail>`` line so failures are machine-parseable.
"""


class SproutError(Exception):
    category = "runtime"


class ConfigurationError(SproutError, ValueError):
    category = "config"


class ArgumentError(SproutError, ValueError):
    category = "argument"


class ShapeError(ArgumentError):
    category = "shape"


class SingularityError(SproutError, ArithmeticError):
    """Inversion requested at a near-pure-noise timestep."""

    category = "singularity"


class NumericError(SproutError, ArithmeticError):
    category = "numeric"


class DegenerateInputError(SproutError, ValueError):
    category = "degenerate"


class FormatError(SproutError):
    category = "format"


class IngestError(SproutError):
    category = "ingest"


class PersistedStateError(SproutError, OSError):
    category = "persist"


class LabelError(ArgumentError):
    category = "label"
