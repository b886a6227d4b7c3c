class ConfigError(ValueError):
    """Invalid configuration or parameter outside its allowed range."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ReportError(ValueError):
    """A report is missing fields required for the requested operation."""
