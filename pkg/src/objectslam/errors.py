"""Error types mapped to CLI exit codes (data/format -> 2, numerical -> 3)."""


class DataFormatError(Exception):
    """Malformed input file or schema violation."""


class NumericalError(Exception):
    """Numerical failure: singular covariance, non-SPD input, solver breakdown."""
