"""Exception taxonomy shared across modules.

ContractError / IntegrityError map to CLI exit code 1, ParseError to 2.
"""


class ContractError(ValueError):
    """A caller violated an operation's contract (shapes, preconditions)."""


class IntegrityError(ValueError):
    """Corpus records are individually well-formed but mutually inconsistent."""


class ParseError(ValueError):
    """An input file could not be parsed."""


class ConfigError(ValueError):
    """A configuration value is invalid or missing."""
