"""Base exception for domain errors raised by this package.

Concrete error types live next to the code that raises them and subclass
:class:`AsrlabError`, so callers (notably the CLI) can distinguish expected
domain failures from genuine bugs.
"""


class AsrlabError(Exception):
    pass
