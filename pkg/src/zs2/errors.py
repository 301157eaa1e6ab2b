"""Error taxonomy shared by the library and the CLI exit-code mapping."""


class ValidationError(ValueError):
    """Invalid argument or malformed configuration (CLI exit code 1)."""


class DegeneracyError(ArithmeticError):
    """Numerical degeneracy, e.g. all mixture responsibilities underflow (CLI exit code 2)."""


class ContractError(RuntimeError):
    """A component violated its interface contract, e.g. denoiser output shape mismatch."""


class InvalidStateError(RuntimeError):
    """Operation requires state that is missing, e.g. a manifest without terminal noise."""
