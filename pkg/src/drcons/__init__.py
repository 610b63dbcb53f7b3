"""Online control of partially observed linear systems with Semi-ONS over DRC policies."""

from .errors import IdentifiabilityError, InstabilityError, InvalidInputError, NumericError

__version__ = "0.1.0"

__all__ = ["IdentifiabilityError", "InstabilityError", "InvalidInputError", "NumericError", "__version__"]
