"""Continual federated indoor-localization simulator with SSM-based poisoning defense."""

__version__ = "0.1.0"

from .errors import TrajguardError  # noqa: F401
