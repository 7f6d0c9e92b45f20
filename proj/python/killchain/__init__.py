"""Python bindings for the kill-chain inference engine."""

from ._killchain import *  # noqa: F401,F403
from ._killchain import KillchainError, Phase

__all__ = [name for name in dir() if not name.startswith("_")]
