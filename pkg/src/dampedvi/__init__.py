"""Variational integrators for exponentially damped Lagrangian systems,
with a distance-based formation-control application."""

from .core import *  # noqa: F401,F403
from .core import __all__ as _core_all
from .formation import *  # noqa: F401,F403
from .formation import __all__ as _formation_all
from .campaign import *  # noqa: F401,F403
from .campaign import __all__ as _campaign_all

__version__ = "0.1.0"
__all__ = [*_core_all, *_formation_all, *_campaign_all]
