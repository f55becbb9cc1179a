"""Desk-scale lab for flow-based conditional generative classifiers."""

from . import flowcore  # must load before priors: shared MLPNet
from . import priors, objectives

__all__ = ["flowcore", "priors", "objectives"]
__version__ = "0.1.0"
