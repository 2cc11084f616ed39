"""Multi-task recovery of degraded, rotated license-plate images.

Subpackages: :mod:`snider.autodiff` (tensors, ops, optimiser),
:mod:`snider.data` (synthetic plates and datasets); modules
:mod:`snider.networks`, :mod:`snider.training`, :mod:`snider.evaluation`,
:mod:`snider.checkpoint`, :mod:`snider.plotting`, :mod:`snider.cli`.
"""

__version__ = "0.1.0"
