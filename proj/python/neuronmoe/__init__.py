# Copyright 2026 the neuronmoe authors
# SPDX-License-Identifier: Apache-2.0
"""Neuron-guided mixture-of-experts toolkit.

Thin wrapper over the compiled extension: synthetic bilingual corpora,
a small dense transformer with exact gradients, AP-based language-specific
neuron profiling, per-layer expert allocation, sparse upcycling, two-stage
training and post-training expert specialization analysis.
"""

from neuronmoe._core import *  # noqa: F401,F403
from neuronmoe._core import __doc__ as _core_doc  # noqa: F401

__version__ = "0.1.0"
