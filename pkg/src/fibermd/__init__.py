"""Fiber mode decomposition with a convolutional network.

Modules: ``fiber_modes`` (LP mode solver and sampled bases), ``field_synth``
(superposition, labels, noise, frame preprocessing), ``metrics`` (correlation,
error statistics), ``cnn`` (numpy network, checkpoints), ``training``,
``decompose`` (inference, sign search, SPGD, brute force), ``formats`` and
``cli``.
"""

__version__ = "0.1.0"
