"""Late (decision-level) fusion of per-modality class probabilities.

Modules: :mod:`dataio`, :mod:`metrics`, :mod:`shallow_nn`, :mod:`noise`,
:mod:`fusion`, :mod:`synth`, :mod:`pipeline` and the :mod:`cli`.
"""

__version__ = "0.1.0"
