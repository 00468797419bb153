"""Key expansion over a public channel using physical phase noise.

Submodules: :mod:`physics` (encoding and noise), :mod:`analysis` (closed-form
leakage bounds), :mod:`protocol` (chained key cycles), :mod:`attacks`
(eavesdropper experiments), :mod:`net` (wire protocol) and :mod:`cli`.
"""

__version__ = "0.1.0"
