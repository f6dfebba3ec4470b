"""Feature distillation through truncated SVD and RBF distillation feature vectors.

Subpackages and modules:

* ``svdkd.autograd``: float32 reverse-mode differentiation, SGD, checkpoints
* ``svdkd.linalg``: truncated SVD and its right-singular-vector gradient
* ``svdkd.distill``: compressed features, student alignment, DFV construction
* ``svdkd.training``: losses, adaptive gradient gate, one-stage and two-stage runs
* ``svdkd.models``, ``svdkd.data``, ``svdkd.config``, ``svdkd.cli``
"""

__version__ = "0.1.0"
