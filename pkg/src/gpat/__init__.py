"""Query-efficient black-box adversarial attacks with a learned gradient prior.

The package trains a convolutional autoencoder to map images to the
input-gradient maps of classifiers, meta-trains it across several source
models so it adapts fast, and then uses it inside a black-box attack loop
that alternates free attacker predictions with sparse finite-difference
estimation through a query-counting oracle.
"""

from gpat.tensor import (
    ParamSet,
    Tensor,
    no_grad,
    numeric_grad_check,
)

__version__ = "0.1.0"
