"""Private unlearning over perturbed, reparameterized model copies.

A server publishes several noisy copies of a small Transformer, each
disguised by a random function-preserving reparameterization; a client
unlearns on each copy; the server maps the updates back and averages them
with harmonic weights so the first-order effect of the noise cancels.
"""

__version__ = "0.1.0"
