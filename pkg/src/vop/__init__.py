"""Offline training and live steering of objective-conditioned policies.

The package learns a cart-pole controller from a fixed batch of random
transitions, with no environment interaction during training: an ensemble
of one-step dynamics models fits the batch, and a policy conditioned on
reward parameters (target cart position, pole-alignment weight) is trained
by backpropagation through virtual rollouts of that ensemble.  Because the
objective is an input, one trained network covers the whole objective box
and can be re-targeted while it runs; the bundled HTTP service and browser
client do exactly that, live.

Submodules are imported on demand; `import vop` stays cheap so the command
line can configure math-library threading first.
"""

__version__ = "0.1.0"
