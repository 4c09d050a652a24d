"""EV route energy estimation at desk scale.

Synthetic routes from a physics oracle, three learned estimators (segment
FFN, route GRU, decoder-only transformer) on a from-scratch autodiff engine,
a data-to-parameter-count sizing rule, and the evaluation / latency harness
that compares everything.
"""

__version__ = "0.1.0"
