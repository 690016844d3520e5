"""mdlab: masked diffusion language modeling lab.

Toy-scale but exact: an absorbing-state discrete diffusion core, a numpy
transformer backbone with hand-written backprop and numba-accelerated
inference kernels, non-autoregressive decoding strategies, a first-step
position planner, procedural token tasks, and the statistics used to compare
decoding randomness schemes.
"""

__version__ = "0.1.0"
