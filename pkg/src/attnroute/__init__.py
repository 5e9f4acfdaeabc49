"""Layer-level routing between full and sparse attention.

Desk-scale engine: frozen-backbone transformer, per-layer routers trained
with Gumbel-Softmax under Lagrangian sparsity budgets, hard-routed inference
with window-bypassing KV caches, an entropy-based static-sparsification
baseline, and a decode-latency harness.
"""

from threadpoolctl import threadpool_limits as _threadpool_limits

# Desk-scale arrays are small; on the 1-2 core machines this targets, BLAS
# thread pools lose more to contention than they gain, and single-threaded
# kernels keep latency measurements stable. Applied once at import.
_threadpool_limits(limits=1)

__version__ = "0.1.0"
