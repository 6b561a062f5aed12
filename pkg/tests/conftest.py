import os

# cap BLAS fan-out before numpy spins up its thread pools: the dense solves
# here are small and oversubscription is drastically slower
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
