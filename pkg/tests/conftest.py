import os

# small-matrix workloads run faster single-threaded, and a fixed thread count
# keeps BLAS reductions reproducible across runs
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

from incdyn.dyna import collect_transitions


def collect_random_transitions(spec, steps, seed, capacity=None):
    """Uniform-random episodes with one-step-backward bookkeeping."""
    return collect_transitions(spec, steps, seed, capacity=capacity)
