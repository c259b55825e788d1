import os

# keep BLAS single-threaded: the workloads are many small matrices, where
# thread fan-out costs more than it saves, and timed tests assume one core
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")
