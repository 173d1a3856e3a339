# Pin BLAS to one thread before numpy loads anywhere: keeps timings honest
# for the single-core acceptance budgets and makes run-to-run byte identity
# independent of the machine's core count.
import os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
