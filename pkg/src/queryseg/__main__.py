"""Module entry point; pins BLAS to one thread before numpy loads so runs
with the same seed are bitwise reproducible."""
import os
import sys

for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

from queryseg.cli import main  # noqa: E402

sys.exit(main())
