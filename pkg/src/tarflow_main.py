import os
import sys

from tarflow.settings import TarflowEnv

# BLAS threading is fixed when numpy loads, so this runs before any import
# that pulls numpy in.
if "--deterministic" in sys.argv[1:] or TarflowEnv().DETERMINISTIC:
    for var in ("OMP_NUM_THREADS", "MKL_NUM_THREADS", "OPENBLAS_NUM_THREADS"):
        os.environ[var] = "1"

import logging  # noqa: E402

from tarflow.cli import main  # noqa: E402

logging.basicConfig(level=TarflowEnv().LOG_LEVEL)
modules = ["numpy", "pandas"]
for module in modules:
    logging.getLogger(module).setLevel("ERROR")


if __name__ == "__main__":
    sys.exit(main())
