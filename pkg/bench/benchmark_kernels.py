"""Compare the compiled kernels against the pure-Python fallback.

    python3 bench/benchmark_kernels.py [seconds-per-metric]
"""
import sys

from deskrl.kernel_bench import main

if __name__ == "__main__":
    sys.exit(main())
