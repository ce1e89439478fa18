"""Monte-Carlo certification of the alignment properties at a reduced trial count.

Run: python3 demos/02_certify.py [scale]
The full-size suite is `sgalab verify`.
"""

import sys
import time

from sgalab.theory import format_report, run_verification

scale = float(sys.argv[1]) if len(sys.argv) > 1 else 0.1

t0 = time.perf_counter()
results = run_verification(seed=0, scale=scale)
print(format_report(results), end="")
print(f"\n{len(results)} checks in {time.perf_counter() - t0:.1f}s at scale {scale}")

worst = max(results, key=lambda r: r.worst / r.tolerance)
print(f"closest to its tolerance: {worst.name} ({worst.worst:.2e} vs {worst.tolerance:.0e})")
