"""
Timing a dense mixer against its iso-FLOP grouped twin
======================================================

Same MAC count, different memory traffic.  The numbers depend on the
machine and BLAS build.
"""
from scheme.bench import bench_csv, iso_flop_rows

rows = iso_flop_rows(d=256, E=2, g=4, n_tokens=196, reps=20, warmup=3)
print(bench_csv(rows))
