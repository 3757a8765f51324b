# %% [markdown]
# # Latency against codebook size
#
# Encoding searches every codeword, so it should cost time linear in K.
# Decoding is a table lookup plus entropy decoding, so it should be flat in K.
# `bench_latency` times the configs round-robin, which spreads slow drift in
# machine load evenly across them.

# %%
from pathlib import Path

import numpy as np

from mcqcodec.images import synthetic_image
from mcqcodec.studies import BENCH_COLUMNS, atomic_write, bench_latency, linear_fit, rows_to_csv

image = synthetic_image(np.random.default_rng(0), 256, 256)
ks = [64, 256, 1024, 4096]
rows = bench_latency([2], ks, image, repeats=20, warmup=3)
for r in rows:
    print(f"K={r['K']:5d}  encode {r['enc_ms']:7.1f} ms  decode {r['dec_ms']:6.1f} ms")

# %%
_, _, r2 = linear_fit(ks, [r["enc_ms"] for r in rows])
slope, _, _ = linear_fit(ks, [r["dec_ms"] for r in rows])
mean_dec = np.mean([r["dec_ms"] for r in rows])
print(f"encoder R^2 of a straight line in K: {r2:.3f}")
print(f"decoder change over the K range: {slope * max(ks) / mean_dec:+.1%} of its mean")

out = Path(__file__).with_name("output")
out.mkdir(exist_ok=True)
atomic_write(out / "latency.csv", rows_to_csv(rows, BENCH_COLUMNS).encode())
