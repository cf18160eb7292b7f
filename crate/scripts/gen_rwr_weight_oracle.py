"""Writes fixtures/rwr_weight_oracle.csv: exp(beta * r) at 50 digits for
1000 seeded (r, beta) pairs. Inputs are printed with round-trip precision so
the Rust side parses the exact same doubles."""

import random
from pathlib import Path

import mpmath

mpmath.mp.dps = 50
rng = random.Random(20240917)
out = Path(__file__).resolve().parent.parent / "fixtures" / "rwr_weight_oracle.csv"
lines = ["r,beta,weight"]
for i in range(1000):
    r = rng.random()
    beta = rng.uniform(0.0, 20.0)
    if i < 4:
        r = [0.0, 1.0, 0.5, 1.0][i]
        beta = [5.0, 5.0, 5.0, 20.0][i]
    w = mpmath.exp(mpmath.mpf(r) * mpmath.mpf(beta))
    lines.append(f"{r!r},{beta!r},{mpmath.nstr(w, 30, min_fixed=-1, max_fixed=-1)}")
out.write_text("\n".join(lines) + "\n")
