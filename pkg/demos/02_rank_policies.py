"""How the four rank policies read the same diagonal differently.

Run from the repo root:  python3 demos/02_rank_policies.py
"""

import numpy as np

from qradapt import RankPolicy, qr_pivoted, select_rank

rng = np.random.default_rng(7)

# build a matrix with a fast-decaying spectrum
k = 12
base = sum(0.5**i * np.outer(rng.normal(size=16), rng.normal(size=16)) for i in range(k))
diag = np.abs(np.diagonal(qr_pivoted(base).r))
print("pivoted diagonal:", np.array2string(diag[:8], precision=4), "...")

# energy: squared mass, favors the few dominant directions
# abs:    linear mass, keeps more of the tail
# relmag: a cliff detector relative to the top entry
# fixed:  you already know what you want
for spell in ("energy:0.5", "energy:0.9", "abs:0.5", "abs:0.9",
              "relmag:0.1", "relmag:0.01", "fixed:4"):
    pol = RankPolicy.parse(spell)
    print(f"  {spell:12s} -> rank {select_rank(diag, pol)}")

# the threshold knob is monotone for the cumulative policies, which is what
# makes threshold sweeps meaningful
for tau in (0.3, 0.5, 0.7, 0.9, 0.99):
    r = select_rank(diag, RankPolicy.energy(tau))
    print(f"  energy tau={tau:.2f} -> rank {r}")
