"""Walk through a pivoted QR factorization and what the pivoting buys.

Run from the repo root:  python3 demos/01_factorization.py
"""

import numpy as np

from qradapt import qr_pivoted, reconstruct

rng = np.random.default_rng(0)

# a 8x6 matrix that is nearly rank 3: three strong directions, three weak ones
strong = rng.normal(size=(8, 3)) @ rng.normal(size=(3, 6))
w = strong + 1e-3 * rng.normal(size=(8, 6))

f = qr_pivoted(w)
print("input shape:", w.shape)
print("column order chosen by pivoting:", [int(j) for j in f.perm])
print("diag(R):", np.array2string(np.diagonal(f.r), precision=4))

# the pivoted diagonal is non-increasing, so it doubles as an importance
# ranking of the column space: the cliff after entry 3 exposes the true rank
d = np.abs(np.diagonal(f.r))
print("diag ratios d[i]/d[0]:", np.array2string(d / d[0], precision=5))

err = np.abs(reconstruct(f) - w).max()
print(f"reconstruction error |QR P^T - W|_max = {err:.2e}")

# orthonormality of Q is what makes the later scalar-coefficient trick work:
# projecting a gradient onto the basis is just a transpose multiply
gram = f.q.T @ f.q
print(f"|Q^T Q - I|_max = {np.abs(gram - np.eye(gram.shape[0])).max():.2e}")
