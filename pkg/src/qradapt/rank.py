"""Rank selection rules mapping the diagonal of R to a retained rank.

Three threshold rules coexist deliberately (they are NOT interchangeable):

* ``energy``  - smallest r with sum of the first r squared diagonal entries
  reaching a fraction tau of the total squared mass (closed comparison, >=).
* ``abs``     - same prefix rule on absolute values instead of squares.
* ``relmag``  - count of diagonal entries strictly exceeding tau times the
  leading entry.
* ``fixed``   - escape hatch: a constant rank, clamped to the diagonal length.

Spelled in configs and on the command line as ``energy:0.5``, ``abs:0.5``,
``relmag:0.5``, ``fixed:2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RATIO_KINDS = ("energy", "abs", "relmag")
KINDS = RATIO_KINDS + ("fixed",)

# tolerated noise floor when validating that |diag| is non-increasing; the
# factorization orders diagonals exactly in exact arithmetic, but trailing
# entries of rank-deficient inputs sit at rounding level
MONOTONE_SLACK = 1e-12


@dataclass(frozen=True)
class RankPolicy:
    kind: str
    tau: float | None = None
    r: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown rank policy kind {self.kind!r}, expected one of {KINDS}")
        if self.kind in RATIO_KINDS:
            if self.tau is None or not (0.0 < self.tau < 1.0):
                raise ValueError(f"{self.kind} policy needs tau strictly inside (0, 1), got {self.tau}")
            if self.r is not None:
                raise ValueError(f"{self.kind} policy does not take a fixed rank")
        else:
            if self.r is None or self.r < 1:
                raise ValueError(f"fixed policy needs r >= 1, got {self.r}")
            if self.tau is not None:
                raise ValueError("fixed policy does not take tau")

    @classmethod
    def energy(cls, tau: float) -> "RankPolicy":
        return cls("energy", tau=tau)

    @classmethod
    def abs_cumulative(cls, tau: float) -> "RankPolicy":
        return cls("abs", tau=tau)

    @classmethod
    def relative_magnitude(cls, tau: float) -> "RankPolicy":
        return cls("relmag", tau=tau)

    @classmethod
    def fixed(cls, r: int) -> "RankPolicy":
        return cls("fixed", r=r)

    @classmethod
    def parse(cls, text: str) -> "RankPolicy":
        """Parse the ``kind:value`` spelling used by configs and the CLI."""
        kind, sep, value = text.partition(":")
        if not sep or not value:
            raise ValueError(f"rank policy must be spelled kind:value, got {text!r}")
        if kind == "fixed":
            return cls.fixed(int(value))
        return cls(kind, tau=float(value))

    def spell(self) -> str:
        if self.kind == "fixed":
            return f"fixed:{self.r}"
        return f"{self.kind}:{self.tau:g}"

    def with_tau(self, tau: float) -> "RankPolicy":
        if self.kind == "fixed":
            raise ValueError("fixed policy has no tau to replace")
        return RankPolicy(self.kind, tau=tau)


def select_rank(diag, policy: RankPolicy) -> int:
    """Retained rank for a diagonal produced by the pivoted factorization.

    The diagonal must be non-empty with non-increasing magnitudes; ratio
    policies additionally reject an all-zero diagonal (the threshold ratio
    is undefined there).  Always returns r with 1 <= r <= len(diag).
    """
    d = np.asarray(diag, dtype=np.float64)
    if d.ndim != 1 or d.size == 0:
        raise ValueError(f"diagonal must be a non-empty 1-D array, got shape {d.shape}")
    if not np.isfinite(d).all():
        raise ValueError("diagonal contains non-finite entries")
    mags = np.abs(d)
    slack = MONOTONE_SLACK * (1.0 + mags[0])
    if np.any(mags[1:] > mags[:-1] + slack):
        bad = int(np.flatnonzero(mags[1:] > mags[:-1] + slack)[0]) + 1
        raise ValueError(
            f"diagonal magnitudes must be non-increasing (factorization contract); "
            f"entry {bad} ({mags[bad]:g}) exceeds entry {bad - 1} ({mags[bad - 1]:g})"
        )

    if policy.kind == "fixed":
        return min(policy.r, d.size)

    if not mags.any():
        raise ValueError(f"all-zero diagonal: {policy.kind} threshold ratio is undefined")

    if policy.kind == "relmag":
        # strict comparison: an entry at exactly tau * |d0| is excluded
        return int(np.count_nonzero(mags > policy.tau * mags[0]))

    weights = d * d if policy.kind == "energy" else mags
    prefix = np.cumsum(weights)
    target = policy.tau * prefix[-1]
    return int(np.searchsorted(prefix, target, side="left")) + 1
