"""The four adaptation methods behind one common surface.

Every adapter answers the same four questions: what is the effective weight,
what is the additive update, which arrays are trainable, and what are their
gradients given the upstream gradient of the effective weight.  Frozen arrays
are marked read-only at construction so a stray in-place update fails loudly.

* ``QrLoraAdapter``  - frozen pivoted-QR basis, trains one scalar per retained
  basis direction.  The update is ``sum_i lam_i * outer(q_i, r_row_i)`` mapped
  back to the original column order, so at full rank with all coefficients 1
  the update reproduces the frozen weight itself.
* ``LoraAdapter``    - the standard two-factor low-rank update ``b @ a`` with
  ``b`` zero-initialized.
* ``SvdLoraAdapter`` - same shape, but the factors start from the top-k
  singular triplets of the frozen weight, scaled by alpha/rank.  Note this
  start is deliberately NOT a no-op: the effective weight begins at
  ``w0 + (alpha/rank) * rank-k truncation of w0``.
* ``FullFtAdapter``  - everything trainable; the effective weight is the
  (mutable) weight itself.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .linalg import as_matrix, qr_pivoted, svd
from .rank import RankPolicy, select_rank

QR_LORA = "qr_lora"
LORA = "lora"
SVD_LORA = "svd_lora"
FULL_FT = "full_ft"
METHODS = (QR_LORA, LORA, SVD_LORA, FULL_FT)

PROJECTIONS = ("q", "k", "v", "o")


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(a)
    out.setflags(write=False)
    return out


def _check_grad_shape(g: np.ndarray, w0: np.ndarray) -> np.ndarray:
    g = as_matrix(g, name="upstream gradient")
    if g.shape != w0.shape:
        raise ValueError(f"upstream gradient shape {g.shape} does not match weight shape {w0.shape}")
    return g


@dataclass
class QrLoraAdapter:
    """Trainable scalars on a frozen pivoted-QR basis of the frozen weight."""

    w0: np.ndarray       # (L, M) frozen
    q_r: np.ndarray      # (L, r) first r pivoted-Q columns, frozen
    r_rows: np.ndarray   # (r, M) first r rows of R, frozen
    perm: np.ndarray     # (M,) column permutation, frozen
    lam: np.ndarray      # (r,) the only trainables

    @property
    def rank(self) -> int:
        return self.lam.size

    @property
    def trainable_count(self) -> int:
        return self.lam.size

    def delta_w(self) -> np.ndarray:
        """Update in the original column order of w0."""
        permuted = self.q_r @ (self.lam[:, None] * self.r_rows)
        out = np.empty_like(permuted)
        out[:, self.perm] = permuted
        return out

    def effective_weight(self) -> np.ndarray:
        return self.w0 + self.delta_w()

    def grad_trainables(self, g) -> dict[str, np.ndarray]:
        """d loss / d lam_i = Frobenius inner product of g with basis matrix i."""
        g = _check_grad_shape(g, self.w0)
        g_perm = g[:, self.perm]
        return {"lam": ((self.q_r.T @ g_perm) * self.r_rows).sum(axis=1)}

    def params(self) -> dict[str, np.ndarray]:
        return {"lam": self.lam}

    def frozen_arrays(self) -> dict[str, np.ndarray]:
        return {"w0": self.w0, "q_r": self.q_r, "r_rows": self.r_rows, "perm": self.perm}


def build_qr_adapter(w0, policy: RankPolicy) -> QrLoraAdapter:
    """Factor w0, pick the rank under ``policy``, start all coefficients at 0.

    Zero start makes the fresh adapter an exact no-op on the effective weight.
    """
    w0 = as_matrix(w0)
    f = qr_pivoted(w0)
    r = select_rank(np.diagonal(f.r), policy)
    return QrLoraAdapter(
        w0=_frozen(w0.copy()),
        q_r=_frozen(f.q[:, :r].copy()),
        r_rows=_frozen(f.r[:r, :].copy()),
        perm=_frozen(f.perm.copy()),
        lam=np.zeros(r),
    )


@dataclass
class LoraAdapter:
    """Two-factor low-rank update: delta = scaling * b @ a, b and a trainable."""

    w0: np.ndarray       # frozen
    b: np.ndarray        # (d_out, r) trainable
    a: np.ndarray        # (r, d_in) trainable
    scaling: float = 1.0

    @property
    def rank(self) -> int:
        return self.b.shape[1]

    @property
    def trainable_count(self) -> int:
        return self.b.size + self.a.size

    def delta_w(self) -> np.ndarray:
        return self.scaling * (self.b @ self.a)

    def effective_weight(self) -> np.ndarray:
        return self.w0 + self.delta_w()

    def grad_trainables(self, g) -> dict[str, np.ndarray]:
        g = _check_grad_shape(g, self.w0)
        return {"b": self.scaling * (g @ self.a.T), "a": self.scaling * (self.b.T @ g)}

    def params(self) -> dict[str, np.ndarray]:
        return {"b": self.b, "a": self.a}

    def frozen_arrays(self) -> dict[str, np.ndarray]:
        return {"w0": self.w0}


def build_lora_adapter(w0, rank: int, rng: np.random.Generator, scaling: float = 1.0) -> LoraAdapter:
    """Standard init: a ~ uniform(-1/sqrt(d_in), 1/sqrt(d_in)), b = 0."""
    w0 = as_matrix(w0)
    if rank < 1:
        raise ValueError(f"adapter rank must be >= 1, got {rank}")
    d_out, d_in = w0.shape
    bound = 1.0 / np.sqrt(d_in)
    a = rng.uniform(-bound, bound, size=(rank, d_in))
    return LoraAdapter(w0=_frozen(w0.copy()), b=np.zeros((d_out, rank)), a=a, scaling=scaling)


class SvdLoraAdapter(LoraAdapter):
    """LoRA whose factors start from the top-k singular triplets of w0."""


def build_svd_lora_adapter(w0, rank: int, k: int, alpha: float) -> SvdLoraAdapter:
    """Split the rank-k truncated SVD of w0 into balanced b/a factors.

    ``b[:, :k] = u_k sqrt(s_k)`` and ``a[:k, :] = sqrt(s_k) vt_k``; the
    remaining rank - k factor columns/rows start at zero but still train.
    """
    w0 = as_matrix(w0)
    if rank < 1:
        raise ValueError(f"adapter rank must be >= 1, got {rank}")
    if not (1 <= k <= rank):
        raise ValueError(f"truncation k must satisfy 1 <= k <= rank, got k={k}, rank={rank}")
    if k > min(w0.shape):
        raise ValueError(f"truncation k={k} exceeds min(w0.shape)={min(w0.shape)}")
    f = svd(w0)
    root = np.sqrt(f.sigma[:k])
    d_out, d_in = w0.shape
    b = np.zeros((d_out, rank))
    a = np.zeros((rank, d_in))
    b[:, :k] = f.u[:, :k] * root
    a[:k, :] = root[:, None] * f.vt[:k, :]
    return SvdLoraAdapter(w0=_frozen(w0.copy()), b=b, a=a, scaling=alpha / rank)


@dataclass
class FullFtAdapter:
    """No adapter at all: the weight itself trains."""

    w0: np.ndarray       # frozen reference copy of the starting point
    w: np.ndarray        # trainable

    @property
    def trainable_count(self) -> int:
        return self.w.size

    def delta_w(self) -> np.ndarray:
        return self.w - self.w0

    def effective_weight(self) -> np.ndarray:
        return self.w

    def grad_trainables(self, g) -> dict[str, np.ndarray]:
        g = _check_grad_shape(g, self.w0)
        return {"w": g.copy()}

    def params(self) -> dict[str, np.ndarray]:
        return {"w": self.w}

    def frozen_arrays(self) -> dict[str, np.ndarray]:
        return {"w0": self.w0}


def build_full_ft_adapter(w0) -> FullFtAdapter:
    w0 = as_matrix(w0)
    return FullFtAdapter(w0=_frozen(w0.copy()), w=w0.copy())


@dataclass(frozen=True)
class AdapterSpec:
    """Which method adapts which attention projections in which layers.

    ``layer_scope`` holds explicit layer indices; ``projection_set`` is a
    subset of q/k/v/o.  Both are ignored for full fine-tuning.  ``rank``,
    ``alpha`` and ``svd_k`` only matter for the LoRA variants; ``policy``
    only for the QR method.
    """

    method: str
    policy: RankPolicy | None = None
    rank: int = 2
    alpha: float = 2.0
    svd_k: int = 1
    layer_scope: tuple[int, ...] = ()
    projection_set: tuple[str, ...] = ()

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown adapter method {self.method!r}, expected one of {METHODS}")
        object.__setattr__(self, "layer_scope", tuple(sorted(set(self.layer_scope))))
        projs = tuple(p for p in PROJECTIONS if p in set(self.projection_set))
        if len(projs) != len(set(self.projection_set)):
            bad = set(self.projection_set) - set(PROJECTIONS)
            raise ValueError(f"unknown projections {sorted(bad)}, expected subset of {PROJECTIONS}")
        object.__setattr__(self, "projection_set", projs)
        if self.method == QR_LORA and self.policy is None:
            raise ValueError("qr_lora spec needs a rank policy")
        if self.method != QR_LORA and self.policy is not None:
            raise ValueError(f"{self.method} spec does not take a rank policy")
        if self.method in (LORA, SVD_LORA) and self.rank < 1:
            raise ValueError(f"adapter rank must be >= 1, got {self.rank}")
        if self.method == SVD_LORA and not (1 <= self.svd_k <= self.rank):
            raise ValueError(f"svd_k must satisfy 1 <= k <= rank, got {self.svd_k}")
        if self.method != FULL_FT and not self.projection_set:
            raise ValueError(f"{self.method} spec needs a non-empty projection set")

    def validate_for_depth(self, n_layers: int) -> None:
        if self.method == FULL_FT:
            return
        out = [i for i in self.layer_scope if not (0 <= i < n_layers)]
        if out:
            raise ValueError(f"layer indices {out} out of range for a {n_layers}-layer model")

    def adapted_slots(self, n_layers: int) -> list[tuple[int, str]]:
        """(layer, projection) pairs this spec wraps, in canonical order."""
        if self.method == FULL_FT:
            return []
        self.validate_for_depth(n_layers)
        return [(i, p) for i in self.layer_scope for p in self.projection_set]

    def scope_label(self, n_layers: int | None = None) -> str:
        if self.method == FULL_FT or not self.layer_scope:
            return ""
        if n_layers is not None:
            if self.layer_scope == tuple(range(n_layers)):
                return "all"
            n = len(self.layer_scope)
            if self.layer_scope == tuple(range(n_layers - n, n_layers)):
                return f"last{n}"
        return "+".join(str(i) for i in self.layer_scope)

    def projections_label(self) -> str:
        return "+".join(self.projection_set)

    def spell(self, n_layers: int | None = None) -> str:
        """Canonical one-token echo for result rows.

        Comma-free on purpose: the echo lands in a CSV column and must not
        need quoting.
        """
        if self.method == FULL_FT:
            return FULL_FT
        parts = []
        if self.method == QR_LORA:
            parts.append(self.policy.spell())
        else:
            parts.append(f"r={self.rank}")
            if self.method == SVD_LORA:
                parts.append(f"k={self.svd_k}")
                parts.append(f"alpha={self.alpha:g}")
        parts.append(f"scope={self.scope_label(n_layers)}")
        parts.append(f"proj={self.projections_label()}")
        return f"{self.method}({';'.join(parts)})"

    def with_policy(self, policy: RankPolicy) -> "AdapterSpec":
        return replace(self, policy=policy)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "policy": self.policy.spell() if self.policy is not None else None,
            "rank": self.rank,
            "alpha": self.alpha,
            "svd_k": self.svd_k,
            "layer_scope": list(self.layer_scope),
            "projection_set": list(self.projection_set),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterSpec":
        policy = d.get("policy")
        return cls(
            method=d["method"],
            policy=RankPolicy.parse(policy) if policy else None,
            rank=int(d.get("rank", 2)),
            alpha=float(d.get("alpha", 2.0)),
            svd_k=int(d.get("svd_k", 1)),
            layer_scope=tuple(int(i) for i in d.get("layer_scope", ())),
            projection_set=tuple(d.get("projection_set", ())),
        )


def build_adapter(spec: AdapterSpec, w0, rng: np.random.Generator):
    """Construct the adapter this spec asks for around one weight matrix."""
    if spec.method == QR_LORA:
        return build_qr_adapter(w0, spec.policy)
    if spec.method == LORA:
        return build_lora_adapter(w0, spec.rank, rng)
    if spec.method == SVD_LORA:
        return build_svd_lora_adapter(w0, spec.rank, spec.svd_k, spec.alpha)
    raise ValueError(f"no adapter wrapping for method {spec.method!r}")


@dataclass(frozen=True)
class ModelDims:
    """The model facts parameter accounting needs."""

    d_model: int
    n_layers: int
    base_params: int = 0  # every parameter outside the classifier head


def count_trainable(spec: AdapterSpec, dims: ModelDims, selected_ranks=None) -> int:
    """Closed-form trainable count of the adapters a spec would install.

    The classifier head is accounted separately everywhere and is never part
    of this number.  For the QR method the per-matrix selected ranks must be
    supplied (they depend on the weights, not just the shapes).
    """
    if spec.method == FULL_FT:
        return dims.base_params
    n_adapted = len(spec.layer_scope) * len(spec.projection_set)
    if spec.method in (LORA, SVD_LORA):
        return n_adapted * spec.rank * (dims.d_model + dims.d_model)
    ranks = list(selected_ranks or [])
    if len(ranks) != n_adapted:
        raise ValueError(
            f"qr_lora count needs one selected rank per adapted matrix: expected {n_adapted}, got {len(ranks)}"
        )
    return int(sum(ranks))
