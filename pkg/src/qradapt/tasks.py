"""Synthetic classification tasks with known generative rules.

Three binary task families over integer token sequences:

* ``BAG_SEPARABLE``  - each vocab token carries a hidden +1/-1 sign; the label
  is the sign of the sequence's total.  Linearly separable from bag-of-token
  counts, so any sane training setup should saturate it.
* ``PATTERN_MATCH``  - the label says whether a fixed bigram occurs adjacently
  anywhere in the sequence.  Positives get the bigram planted at a random
  offset; negatives are rejection-sampled to exclude it.
* ``PAIR_ENTAIL``    - the sequence is two half-segments; the label says
  whether the halves' hidden sign totals agree.  Ships two eval splits:
  "matched" (same token distribution as training) and "mismatched" (skewed
  token distribution, same rule).

All sampling is per-class quota driven and class-interleaved, so every even
prefix of the train split is exactly balanced; nested training-size subsets
stay comparable.  Train and eval rows are globally deduplicated.  The
generative rule (sign vector, bigram) rides along in ``TaskData.rule`` so
labels can be recomputed independently of this module's code paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BAG_SEPARABLE = "bag_separable"
PATTERN_MATCH = "pattern_match"
PAIR_ENTAIL = "pair_entail"
KINDS = (BAG_SEPARABLE, PATTERN_MATCH, PAIR_ENTAIL)

_CHUNK = 4096


@dataclass(frozen=True)
class SyntheticTask:
    kind: str
    vocab_size: int = 64
    seq_len: int = 16
    n_classes: int = 2
    n_train: int = 2000
    n_eval: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}, expected one of {KINDS}")
        if self.n_classes != 2:
            raise ValueError(f"these tasks are binary; n_classes must be 2, got {self.n_classes}")
        if self.vocab_size < 4:
            raise ValueError(f"vocab_size must be >= 4, got {self.vocab_size}")
        if self.seq_len < 2:
            raise ValueError(f"seq_len must be >= 2, got {self.seq_len}")
        if self.n_train < 2 or self.n_eval < 2:
            raise ValueError("n_train and n_eval must both be >= 2")


@dataclass
class TaskData:
    task: SyntheticTask
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray
    extra_eval: dict = field(default_factory=dict)   # name -> (x, y)
    rule: dict = field(default_factory=dict)

    def train_subset(self, n: int):
        """First n rows; prefixes nest and stay balanced by construction."""
        if not (1 <= n <= len(self.x_train)):
            raise ValueError(f"subset size {n} outside [1, {len(self.x_train)}]")
        return self.x_train[:n], self.y_train[:n]


def _balanced_signs(vocab: int, rng: np.random.Generator) -> np.ndarray:
    s = np.ones(vocab, dtype=int)
    s[vocab // 2:] = -1
    return rng.permutation(s)


def _skewed_probs(vocab: int) -> np.ndarray:
    # harmonic weights: low token ids dominate, every token stays reachable
    p = 1.0 / (1.0 + np.arange(vocab))
    return p / p.sum()


def _interleave(pool0: list, pool1: list, n: int) -> tuple[np.ndarray, np.ndarray]:
    counts = (n - n // 2, n // 2)
    rows, labels = [], []
    i0 = i1 = 0
    for j in range(n):
        if j % 2 == 0 and i0 < counts[0]:
            rows.append(pool0[i0]); labels.append(0); i0 += 1
        else:
            rows.append(pool1[i1]); labels.append(1); i1 += 1
    return np.array(rows), np.array(labels)


class _QuotaSampler:
    """Fill per-class row pools from a vectorized candidate generator."""

    def __init__(self, seen: set):
        self.seen = seen

    def fill(self, need0: int, need1: int, draw) -> tuple[list, list]:
        pool0: list = []
        pool1: list = []
        while len(pool0) < need0 or len(pool1) < need1:
            x, y = draw(_CHUNK)
            for row, lab in zip(x, y):
                if lab == 0 and len(pool0) >= need0:
                    continue
                if lab == 1 and len(pool1) >= need1:
                    continue
                key = row.tobytes()
                if key in self.seen:
                    continue
                self.seen.add(key)
                (pool0 if lab == 0 else pool1).append(row.copy())
        return pool0, pool1


def _draw_bag(rng, task, signs, p=None):
    def draw(n):
        if p is None:
            x = rng.integers(0, task.vocab_size, size=(n, task.seq_len))
        else:
            x = rng.choice(task.vocab_size, size=(n, task.seq_len), p=p)
        score = signs[x].sum(axis=1)
        keep = score != 0
        return x[keep], (score[keep] > 0).astype(int)
    return draw

def _draw_pattern(rng, task, bigram):
    a, b = bigram
    def draw(n):
        x = rng.integers(0, task.vocab_size, size=(n, task.seq_len))
        hit = ((x[:, :-1] == a) & (x[:, 1:] == b)).any(axis=1)
        neg_x, neg_y = x[~hit], np.zeros((~hit).sum(), dtype=int)
        pos = x[: n // 2].copy()
        at = rng.integers(0, task.seq_len - 1, size=len(pos))
        pos[np.arange(len(pos)), at] = a
        pos[np.arange(len(pos)), at + 1] = b
        return np.concatenate([neg_x, pos]), np.concatenate([neg_y, np.ones(len(pos), dtype=int)])
    return draw

def _draw_pair(rng, task, signs, half, p=None):
    def draw(n):
        if p is None:
            x = rng.integers(0, task.vocab_size, size=(n, task.seq_len))
        else:
            x = rng.choice(task.vocab_size, size=(n, task.seq_len), p=p)
        s1 = signs[x[:, :half]].sum(axis=1)
        s2 = signs[x[:, half:]].sum(axis=1)
        keep = (s1 != 0) & (s2 != 0)
        return x[keep], (np.sign(s1[keep]) == np.sign(s2[keep])).astype(int)
    return draw


def generate(task: SyntheticTask) -> TaskData:
    """Materialize a task: disjoint balanced train/eval, rule metadata attached."""
    rng = np.random.default_rng(int(task.seed) & (2**64 - 1))
    seen: set = set()
    sampler = _QuotaSampler(seen)
    quota = lambda n: (n - n // 2, n // 2)

    if task.kind == BAG_SEPARABLE:
        signs = _balanced_signs(task.vocab_size, rng)
        draw = _draw_bag(rng, task, signs)
        rule = {"kind": task.kind, "signs": signs}
        splits = {"train": task.n_train, "eval": task.n_eval}
        draws = {"train": draw, "eval": draw}
    elif task.kind == PATTERN_MATCH:
        a = int(rng.integers(0, task.vocab_size))
        b = int((a + 1 + rng.integers(0, task.vocab_size - 1)) % task.vocab_size)
        draw = _draw_pattern(rng, task, (a, b))
        rule = {"kind": task.kind, "bigram": (a, b)}
        splits = {"train": task.n_train, "eval": task.n_eval}
        draws = {"train": draw, "eval": draw}
    else:
        signs = _balanced_signs(task.vocab_size, rng)
        half = task.seq_len // 2
        rule = {"kind": task.kind, "signs": signs, "half": half}
        splits = {"train": task.n_train, "matched": task.n_eval, "mismatched": task.n_eval}
        draws = {
            "train": _draw_pair(rng, task, signs, half),
            "matched": _draw_pair(rng, task, signs, half),
            "mismatched": _draw_pair(rng, task, signs, half, p=_skewed_probs(task.vocab_size)),
        }

    made = {}
    for name, n in splits.items():
        n0, n1 = quota(n)
        pool0, pool1 = sampler.fill(n0, n1, draws[name])
        made[name] = _interleave(pool0, pool1, n)

    if task.kind == PAIR_ENTAIL:
        x_eval, y_eval = made["matched"]
        extra = {"matched": made["matched"], "mismatched": made["mismatched"]}
    else:
        x_eval, y_eval = made["eval"]
        extra = {}
    x_train, y_train = made["train"]
    return TaskData(
        task=task,
        x_train=x_train, y_train=y_train,
        x_eval=x_eval, y_eval=y_eval,
        extra_eval=extra, rule=rule,
    )
