"""Desk-scale transformer encoder with hand-written reverse-mode gradients.

Post-norm encoder blocks (attention -> add+LN -> FFN -> add+LN), fixed
sinusoidal positions, mean-pool over time, linear classifier head.  The four
attention projections of every block sit behind ``ProjectionSlot`` so any of
them can be wrapped by an adapter; ``backward`` routes the effective-weight
gradient either to the raw matrix (full fine-tuning) or through the wrapped
adapter's ``grad_trainables``.

The classifier head is always trainable regardless of adapter spec, and its
parameter count is reported separately so adapter-only accounting stays clean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .adapters import FULL_FT, PROJECTIONS, AdapterSpec, ModelDims, build_adapter

LN_EPS = 1e-5
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class TinyTransformerConfig:
    vocab_size: int
    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 64
    max_seq_len: int = 16
    n_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "d_ff", "max_seq_len", "n_classes"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not (-(2**63) <= int(self.seed) < 2**64):
            raise ValueError(f"seed must fit in 64 bits, got {self.seed}")


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None].astype(float)
    idx = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (idx // 2)) / d_model)
    pe = np.empty((max_len, d_model))
    pe[:, 0::2] = np.sin(angle[:, 0::2])
    pe[:, 1::2] = np.cos(angle[:, 1::2])
    return pe


class ProjectionSlot:
    """One attention projection matrix, optionally wrapped by an adapter."""

    def __init__(self, w: np.ndarray):
        self.w = w
        self.adapter = None

    def weight(self) -> np.ndarray:
        return self.adapter.effective_weight() if self.adapter is not None else self.w


class _Layer:
    def __init__(self, rng: np.random.Generator, d_model: int, d_ff: int):
        s = 1.0 / np.sqrt(d_model)
        self.slots = {p: ProjectionSlot(rng.normal(0.0, s, (d_model, d_model))) for p in PROJECTIONS}
        self.w1 = rng.normal(0.0, s, (d_ff, d_model))
        self.b1 = np.zeros(d_ff)
        self.w2 = rng.normal(0.0, 1.0 / np.sqrt(d_ff), (d_model, d_ff))
        self.b2 = np.zeros(d_model)
        self.ln1_g = np.ones(d_model)
        self.ln1_b = np.zeros(d_model)
        self.ln2_g = np.ones(d_model)
        self.ln2_b = np.zeros(d_model)

    def named_raw(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"{p}.w", self.slots[p].w) for p in PROJECTIONS]
        out += [("ffn.w1", self.w1), ("ffn.b1", self.b1), ("ffn.w2", self.w2), ("ffn.b2", self.b2)]
        out += [("ln1.g", self.ln1_g), ("ln1.b", self.ln1_b), ("ln2.g", self.ln2_g), ("ln2.b", self.ln2_b)]
        return out


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return g * xhat + b, (xhat, inv)


def _layer_norm_backward(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=(0, 1))
    db = dy.sum(axis=(0, 1))
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


class TinyTransformer:
    """Encoder classifier over token-id sequences, float64 throughout."""

    def __init__(self, config: TinyTransformerConfig):
        self.config = config
        c = config
        rng = np.random.default_rng(int(c.seed) & (2**64 - 1))
        self.embed = rng.normal(0.0, 1.0 / np.sqrt(c.d_model), (c.vocab_size, c.d_model))
        self.pos = sinusoidal_positions(c.max_seq_len, c.d_model)
        self.layers = [_Layer(rng, c.d_model, c.d_ff) for _ in range(c.n_layers)]
        self.head_w = rng.normal(0.0, 1.0 / np.sqrt(c.d_model), (c.n_classes, c.d_model))
        self.head_b = np.zeros(c.n_classes)
        self.spec: AdapterSpec | None = None
        self._cache = None

    # ---- parameter bookkeeping -------------------------------------------

    def head_count(self) -> int:
        return self.head_w.size + self.head_b.size

    def base_param_count(self) -> int:
        """Every parameter outside the classifier head."""
        n = self.embed.size
        for layer in self.layers:
            n += sum(a.size for _, a in layer.named_raw())
        return n

    def dims(self) -> ModelDims:
        return ModelDims(d_model=self.config.d_model, n_layers=self.config.n_layers, base_params=self.base_param_count())

    def trainable_params(self) -> dict[str, np.ndarray]:
        """Live arrays the optimizer may update, in canonical order."""
        out: dict[str, np.ndarray] = {}
        if self.spec is None or self.spec.method == FULL_FT:
            out["embed"] = self.embed
            for i, layer in enumerate(self.layers):
                for name, arr in layer.named_raw():
                    out[f"layers.{i}.{name}"] = arr
        else:
            for i, p in self.spec.adapted_slots(self.config.n_layers):
                for name, arr in self.layers[i].slots[p].adapter.params().items():
                    out[f"layers.{i}.{p}.{name}"] = arr
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def adapter_trainable_count(self) -> int:
        """Trainables excluding the always-on head."""
        return sum(a.size for k, a in self.trainable_params().items() if not k.startswith("head."))

    def frozen_tensors(self) -> dict[str, np.ndarray]:
        """Everything backward must never touch under the active spec."""
        trainable = set(self.trainable_params())
        out: dict[str, np.ndarray] = {}
        if "embed" not in trainable:
            out["embed"] = self.embed
        for i, layer in enumerate(self.layers):
            for name, arr in layer.named_raw():
                if f"layers.{i}.{name}" not in trainable:
                    out[f"layers.{i}.{name}"] = arr
            for p in PROJECTIONS:
                ad = layer.slots[p].adapter
                if ad is not None:
                    for name, arr in ad.frozen_arrays().items():
                        out[f"layers.{i}.{p}.{name}"] = arr
        return out

    # ---- adapter injection -----------------------------------------------

    def inject_adapters(self, spec: AdapterSpec) -> None:
        """Wrap the selected slots; freeze everything else except the head."""
        if self.spec is not None:
            raise RuntimeError("adapters already injected; build a fresh model to change spec")
        spec.validate_for_depth(self.config.n_layers)
        if spec.method != FULL_FT:
            for i, p in spec.adapted_slots(self.config.n_layers):
                rng = np.random.default_rng([int(self.config.seed) & (2**64 - 1), i, PROJECTIONS.index(p), 0x5107])
                slot = self.layers[i].slots[p]
                slot.adapter = build_adapter(spec, slot.w, rng)
            self.embed.setflags(write=False)
            for layer in self.layers:
                for _, arr in layer.named_raw():
                    arr.setflags(write=False)
        self.spec = spec

    # ---- forward ---------------------------------------------------------

    def forward(self, ids: np.ndarray) -> np.ndarray:
        c = self.config
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ValueError(f"batch must be 2-D (batch, time), got shape {ids.shape}")
        if ids.shape[1] > c.max_seq_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_seq_len {c.max_seq_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= c.vocab_size):
            raise ValueError(f"token ids must lie in [0, {c.vocab_size}), got range [{ids.min()}, {ids.max()}]")
        B, T = ids.shape
        H = c.n_heads
        hd = c.d_model // H
        scale = 1.0 / np.sqrt(hd)

        x = self.embed[ids] + self.pos[:T]
        caches = []
        for layer in self.layers:
            x_in = x
            wq = layer.slots["q"].weight()
            wk = layer.slots["k"].weight()
            wv = layer.slots["v"].weight()
            wo = layer.slots["o"].weight()
            q = x_in @ wq.T
            k = x_in @ wk.T
            v = x_in @ wv.T
            qh = q.reshape(B, T, H, hd).transpose(0, 2, 1, 3)
            kh = k.reshape(B, T, H, hd).transpose(0, 2, 1, 3)
            vh = v.reshape(B, T, H, hd).transpose(0, 2, 1, 3)
            attn = softmax(scale * (qh @ kh.transpose(0, 1, 3, 2)))
            ctx = (attn @ vh).transpose(0, 2, 1, 3).reshape(B, T, c.d_model)
            ao = ctx @ wo.T
            h1 = x_in + ao
            y1, ln1c = _layer_norm(h1, layer.ln1_g, layer.ln1_b)
            f1 = y1 @ layer.w1.T + layer.b1
            g1 = gelu(f1)
            f2 = g1 @ layer.w2.T + layer.b2
            y2, ln2c = _layer_norm(y1 + f2, layer.ln2_g, layer.ln2_b)
            caches.append(
                {
                    "x_in": x_in, "weights": (wq, wk, wv, wo), "qh": qh, "kh": kh, "vh": vh,
                    "attn": attn, "ctx": ctx, "ln1": ln1c, "y1": y1, "f1": f1, "g1": g1, "ln2": ln2c,
                }
            )
            x = y2
        pooled = x.mean(axis=1)
        logits = pooled @ self.head_w.T + self.head_b
        self._cache = {"ids": ids, "pooled": pooled, "layers": caches, "shape": (B, T, H, hd, scale)}
        return logits

    def attention_maps(self) -> list[np.ndarray]:
        if self._cache is None:
            raise RuntimeError("no cached forward pass")
        return [c["attn"] for c in self._cache["layers"]]

    # ---- backward --------------------------------------------------------

    def backward(self, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients for exactly the keys of trainable_params()."""
        if self._cache is None:
            raise RuntimeError("backward called without a preceding forward pass")
        cache = self._cache
        B, T, H, hd, scale = cache["shape"]
        dlogits = np.asarray(dlogits, dtype=float)
        if dlogits.shape != (B, self.config.n_classes):
            raise ValueError(f"upstream gradient shape {dlogits.shape} does not match logits ({B}, {self.config.n_classes})")

        full = self.spec is None or self.spec.method == FULL_FT
        grads: dict[str, np.ndarray] = {}
        d = self.config.d_model

        g_head_w = dlogits.T @ cache["pooled"]
        g_head_b = dlogits.sum(axis=0)
        dpooled = dlogits @ self.head_w
        dx = np.repeat(dpooled[:, None, :], T, axis=1) / T

        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            c = cache["layers"][i]
            wq, wk, wv, wo = c["weights"]

            dh2, dg_ln2, db_ln2 = _layer_norm_backward(dx, layer.ln2_g, c["ln2"])
            df2 = dh2
            dW2 = df2.reshape(-1, d).T @ c["g1"].reshape(-1, layer.w1.shape[0])
            db2 = df2.sum(axis=(0, 1))
            dg1 = df2 @ layer.w2
            df1 = dg1 * gelu_grad(c["f1"])
            dW1 = df1.reshape(-1, layer.w1.shape[0]).T @ c["y1"].reshape(-1, d)
            db1 = df1.sum(axis=(0, 1))
            dy1 = dh2 + df1 @ layer.w1

            dh1, dg_ln1, db_ln1 = _layer_norm_backward(dy1, layer.ln1_g, c["ln1"])
            dao = dh1
            dWo = dao.reshape(-1, d).T @ c["ctx"].reshape(-1, d)
            dctx = (dao @ wo).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
            dattn = dctx @ c["vh"].transpose(0, 1, 3, 2)
            dvh = c["attn"].transpose(0, 1, 3, 2) @ dctx
            a = c["attn"]
            dscores = (dattn - (dattn * a).sum(axis=-1, keepdims=True)) * a
            dqh = scale * (dscores @ c["kh"])
            dkh = scale * (dscores.transpose(0, 1, 3, 2) @ c["qh"])
            dq = dqh.transpose(0, 2, 1, 3).reshape(B, T, d)
            dk = dkh.transpose(0, 2, 1, 3).reshape(B, T, d)
            dv = dvh.transpose(0, 2, 1, 3).reshape(B, T, d)
            x2 = c["x_in"].reshape(-1, d)
            dWq = dq.reshape(-1, d).T @ x2
            dWk = dk.reshape(-1, d).T @ x2
            dWv = dv.reshape(-1, d).T @ x2
            dx = dh1 + dq @ wq + dk @ wk + dv @ wv

            proj_grads = {"q": dWq, "k": dWk, "v": dWv, "o": dWo}
            if full:
                for p in PROJECTIONS:
                    grads[f"layers.{i}.{p}.w"] = proj_grads[p]
                grads[f"layers.{i}.ffn.w1"] = dW1
                grads[f"layers.{i}.ffn.b1"] = db1
                grads[f"layers.{i}.ffn.w2"] = dW2
                grads[f"layers.{i}.ffn.b2"] = db2
                grads[f"layers.{i}.ln1.g"] = dg_ln1
                grads[f"layers.{i}.ln1.b"] = db_ln1
                grads[f"layers.{i}.ln2.g"] = dg_ln2
                grads[f"layers.{i}.ln2.b"] = db_ln2
            else:
                for p in PROJECTIONS:
                    ad = layer.slots[p].adapter
                    if ad is not None:
                        for name, g in ad.grad_trainables(proj_grads[p]).items():
                            grads[f"layers.{i}.{p}.{name}"] = g

        if full:
            g_embed = np.zeros_like(self.embed)
            np.add.at(g_embed, cache["ids"], dx)
            grads["embed"] = g_embed

        grads["head.w"] = g_head_w
        grads["head.b"] = g_head_b
        ordered = {k: grads[k] for k in self.trainable_params()}
        return ordered
