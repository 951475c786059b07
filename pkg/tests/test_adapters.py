"""Adapter behavior: init identities, gradients vs finite differences, counting."""

import numpy as np
import numpy.testing as npt
import pytest

from qradapt.adapters import (
    FULL_FT,
    LORA,
    QR_LORA,
    SVD_LORA,
    AdapterSpec,
    ModelDims,
    build_full_ft_adapter,
    build_lora_adapter,
    build_qr_adapter,
    build_svd_lora_adapter,
    count_trainable,
)
from qradapt.rank import RankPolicy


def probe_grad_fd(adapter, g, h=1e-4):
    """Central differences of tr(g^T W_eff) through every trainable entry."""
    out = {}
    for name, arr in adapter.params().items():
        fd = np.empty(arr.size)
        flat = arr.reshape(-1)
        for i in range(arr.size):
            keep = flat[i]
            flat[i] = keep + h
            up = np.sum(g * adapter.effective_weight())
            flat[i] = keep - h
            dn = np.sum(g * adapter.effective_weight())
            flat[i] = keep
            fd[i] = (up - dn) / (2 * h)
        out[name] = fd.reshape(arr.shape)
    return out


def all_adapters(w, rng):
    return [
        build_qr_adapter(w, RankPolicy.energy(0.7)),
        build_lora_adapter(w, 2, rng),
        build_svd_lora_adapter(w, 2, 1, 2.0),
        build_full_ft_adapter(w),
    ]


class TestInitIdentities:
    def test_zero_init_no_op(self):
        rng = np.random.default_rng(3)
        w = rng.normal(size=(6, 5))
        for ad in (build_qr_adapter(w, RankPolicy.energy(0.5)),
                   build_lora_adapter(w, 2, rng),
                   build_full_ft_adapter(w)):
            npt.assert_array_equal(ad.effective_weight(), w)
            npt.assert_array_equal(ad.delta_w(), np.zeros_like(w))

    def test_svd_variant_starts_shifted(self):
        # this one trains from the scaled truncation, not from a no-op
        rng = np.random.default_rng(4)
        w = rng.normal(size=(7, 6))
        ad = build_svd_lora_adapter(w, rank=2, k=1, alpha=2.0)
        u, s, vt = np.linalg.svd(w)
        expected = w + (2.0 / 2) * s[0] * np.outer(u[:, 0], vt[0])
        npt.assert_allclose(ad.effective_weight(), expected, atol=1e-10)

    def test_svd_variant_truncation_oracle_k2(self):
        rng = np.random.default_rng(8)
        w = rng.normal(size=(5, 9))
        ad = build_svd_lora_adapter(w, rank=3, k=2, alpha=1.5)
        u, s, vt = np.linalg.svd(w)
        trunc = (u[:, :2] * s[:2]) @ vt[:2]
        npt.assert_allclose(ad.delta_w(), (1.5 / 3) * trunc, atol=1e-10)

    def test_full_rank_unit_coefficients_reproduce_w0(self):
        rng = np.random.default_rng(12)
        for _ in range(200):
            L = int(rng.integers(1, 11))
            M = int(rng.integers(1, 11))
            w = rng.normal(size=(L, M))
            ad = build_qr_adapter(w, RankPolicy.fixed(min(L, M)))
            ad.lam[:] = 1.0
            npt.assert_allclose(ad.delta_w(), w, rtol=0, atol=1e-10 * (1 + np.abs(w).max()))

    def test_lora_init_shapes_and_bounds(self):
        rng = np.random.default_rng(0)
        ad = build_lora_adapter(np.zeros((4, 9)), 3, rng)
        assert ad.b.shape == (4, 3) and ad.a.shape == (3, 9)
        assert np.all(ad.b == 0)
        assert np.all(np.abs(ad.a) <= 1 / 3)  # uniform bound 1/sqrt(d_in)


class TestGradients:
    def test_zero_upstream_gives_zero_grads(self):
        rng = np.random.default_rng(1)
        w = rng.normal(size=(5, 4))
        for ad in all_adapters(w, rng):
            for g in ad.grad_trainables(np.zeros_like(w)).values():
                assert not np.any(g)

    def test_basis_matrix_probe(self):
        # probing with the first basis matrix isolates the first coefficient:
        # orthonormal q columns kill every cross term
        rng = np.random.default_rng(2)
        w = rng.normal(size=(6, 6))
        ad = build_qr_adapter(w, RankPolicy.fixed(3))
        basis1 = np.zeros_like(w)
        basis1[:, ad.perm] = np.outer(ad.q_r[:, 0], ad.r_rows[0])
        g = ad.grad_trainables(basis1)["lam"]
        expected = np.zeros(3)
        expected[0] = np.sum(ad.r_rows[0] ** 2)
        npt.assert_allclose(g, expected, atol=1e-10)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(42)
        for shape in [(6, 6), (8, 5), (4, 9)]:
            w = rng.normal(size=shape)
            g = rng.normal(size=shape)
            for ad in all_adapters(w, rng):
                got = ad.grad_trainables(g)
                fd = probe_grad_fd(ad, g)
                for name in got:
                    denom = max(np.abs(fd[name]).max(), 1e-12)
                    assert np.abs(got[name] - fd[name]).max() / denom < 1e-6, (type(ad).__name__, name)

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(3)
        w = rng.normal(size=(4, 4))
        for ad in all_adapters(w, rng):
            with pytest.raises(ValueError, match="shape"):
                ad.grad_trainables(np.zeros((3, 4)))


class TestFreezing:
    def test_frozen_arrays_reject_writes(self):
        rng = np.random.default_rng(5)
        w = rng.normal(size=(5, 5))
        ad = build_qr_adapter(w, RankPolicy.energy(0.5))
        for arr in ad.frozen_arrays().values():
            with pytest.raises(ValueError):
                arr[0] = 0

    def test_simulated_training_touches_only_lam(self):
        rng = np.random.default_rng(6)
        w = rng.normal(size=(6, 6))
        ad = build_qr_adapter(w, RankPolicy.energy(0.9))
        before = {k: v.tobytes() for k, v in ad.frozen_arrays().items()}
        for _ in range(100):
            g = rng.normal(size=w.shape)
            ad.lam -= 0.01 * ad.grad_trainables(g)["lam"]
        after = {k: v.tobytes() for k, v in ad.frozen_arrays().items()}
        assert before == after


class TestSpecAndCounting:
    def test_spec_validation(self):
        with pytest.raises(ValueError, match="unknown adapter method"):
            AdapterSpec(method="dora")
        with pytest.raises(ValueError, match="rank policy"):
            AdapterSpec(method=QR_LORA, layer_scope=(0,), projection_set=("o",))
        with pytest.raises(ValueError, match="rank policy"):
            AdapterSpec(method=LORA, policy=RankPolicy.fixed(1), layer_scope=(0,), projection_set=("o",))
        with pytest.raises(ValueError, match="projection"):
            AdapterSpec(method=LORA, layer_scope=(0,), projection_set=())
        with pytest.raises(ValueError, match="unknown projections"):
            AdapterSpec(method=LORA, layer_scope=(0,), projection_set=("q", "z"))
        with pytest.raises(ValueError, match="svd_k"):
            AdapterSpec(method=SVD_LORA, rank=2, svd_k=3, layer_scope=(0,), projection_set=("o",))
        spec = AdapterSpec(method=LORA, layer_scope=(1, 0, 1), projection_set=("v", "q"))
        assert spec.layer_scope == (0, 1)
        assert spec.projection_set == ("q", "v")  # canonical q,k,v,o order
        with pytest.raises(ValueError, match="out of range"):
            spec.validate_for_depth(1)

    def test_spec_dict_round_trip(self):
        spec = AdapterSpec(method=QR_LORA, policy=RankPolicy.energy(0.7), layer_scope=(1, 3), projection_set=("q", "o"))
        assert AdapterSpec.from_dict(spec.to_dict()) == spec

    def test_scope_and_projection_labels(self):
        spec = AdapterSpec(method=LORA, layer_scope=(8, 9, 10, 11), projection_set=("q", "v"))
        assert spec.scope_label(12) == "last4"
        assert spec.scope_label() == "8+9+10+11"
        assert AdapterSpec(method=LORA, layer_scope=(0, 1), projection_set=("o",)).scope_label(2) == "all"
        assert spec.projections_label() == "q+v"
        assert "," not in spec.spell(12)

    def test_closed_form_counts(self):
        dims = ModelDims(d_model=768, n_layers=15, base_params=10_000)
        # thirty adapted square matrices at rank 2: the reference total
        spec = AdapterSpec(method=LORA, rank=2, layer_scope=tuple(range(15)), projection_set=("q", "v"))
        assert count_trainable(spec, dims) == 92_160
        qr = AdapterSpec(method=QR_LORA, policy=RankPolicy.energy(0.5),
                         layer_scope=(11, 12, 13, 14), projection_set=("q",))
        assert count_trainable(qr, dims, selected_ranks=[150, 150, 150, 151]) == 601
        assert count_trainable(AdapterSpec(method=FULL_FT), dims) == 10_000

    def test_empty_scope_counts_zero(self):
        dims = ModelDims(d_model=8, n_layers=2)
        spec = AdapterSpec(method=LORA, rank=2, layer_scope=(), projection_set=("o",))
        assert count_trainable(spec, dims) == 0

    def test_qr_count_needs_per_matrix_ranks(self):
        dims = ModelDims(d_model=8, n_layers=2)
        qr = AdapterSpec(method=QR_LORA, policy=RankPolicy.energy(0.5), layer_scope=(0,), projection_set=("q", "v"))
        with pytest.raises(ValueError, match="selected rank"):
            count_trainable(qr, dims, selected_ranks=[3])

    def test_build_rejects_bad_hyperparameters(self):
        w = np.eye(4)
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            build_lora_adapter(w, 0, rng)
        with pytest.raises(ValueError):
            build_svd_lora_adapter(w, 2, 0, 2.0)
        with pytest.raises(ValueError):
            build_svd_lora_adapter(w, 2, 3, 2.0)
