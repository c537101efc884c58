import numpy as np
import pytest

from conftest import correlated_instance, plain_vq, random_spd
from vptq.codebook import Codebook, Role, TrainOptions
from vptq.errors import ConfigError, CorruptIndices, InvalidHessian, ShapeError
from vptq.hessian import HessianData, HessianAccumulator, finalize, identity_hessian, save_hessian
from vptq.quantizer import (
    Propagation,
    QuantConfig,
    delta_L,
    dequantize,
    downdate_inverse,
    propagate_error,
    proxy_loss,
    proxy_loss_decomposed,
    quantize_column,
    quantize_matrix,
    quantize_model,
    reshape_column,
    select_outlier_columns,
    unreshape_column,
)
from vptq.tensor_store import TensorF32, save_npy


def kkt_update(h, q, e):
    """Minimize 1/2 tr(dW H dW^T) s.t. dW e_q = e by solving each row's KKT system."""
    n = h.shape[0]
    kkt = np.zeros((n + 1, n + 1))
    kkt[:n, :n] = h
    kkt[:n, n] = kkt[n, :n] = np.eye(n)[q]
    rows = []
    for ei in e:
        rhs = np.zeros(n + 1)
        rhs[n] = ei
        rows.append(np.linalg.solve(kkt, rhs)[:n])
    return np.array(rows)


def half_trace(dw, h):
    return 0.5 * float(np.trace(dw @ h @ dw.T))


# -- reshape ----------------------------------------------------------------

def test_reshape_even():
    np.testing.assert_array_equal(reshape_column(np.array([1.0, 2, 3, 4]), 2), [[1, 2], [3, 4]])


def test_reshape_pads_with_zero():
    np.testing.assert_array_equal(reshape_column(np.array([1.0, 2, 3, 4, 5]), 2), [[1, 2], [3, 4], [5, 0]])


def test_reshape_round_trip(rng):
    col = rng.standard_normal(97)
    vecs = reshape_column(col, 8)
    assert vecs.shape == (13, 8)
    assert np.array_equal(np.concatenate(list(vecs))[:97], col)
    assert np.array_equal(unreshape_column(vecs, 97), col)


# -- quantize_column --------------------------------------------------------

def test_column_of_centroids_is_exact():
    cb = Codebook(np.array([[1.0, 2.0], [3.0, 4.0]]))
    work = np.array([[3.0], [4.0], [1.0], [2.0]])
    q_hat, idx, res = quantize_column(work, 0, cb)
    np.testing.assert_array_equal(q_hat, work[:, 0])
    assert idx.tolist() == [1, 0] and res is None


def test_single_centroid_codebook():
    work = np.array([[3.0], [4.0]])
    q_hat, _, _ = quantize_column(work, 0, Codebook(np.zeros((1, 2))))
    assert q_hat.tolist() == [0.0, 0.0]
    assert float(np.sum((q_hat - work[:, 0]) ** 2)) == 25.0


def test_residual_completes_value():
    work = np.array([[3.0], [4.0]])
    res_cb = Codebook(np.array([[0.0, 0.0], [3.0, 4.0]]), Role.RESIDUAL)
    q_hat, idx, ridx = quantize_column(work, 0, Codebook(np.zeros((1, 2))), res_cb)
    assert q_hat.tolist() == [3.0, 4.0]
    assert ridx.tolist() == [1]


def test_quantize_column_pads_and_strips():
    cb = Codebook(np.array([[0.0, 0.0], [5.0, 5.0]]))
    work = np.array([[4.0], [6.0], [9.0]])
    q_hat, idx, _ = quantize_column(work, 0, cb)
    assert q_hat.tolist() == [5.0, 5.0, 5.0]
    assert idx.tolist() == [1, 1]


# -- delta_L / propagation --------------------------------------------------

def test_delta_l_basic():
    assert delta_L([1.0, 2.0], [1.0, 2.0], 0.3) == 0.0
    assert delta_L([1.0, 1.0], [0.0, 0.0], 0.5) == 2.0
    with pytest.raises(InvalidHessian):
        delta_L([1.0], [0.0], 0.0)


@pytest.mark.parametrize("seed", range(10))
def test_delta_l_matches_kkt_oracle(seed):
    r = np.random.default_rng(seed)
    n, m, q = 6, 5, int(r.integers(0, 6))
    hd = HessianData.from_matrix(random_spd(r, n, ridge=0.1))
    work = r.standard_normal((m, n))
    q_hat = np.round(work[:, q])
    e = q_hat - work[:, q]
    dw_star = kkt_update(hd.H, q, e)
    assert delta_L(q_hat, work[:, q], hd.Hinv[q, q]) == pytest.approx(half_trace(dw_star, hd.H), rel=1e-9)
    before = work.copy()
    propagate_error(work, q, q_hat, hd, set(range(n)) - {q})
    np.testing.assert_allclose(work - before, dw_star, rtol=1e-8, atol=1e-10)


def test_identity_hessian_touches_only_q(rng):
    work = rng.standard_normal((4, 5))
    before = work.copy()
    propagate_error(work, 2, np.zeros(4), identity_hessian(5), {0, 1, 3, 4})
    changed = np.flatnonzero((work != before).any(axis=0))
    assert changed.tolist() == [2]


def test_constraint_exact_and_quantized_columns_untouched(rng):
    hd = HessianData.from_matrix(random_spd(rng, 5))
    work = rng.standard_normal((3, 5))
    before = work.copy()
    q_hat = np.array([0.25, -1.0, 2.0])
    propagate_error(work, 1, q_hat, hd, {2, 4})
    assert np.array_equal(work[:, 1], q_hat)
    assert np.array_equal(work[:, [0, 3]], before[:, [0, 3]])


def test_update_beats_random_feasible_alternatives(rng):
    hd = HessianData.from_matrix(random_spd(rng, 5))
    work = rng.standard_normal((4, 5))
    q = 3
    q_hat = work[:, q] + rng.standard_normal(4)
    before = work.copy()
    propagate_error(work, q, q_hat, hd, {0, 1, 2, 4})
    dw = work - before
    base = half_trace(dw, hd.H)
    for _ in range(1000):
        z = rng.standard_normal(dw.shape)
        z[:, q] = 0.0
        assert base <= half_trace(dw + z, hd.H)


def test_propagate_rejects_q_in_unquantized(rng):
    with pytest.raises(ValueError):
        propagate_error(np.zeros((2, 3)), 1, np.zeros(2), identity_hessian(3), {1, 2})


def test_downdate_gives_inverse_of_remaining_block(rng):
    h = random_spd(rng, 6)
    hinv = np.linalg.inv(h)
    downdate_inverse(hinv, 2)
    keep = [0, 1, 3, 4, 5]
    np.testing.assert_allclose(hinv[np.ix_(keep, keep)], np.linalg.inv(h[np.ix_(keep, keep)]), rtol=1e-9)
    assert not hinv[2].any() and not hinv[:, 2].any()


# -- outliers ---------------------------------------------------------------

def test_outlier_selection_bounds(rng):
    w = rng.standard_normal((4, 10))
    hd = identity_hessian(10)
    assert select_outlier_columns(w, hd, 0) == []
    assert select_outlier_columns(w, hd, 100) == list(range(10))


def test_outlier_selection_matches_full_sort(rng):
    w = rng.standard_normal((6, 10))
    hd = HessianData.from_matrix(random_spd(rng, 10))
    scores = [(hd.H[q, q] * sum(float(x) ** 2 for x in w[:, q]), q) for q in range(10)]
    expected = sorted(q for _, q in sorted(scores, key=lambda t: (-t[0], t[1]))[:2])
    assert select_outlier_columns(w, hd, 20) == expected


def test_outlier_ties_prefer_lower_index():
    w = np.ones((2, 6))
    assert select_outlier_columns(w, identity_hessian(6), 50) == [0, 1, 2]


def test_outlier_count_uses_exact_percent():
    w = np.ones((1, 1000))
    assert len(select_outlier_columns(w, identity_hessian(1000), 0.3)) == 3


# -- proxy loss -------------------------------------------------------------

def test_proxy_loss_zero_and_identity(rng):
    w = rng.standard_normal((5, 4))
    w_hat = w + rng.standard_normal((5, 4))
    assert proxy_loss(w, w, HessianData.from_matrix(random_spd(rng, 4))) == 0.0
    assert proxy_loss(w, w_hat, identity_hessian(4)) == pytest.approx(float(((w_hat - w) ** 2).sum()), rel=1e-12)


def test_decomposition_matches_loop_oracle(rng):
    w = rng.standard_normal((8, 8))
    w_hat = w + rng.standard_normal((8, 8))
    hd = HessianData.from_matrix(random_spd(rng, 8))
    dw = w_hat - w
    diag = sum(hd.H[i, i] * float(dw[:, i] @ dw[:, i]) for i in range(8))
    cross = sum(hd.H[i, j] * float(dw[:, i] @ dw[:, j]) for i in range(8) for j in range(8) if i != j)
    d, c = proxy_loss_decomposed(w, w_hat, hd)
    assert d == pytest.approx(diag, rel=1e-12)
    assert c == pytest.approx(cross, rel=1e-9, abs=1e-12)
    assert proxy_loss(w, w_hat, hd) == pytest.approx(diag + cross, rel=1e-9)


def test_proxy_loss_shape_error(rng):
    with pytest.raises(ShapeError):
        proxy_loss(np.zeros((2, 3)), np.zeros((2, 3)), identity_hessian(4))


# -- full pipeline ----------------------------------------------------------

def test_exact_codebook_reconstructs(rng):
    w = rng.standard_normal((4, 4)).astype(np.float32)
    hd = HessianData.from_matrix(random_spd(rng, 4))
    qm = quantize_matrix(w, hd, QuantConfig(v1=2, k1=8))
    assert np.array_equal(dequantize(qm).data, w)
    assert qm.stats.proxy_loss == 0.0


@pytest.mark.parametrize("seed", range(3))
def test_identity_hessian_is_plain_vq(seed):
    r = np.random.default_rng(seed)
    w = r.standard_normal((24, 16)).astype(np.float32)
    cfg = QuantConfig(v1=4, k1=16, kmeans=TrainOptions(seed=seed))
    qm = quantize_matrix(w, identity_hessian(16), cfg)
    assert np.array_equal(dequantize(qm).data, plain_vq(w, cfg))


@pytest.mark.parametrize("seed", range(5))
def test_proxy_loss_equals_twice_delta_l_sum(seed):
    w, hd = correlated_instance(seed, m=20, n=16)
    cfg = QuantConfig(v1=4, k1=8, outlier_percent=10, v0=2, k0=8, group_num=2, kmeans=TrainOptions(seed=seed))
    qm = quantize_matrix(w, hd, cfg)
    assert qm.stats.proxy_loss == pytest.approx(2 * qm.stats.sum_delta_L, rel=1e-9)
    assert qm.stats.proxy_loss == pytest.approx(proxy_loss(w, dequantize(qm), hd), rel=1e-12)


def test_stats_match_reconstruction(rng):
    w, hd = correlated_instance(7, m=18, n=12)
    qm = quantize_matrix(w, hd, QuantConfig(v1=4, k1=8, k2=4))
    dw = dequantize(qm).data.astype(np.float64) - w
    assert qm.stats.frobenius_mse == float(np.mean(dw * dw))
    assert qm.stats.max_abs_err == float(np.abs(dw).max())
    assert qm.residual_indices.shape == qm.main_indices.shape == (12, 5)


def test_outliers_and_bands_partition_columns():
    w, hd = correlated_instance(3, m=8, n=30)
    qm = quantize_matrix(w, hd, QuantConfig(v1=2, k1=4, outlier_percent=10, v0=2, k0=4, group_num=4))
    covered = list(qm.outlier_cols)
    for band in qm.bands:
        covered += qm.band_columns(band).tolist()
    assert sorted(covered) == list(range(30))
    assert len(covered) == 30
    sizes = [len(qm.band_columns(b)) for b in qm.bands]
    assert sizes == [6, 6, 6, 9]
    assert qm.outlier_indices.shape == (3, 4)
    assert {cb.role for cb in qm.codebooks} == {Role.MAIN, Role.OUTLIER}


def test_outliers_are_quantized_first(monkeypatch):
    w, hd = correlated_instance(4, m=8, n=10)
    seen = []
    import vptq.quantizer as qmod

    real = qmod.quantize_column

    def spy(work, q, cb, residual_cb=None):
        seen.append((q, cb.role))
        return real(work, q, cb, residual_cb)

    monkeypatch.setattr(qmod, "quantize_column", spy)
    qm = quantize_matrix(w, hd, QuantConfig(v1=2, k1=4, outlier_percent=20, v0=2, k0=4))
    assert [q for q, _ in seen[:2]] == list(qm.outlier_cols)
    assert all(role == Role.OUTLIER for _, role in seen[:2])
    assert [q for q, _ in seen[2:]] == qm.main_columns.tolist()


def test_descending_diag_order(monkeypatch):
    w, hd = correlated_instance(5, m=4, n=6)
    seen = []
    import vptq.quantizer as qmod

    real = qmod.quantize_column
    monkeypatch.setattr(qmod, "quantize_column", lambda work, q, cb, r=None: seen.append(q) or real(work, q, cb, r))
    quantize_matrix(w, hd, QuantConfig(v1=2, k1=4, column_order="descending_hessian_diag"))
    diag = np.diag(hd.H)
    assert seen == sorted(range(6), key=lambda q: (-diag[q], q))


@pytest.mark.parametrize("prop", list(Propagation))
def test_every_propagation_mode_runs(prop):
    w, hd = correlated_instance(1, m=8, n=8)
    qm = quantize_matrix(w, hd, QuantConfig(v1=2, k1=4, propagation=prop))
    assert np.isfinite(qm.stats.proxy_loss)


def test_propagation_none_equals_snap_to_codebook():
    w, hd = correlated_instance(2, m=8, n=8)
    qm = quantize_matrix(w, hd, QuantConfig(v1=2, k1=4, propagation="none"))
    cb = qm.codebook(Role.MAIN, 0)
    for j, q in enumerate(qm.main_columns):
        expect = [int(np.argmin(((cb.centroids - v) ** 2).sum(1))) for v in reshape_column(w[:, q], 2)]
        assert qm.main_indices[j].tolist() == expect


def test_rvq_never_increases_mse():
    for seed in range(10):
        w, hd = correlated_instance(seed, m=16, n=16)
        base = QuantConfig(v1=4, k1=8, kmeans=TrainOptions(seed=seed))
        with_res = QuantConfig(v1=4, k1=8, k2=8, kmeans=TrainOptions(seed=seed))
        a = quantize_matrix(w, hd, base).stats.frobenius_mse
        b = quantize_matrix(w, hd, with_res).stats.frobenius_mse
        assert b <= a


def test_shape_and_group_errors(rng):
    w = rng.standard_normal((4, 4)).astype(np.float32)
    with pytest.raises(ShapeError):
        quantize_matrix(w, identity_hessian(5), QuantConfig(v1=2, k1=4))
    with pytest.raises(ConfigError):
        quantize_matrix(w, identity_hessian(4), QuantConfig(v1=2, k1=4, group_num=5))


def test_dequantize_rejects_bad_indices():
    w, hd = correlated_instance(0, m=4, n=4)
    qm = quantize_matrix(w, hd, QuantConfig(v1=2, k1=4))
    qm.main_indices[0, 0] = 4
    with pytest.raises(CorruptIndices):
        dequantize(qm)


def test_single_centroid_dequantize_tiles():
    w = np.arange(12, dtype=np.float32).reshape(4, 3)
    qm = quantize_matrix(w, identity_hessian(3), QuantConfig(v1=2, k1=2, k2=1))
    out = dequantize(qm).data
    main = qm.codebook(Role.MAIN, 0).centroids
    res = qm.codebook(Role.RESIDUAL, 0).centroids[0]
    for j in range(3):
        col = np.concatenate([main[i] + res for i in qm.main_indices[j]])
        assert np.array_equal(out[:, j], col)


# -- config -----------------------------------------------------------------

def test_config_reports_all_problems():
    with pytest.raises(ConfigError) as info:
        QuantConfig.from_dict({"v1": 0, "k1": 3, "outlier_percent": 5, "k0": 6, "bogus": 1})
    text = " ".join(info.value.problems)
    for needle in ("v1", "k1", "v0", "k0", "bogus"):
        assert needle in text
    assert len(info.value.problems) >= 5


def test_config_minus_one_disables_residual():
    cfg = QuantConfig.from_dict({"v1": 4, "k1": 16, "k2": -1})
    assert cfg.k2 == 0


def test_config_round_trip():
    cfg = QuantConfig(v1=6, k1=4096, k2=0, outlier_percent=1, v0=4, k0=4096, kmeans=TrainOptions(seed=9))
    assert QuantConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


# -- per-model --------------------------------------------------------------

def _mlp_fixture(tmp_path, seed=0, dims=(16, 24, 24, 8), samples=64):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((dims[0], samples))
    manifest = []
    for i, (din, dout) in enumerate(zip(dims, dims[1:])):
        w = (rng.standard_normal((dout, din)) / np.sqrt(din)).astype(np.float32)
        hd = finalize(HessianAccumulator(din).update(x), 0.01)
        save_npy(TensorF32.from_array(w), tmp_path / f"w{i}.npy")
        save_hessian(hd, tmp_path / f"h{i}.npy")
        manifest.append((f"layer{i}", str(tmp_path / f"w{i}.npy"), str(tmp_path / f"h{i}.npy")))
        x = np.maximum(w.astype(np.float64) @ x, 0.0)
    return manifest


def test_model_single_entry_matches_matrix(tmp_path):
    from vptq.hessian import load_hessian
    from vptq.tensor_store import load_npy

    manifest = _mlp_fixture(tmp_path)[:1]
    cfg = QuantConfig(v1=2, k1=8)
    [res] = quantize_model(manifest, cfg, workers=1)
    direct = quantize_matrix(load_npy(manifest[0][1]), load_hessian(manifest[0][2]), cfg)
    assert res.ok and res.quantized == direct


def test_model_worker_count_irrelevant(tmp_path):
    manifest = _mlp_fixture(tmp_path)
    cfg = QuantConfig(v1=2, k1=8, k2=4)
    one = quantize_model(manifest, cfg, workers=1)
    four = quantize_model(manifest, cfg, workers=4)
    assert [r.name for r in four] == ["layer0", "layer1", "layer2"]
    assert all(a.quantized == b.quantized for a, b in zip(one, four))


def test_model_failure_is_isolated(tmp_path):
    manifest = _mlp_fixture(tmp_path)
    manifest.insert(1, ("broken", str(tmp_path / "missing.npy"), manifest[0][2]))
    results = quantize_model(manifest, QuantConfig(v1=2, k1=4), workers=2)
    assert [r.ok for r in results] == [True, False, True, True]
    assert results[1].name == "broken"


def test_model_loss_monotone_in_k1(tmp_path):
    manifest = _mlp_fixture(tmp_path)
    losses = {k: [r.quantized.stats.proxy_loss for r in quantize_model(manifest, QuantConfig(v1=2, k1=k))]
              for k in (4, 16, 64)}
    for layer in range(3):
        assert losses[64][layer] <= losses[16][layer] <= losses[4][layer]
