import numpy as np
import pytest
from scipy.linalg import subspace_angles

from brainexplore.core import project_coefficients
from brainexplore.decompose import (FitConfig, SAEConfig, active_fraction, fastica, fit_ica, fit_method, fit_nmf,
                                    fit_pca, fit_sae, fit_voxels, nmf_multiplicative, variance_matched_K)
from brainexplore.decompose.pca import centered_svd, explained_variance_ratio
from brainexplore.decompose.sae import SAETrainingError, sae_reconstruct


# ---------------------------------------------------------------- voxels

def test_voxel_basis_pairs():
    d = fit_voxels(3)
    assert d.n_components == 6
    np.testing.assert_array_equal(d.components[0], [1, 0, 0])
    np.testing.assert_array_equal(d.components[1], [-1, 0, 0])
    x = np.array([[2.0, -1.0, 0.5]])
    c = project_coefficients(d, x)
    np.testing.assert_array_equal(c, [[2, -2, -1, 1, 0.5, -0.5]])
    assert np.sum(c <= 0) == c.size // 2


# ---------------------------------------------------------------- pca

def test_pca_cross_recovers_axes():
    x = np.array([[1.0, 0], [-1, 0], [0, 1], [0, -1]])
    d = fit_pca(x, [1.0])[0]
    assert d.info["explained_variance_ratio"] == pytest.approx([0.5, 0.5])
    base = d.components[0::2]
    np.testing.assert_allclose(np.abs(base @ base.T), np.eye(2), atol=1e-12)
    np.testing.assert_allclose(np.sort(np.abs(base).max(axis=1)), [1, 1], atol=1e-12)


def test_pca_rank_one_reconstructs_exactly(rng):
    x = np.outer(rng.standard_normal(30), rng.standard_normal(7))
    d = fit_pca(x, [0.98])[0]
    assert d.hyperparams["k"] == 1
    c = project_coefficients(d, x)[:, 0::2]
    recon = c @ d.components[0::2] + d.state["mean"]
    assert np.max(np.abs(recon - x)) < 1e-9


def test_pca_variance_curve_matches_covariance_eigenvalues(rng):
    x = rng.standard_normal((200, 20))
    _, _, s, _ = centered_svd(x)
    eig = np.sort(np.linalg.eigvalsh(np.cov(x, rowvar=False)))[::-1]
    np.testing.assert_allclose(explained_variance_ratio(s), eig / eig.sum(), atol=1e-8)


def test_pca_orthonormal_and_reconstruction_monotone(rng):
    x = rng.standard_normal((120, 15)) @ rng.standard_normal((15, 15))
    decomps = fit_pca(x, [0.5, 0.7, 0.9, 0.99])
    errs = []
    for d in decomps:
        base = d.components[0::2]
        np.testing.assert_allclose(base @ base.T, np.eye(len(base)), atol=1e-8)
        c = project_coefficients(d, x)[:, 0::2]
        errs.append(np.linalg.norm(c @ base + d.state["mean"] - x))
    assert all(b <= a + 1e-9 for a, b in zip(errs, errs[1:]))


def test_pca_rejects_non_finite():
    with pytest.raises(np.linalg.LinAlgError):
        fit_pca(np.array([[1.0, np.nan], [0.0, 1.0]]), [0.9])


def test_variance_matched_k_examples(rng):
    x3 = rng.standard_normal((100, 3)) @ rng.standard_normal((3, 12))
    assert variance_matched_K(x3, [0.9, 0.95, 0.98]) == [3, 3, 3]
    assert variance_matched_K(x3, [1.0]) == [3]
    iso = rng.standard_normal((1000, 10))
    assert variance_matched_K(iso, [0.98])[0] in (9, 10)


def test_variance_matched_k_against_eigenvalue_oracle(rng):
    x = rng.standard_normal((300, 12)) * np.linspace(0.2, 3, 12)
    eig = np.sort(np.linalg.eigvalsh(np.cov(x, rowvar=False)))[::-1]
    cum = np.cumsum(eig) / eig.sum()
    for t in (0.5, 0.8, 0.9, 0.95):
        assert variance_matched_K(x, [t])[0] == int(np.argmax(cum >= t)) + 1


# ---------------------------------------------------------------- nmf

def test_nmf_recovers_planted_factorization(rng):
    h = rng.random((200, 4))
    w = rng.random((4, 30))
    res = nmf_multiplicative(h @ w, 4, seed=0, max_iter=2000, tol=1e-8)
    assert res.relative_error < 1e-2
    assert res.components.min() >= 0 and res.coefficients.min() >= 0


def test_nmf_rank_one_component_direction(rng):
    a, b = rng.random(50), rng.random(9)
    d = fit_nmf(np.outer(a, b), 1)
    cos = d.components[0] @ b / np.linalg.norm(b)
    assert cos > 0.999


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_nmf_objective_non_increasing_and_nonnegative(rng, seed):
    x = np.clip(rng.standard_normal((80, 20)), 0, None)
    res = nmf_multiplicative(x, 5, seed=seed)
    assert all(b <= a + 1e-10 for a, b in zip(res.objective_trace, res.objective_trace[1:]))
    d = fit_nmf(x, 5, seed=seed)
    assert d.components.min() >= 0.0
    np.testing.assert_allclose(np.linalg.norm(d.components, axis=1), 1.0)


def test_nmf_all_negative_input_is_an_error():
    with pytest.raises(ValueError, match="all zero"):
        fit_nmf(-np.ones((5, 3)), 1)


# ---------------------------------------------------------------- ica

def _two_uniform_sources(seed, n=5000):
    rng = np.random.default_rng(seed)
    s = rng.uniform(-1, 1, size=(n, 2))
    a = rng.standard_normal((2, 2))
    return s, s @ a


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ica_recovers_uniform_sources(seed):
    s, x = _two_uniform_sources(seed)
    d = fit_ica(x, 2, seed=seed)
    est = project_coefficients(d, x)[:, 0::2]
    corr = np.abs(np.corrcoef(est.T, s.T)[:2, 2:])
    assert np.all(corr.max(axis=1) > 0.99)
    assert d.info["converged"]


def test_ica_single_source_collinear(rng):
    src = rng.laplace(size=2000)
    x = np.outer(src, [3.0, -1.0, 2.0])
    d = fit_ica(x, 1)
    c = project_coefficients(d, x)[:, 0]
    assert abs(np.corrcoef(c, src)[0, 1]) > 0.999999


def test_ica_seeds_share_subspace(rng):
    x = rng.laplace(size=(3000, 3)) @ rng.standard_normal((3, 10)) + 0.01 * rng.standard_normal((3000, 10))
    a = fit_ica(x, 3, seed=0).components[0::2]
    b = fit_ica(x, 3, seed=1).components[0::2]
    assert np.max(subspace_angles(a.T, b.T)) < 1e-2


# ---------------------------------------------------------------- sae

def test_sae_reconstructs_low_rank_data_without_sparsity(rng):
    x = rng.standard_normal((4000, 4)) @ rng.standard_normal((4, 16)) / 2
    cfg = SAEConfig(expansion_factor=1, sparsity_coeff=0, epochs=30)
    d = fit_sae(x, None, cfg, seed=0)
    codes = project_coefficients(d, x)
    mse = np.mean((sae_reconstruct(d, codes) - x) ** 2)
    assert mse < 0.05 * x.var()


def test_sae_sparsity_reduces_active_codes(rng):
    x = rng.standard_normal((2000, 4)) @ rng.standard_normal((4, 12))
    fracs = []
    for lam in (0.0, 4.0):
        d = fit_sae(x, None, SAEConfig(expansion_factor=2, sparsity_coeff=lam, epochs=5), seed=0)
        fracs.append(active_fraction(project_coefficients(d, x)))
    assert fracs[1] < fracs[0]


def test_sae_heldout_loss_decreases_and_decoder_normalized(rng):
    xm = rng.standard_normal((1500, 10))
    xp = rng.standard_normal((3000, 10))
    d = fit_sae(xm, xp, SAEConfig(expansion_factor=2, epochs=4), seed=1)
    assert d.info["heldout_loss"][-1] < d.info["heldout_loss"][0]
    assert d.info["dual_encoder"] and d.provenance == ("measured", "predicted")
    np.testing.assert_allclose(np.linalg.norm(d.components, axis=1), 1.0, atol=1e-12)
    assert d.n_components == 20


def test_sae_is_deterministic(rng):
    x = rng.standard_normal((600, 6))
    cfg = SAEConfig(expansion_factor=1, epochs=2)
    a = fit_sae(x, None, cfg, seed=3)
    b = fit_sae(x, None, cfg, seed=3)
    assert a.components.tobytes() == b.components.tobytes()


def test_sae_rejects_empty_measured_and_diverging_training():
    with pytest.raises(ValueError):
        fit_sae(np.zeros((0, 3)))
    x = np.full((100, 3), 1e30)
    with pytest.raises(SAETrainingError, match="non-finite"):
        fit_sae(x, None, SAEConfig(epochs=3, batch_size=32))


# ---------------------------------------------------------------- fit_method

def test_fit_method_grid_and_normalization(rng):
    xm = rng.standard_normal((300, 8)) * 5 + 2
    xp = rng.standard_normal((600, 8)) * 5 + 2
    out = fit_method(FitConfig("ica", variance_thresholds=(0.5, 0.9), seeds=(0, 1)), xm, xp, roi="r")
    assert len(out) == 4
    assert len({d.fingerprint for d in out}) == 4
    for d in out:
        assert d.normalization is not None and d.provenance == ("measured", "predicted")
        np.testing.assert_allclose(d.normalization.mean, xm.mean(axis=0))
    raw = fit_method(FitConfig("pca", normalize_input="none", train_pools=("measured",)), xm, xp)
    assert all(d.normalization is None and d.provenance == ("measured",) for d in raw)


def test_fit_method_deterministic(rng):
    x = rng.standard_normal((200, 6))
    for method in ("pca", "nmf", "ica"):
        a = fit_method(FitConfig(method, variance_thresholds=(0.9,)), x)[0]
        b = fit_method(FitConfig(method, variance_thresholds=(0.9,)), x)[0]
        assert a.components.tobytes() == b.components.tobytes()


def test_fit_config_validation():
    with pytest.raises(ValueError):
        FitConfig("kmeans")
    with pytest.raises(ValueError):
        FitConfig("pca", variance_thresholds=(1.2,))
    with pytest.raises(ValueError):
        FitConfig("pca", normalize_input="minmax")
