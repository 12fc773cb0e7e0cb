import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import BSpline

from deformctl.bspline import (
    BSplinePatch,
    FitError,
    PatchFitter,
    basis_matrix,
    clamped_knots,
    evaluate,
    evaluate_normal,
    fit_patch,
    load_patch,
    make_sample_set,
    parameterize_cloud,
    sample_grid,
    save_patch,
)
from deformctl.geometry import SpatialIndex, grid_mesh


def random_patch(seed=0, cu=6, cv=7):
    rng = np.random.default_rng(seed)
    u, v = np.meshgrid(np.linspace(0, 100, cu), np.linspace(0, 150, cv), indexing="ij")
    z = rng.normal(scale=10.0, size=u.shape)
    return BSplinePatch(np.stack([u, v, z], axis=-1))


@settings(max_examples=200, deadline=None)
@given(st.integers(4, 20), st.lists(st.floats(0, 1), min_size=1, max_size=30))
def test_partition_of_unity(n_ctrl, ts):
    B = basis_matrix(clamped_knots(n_ctrl), np.array(ts))
    assert np.max(np.abs(B.sum(axis=1) - 1.0)) < 1e-10
    assert B.min() >= -1e-15


@pytest.mark.parametrize("n_ctrl", [4, 5, 9, 14])
@pytest.mark.parametrize("deriv", [0, 1])
def test_basis_matches_scipy(n_ctrl, deriv):
    knots = clamped_knots(n_ctrl)
    t = np.linspace(0, 1, 57)
    ours = basis_matrix(knots, t, deriv=deriv)
    for i in range(n_ctrl):
        c = np.zeros(n_ctrl)
        c[i] = 1.0
        spl = BSpline(knots, c, 3, extrapolate=False)
        ref = spl.derivative(deriv)(t) if deriv else spl(t)
        np.testing.assert_allclose(ours[:, i], ref, atol=1e-12)


def test_too_few_control_points():
    with pytest.raises(ValueError):
        clamped_knots(3)


def test_corner_interpolation_is_exact():
    patch = random_patch(1)
    cp = patch.control_points
    for (u, v), want in [((0, 0), cp[0, 0]), ((1, 0), cp[-1, 0]), ((0, 1), cp[0, -1]), ((1, 1), cp[-1, -1])]:
        assert np.array_equal(evaluate(patch, u, v), want)


def test_partials_match_finite_differences():
    patch = random_patch(2)
    rng = np.random.default_rng(5)
    uv = rng.uniform(0.05, 0.95, size=(40, 2))
    su, sv = patch.partials(uv[:, 0], uv[:, 1])
    h = 1e-6
    fu = (patch.points(uv[:, 0] + h, uv[:, 1]) - patch.points(uv[:, 0] - h, uv[:, 1])) / (2 * h)
    fv = (patch.points(uv[:, 0], uv[:, 1] + h) - patch.points(uv[:, 0], uv[:, 1] - h)) / (2 * h)
    assert np.max(np.linalg.norm(fu - su, axis=1) / np.linalg.norm(su, axis=1)) < 1e-6
    assert np.max(np.linalg.norm(fv - sv, axis=1) / np.linalg.norm(sv, axis=1)) < 1e-6


def test_normals_are_unit_and_oriented():
    patch = random_patch(3)
    uv = sample_grid(9, 11)
    n = patch.normals(uv[:, 0], uv[:, 1])
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0)
    su, sv = patch.partials(uv[:, 0], uv[:, 1])
    assert np.max(np.abs(np.einsum("ij,ij->i", n, su))) < 1e-9 * np.max(np.linalg.norm(su, axis=1))
    assert evaluate_normal(patch, 0.5, 0.5)[2] > 0
    np.testing.assert_allclose(patch.flipped().normals(uv[:, 0], uv[:, 1]), -n)


def test_singular_normal_is_reported():
    cp = np.zeros((4, 4, 3))
    cp[..., 0] = np.linspace(0, 1, 4)[:, None]
    with pytest.raises(FitError, match="singular normal"):
        BSplinePatch(cp)


def test_uv_outside_domain():
    with pytest.raises(ValueError):
        random_patch().points([1.2], [0.3])


def test_fit_reproduces_a_spline_surface_exactly():
    truth = random_patch(4, 8, 8)
    uv = sample_grid(30, 30)
    cloud = truth.points(uv[:, 0], uv[:, 1])
    fitted = fit_patch(cloud, uv, 8, 8, regularization=0.0)
    np.testing.assert_allclose(fitted.control_points, truth.control_points, atol=1e-8)
    assert fitted.fit_rms < 1e-9


def test_regularised_fit_smooths_noise():
    rng = np.random.default_rng(0)
    uv = sample_grid(40, 40)
    clean = np.column_stack([uv[:, 0] * 100, uv[:, 1] * 100, 5 * np.sin(3 * uv[:, 0]) + 2 * uv[:, 1] ** 2])
    noisy = clean + rng.normal(scale=0.5, size=clean.shape)
    patch = PatchFitter(uv, 10, 10, 1e-4).fit(noisy)
    err = np.linalg.norm(patch.points(uv[:, 0], uv[:, 1]) - clean, axis=1)
    assert np.sqrt(np.mean(err ** 2)) < 0.5  # better than the noise itself
    assert 0.4 < patch.fit_rms < 1.0


def test_underdetermined_fit():
    with pytest.raises(FitError, match="underdetermined fit"):
        PatchFitter(sample_grid(5, 5), 14, 14)


def test_parameterization_from_pca():
    rng = np.random.default_rng(2)
    pts = np.column_stack([rng.uniform(0, 300, 500), rng.uniform(0, 450, 500), rng.normal(scale=2, size=500)])
    uv = parameterize_cloud(pts)
    assert uv.min() == 0.0 and uv.max() == 1.0
    # longest extent (y) becomes u, oriented with increasing y
    assert np.corrcoef(uv[:, 0], pts[:, 1])[0, 1] > 0.99


def test_parameterization_degenerate():
    pts = np.column_stack([np.linspace(0, 1, 40), np.zeros(40), np.zeros(40)])
    with pytest.raises(FitError, match="degenerate parameterization"):
        parameterize_cloud(pts)
    with pytest.raises(FitError):
        parameterize_cloud(np.zeros((5, 3)))


def test_samples_are_snapped_to_raw_mesh():
    x, y = np.meshgrid(np.linspace(0, 300, 30), np.linspace(0, 450, 40))
    z = 20 * np.sin(x / 80.0) + 0.001 * x * y
    mesh = grid_mesh(np.stack([x, y, z], axis=-1))
    uv = np.column_stack([(x / 300).ravel(), (y / 450).ravel()])
    patch = fit_patch(mesh.vertices, uv, 14, 14)
    samples = make_sample_set(patch, mesh, 13, 25)
    assert len(samples) == 325 and samples.shape == (13, 25)
    assert np.max(SpatialIndex(mesh).query(samples.points).distances) < 1e-9


def test_patch_file_round_trip(tmp_path):
    patch = random_patch(6)
    save_patch(patch, tmp_path / "p.txt")
    back = load_patch(tmp_path / "p.txt")
    assert np.array_equal(back.control_points, patch.control_points)
    (tmp_path / "bad.txt").write_text("nurbs 3 3\n")
    with pytest.raises(ValueError):
        load_patch(tmp_path / "bad.txt")
