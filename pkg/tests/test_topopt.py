"""Tests for filtering, stress aggregation, sensitivities and the TO loop.

Finite differences are the oracle for both sensitivity paths; random density
fields are drawn from [0.3, 0.95] so central steps never cross the mass
penalization branch at x = 0.1.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sandopt import fem2d, topopt
from sandopt.fem2d import BCSpec, MaterialModel, build_mesh
from sandopt.topopt import (
    DensityField,
    StaleStateError,
    TopOptConfig,
    apply_filter,
    frequency_objective,
    frequency_sensitivity,
    make_filter,
    pnorm_stress,
    run_topopt,
    simp_modulus,
    stress_sensitivity,
    volume_constraint,
    von_mises,
)


@pytest.fixture(scope="module")
def steel():
    return MaterialModel()


@pytest.fixture(scope="module")
def probe_mesh():
    return build_mesh(0.5, 0.15, 0.025, BCSpec(pressure=50e3))


def _static_state(mesh, x, mat):
    em = fem2d.element_matrices(mat, mesh.element_size, mesh.thickness)
    K = fem2d.assemble(mesh, x, mat, "stiffness", matrices=em)
    factor = fem2d.factorize(K)
    F = fem2d.load_vector(mesh)
    u = fem2d.expand_vector(mesh, factor.solve(F))
    return em, factor, F, u


def _sigma_pn(mesh, x, mat, p=8.0, q=1.5):
    _, _, _, u = _static_state(mesh, x, mat)
    s = fem2d.element_stresses(mesh, u, mat)
    return pnorm_stress(von_mises(s[:, 0], s[:, 1], s[:, 2]), x, p=p, q=q).sigma_pn


class TestFilter:
    def test_rows_sum_to_one(self, probe_mesh):
        spec = make_filter(probe_mesh, 3.0)
        rowsum = np.asarray(spec.weights.sum(axis=1)).ravel()
        assert rowsum == pytest.approx(np.ones(probe_mesh.n_elements), abs=1e-12)

    def test_uniform_field_unchanged(self, probe_mesh):
        spec = make_filter(probe_mesh, 3.0)
        c = 0.37 * np.ones(probe_mesh.n_elements)
        assert apply_filter(c, spec) == pytest.approx(c, abs=1e-12)

    def test_radius_one_is_identity(self, probe_mesh):
        spec = make_filter(probe_mesh, 1.0)
        rng = np.random.default_rng(0)
        v = rng.uniform(0, 1, probe_mesh.n_elements)
        assert apply_filter(v, spec) == pytest.approx(v, abs=0.0)

    def test_spike_spreads_within_radius(self):
        mesh = build_mesh(0.15, 0.15, 0.01, BCSpec())
        spec = make_filter(mesh, 3.0)
        v = np.zeros(mesh.n_elements)
        center = (mesh.nx // 2) * mesh.ny + mesh.ny // 2
        v[center] = 1.0
        out = apply_filter(v, spec)
        d = np.linalg.norm(
            mesh.element_centroids - mesh.element_centroids[center], axis=1
        ) / mesh.element_size
        assert (out[d >= 3.0] == 0.0).all()
        assert (out[d < 2.99] > 0.0).all()

    def test_weights_zero_beyond_radius(self, probe_mesh):
        spec = make_filter(probe_mesh, 2.2)
        W = spec.weights.tocoo()
        c = probe_mesh.element_centroids
        d = np.linalg.norm(c[W.row] - c[W.col], axis=1) / probe_mesh.element_size
        assert (d < 2.2).all()

    def test_sensitivity_mode_is_transpose(self, probe_mesh):
        spec = make_filter(probe_mesh, 2.0)
        rng = np.random.default_rng(1)
        a = rng.standard_normal(probe_mesh.n_elements)
        b = rng.standard_normal(probe_mesh.n_elements)
        # <W a, b> == <a, W^T b>
        lhs = np.dot(apply_filter(a, spec), b)
        rhs = np.dot(a, apply_filter(b, spec, "sensitivities"))
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_filtered_densities_stay_in_range(self, probe_mesh):
        spec = make_filter(probe_mesh, 3.0)
        rng = np.random.default_rng(2)
        v = rng.uniform(1e-3, 1.0, probe_mesh.n_elements)
        out = apply_filter(v, spec)
        assert (out > 0).all() and (out <= 1.0 + 1e-12).all()


class TestSimpModulus:
    def test_values(self):
        mat = MaterialModel(E0=1.0, Emin=1e-9, pl=3.0)
        assert simp_modulus(1.0, mat) == pytest.approx(1.0)
        assert simp_modulus(0.5, mat) == pytest.approx(0.125, rel=1e-6)

    def test_rejects_out_of_range(self, steel):
        with pytest.raises(ValueError):
            simp_modulus(0.0, steel)
        with pytest.raises(ValueError):
            simp_modulus(1.1, steel)

    def test_strictly_increasing(self, steel):
        x = np.linspace(0.01, 1.0, 50)
        e = simp_modulus(x, steel)
        assert (np.diff(e) > 0).all()


class TestVonMises:
    def test_uniaxial(self):
        assert von_mises(120e6, 0.0, 0.0) == pytest.approx(120e6)

    def test_pure_shear(self):
        assert von_mises(0.0, 0.0, 50e6) == pytest.approx(np.sqrt(3) * 50e6)

    def test_equibiaxial(self):
        assert von_mises(80e6, 80e6, 0.0) == pytest.approx(80e6)

    @given(
        sxx=st.floats(-1e9, 1e9),
        syy=st.floats(-1e9, 1e9),
        sxy=st.floats(-1e9, 1e9),
    )
    @settings(max_examples=50)
    def test_non_negative_and_symmetric(self, sxx, syy, sxy):
        v = von_mises(sxx, syy, sxy)
        assert v >= 0.0
        assert v == pytest.approx(von_mises(syy, sxx, sxy), rel=1e-12, abs=1e-6)


class TestPnormStress:
    def test_single_element(self):
        for p in (2.0, 8.0, 32.0):
            agg = pnorm_stress(np.array([100e6]), np.array([1.0]), p=p)
            assert agg.sigma_pn == pytest.approx(100e6)

    def test_two_element_euclidean(self):
        agg = pnorm_stress(np.array([3e6, 4e6]), np.ones(2), p=2.0, q=1.5)
        assert agg.sigma_pn == pytest.approx(5e6)

    def test_relaxation_factor(self):
        agg = pnorm_stress(np.array([80e6]), np.array([0.25]), p=8.0, q=1.5)
        assert agg.sigma_hat[0] == pytest.approx(0.25**1.5 * 80e6)
        assert agg.sigma_hat[0] == pytest.approx(10e6)

    def test_rejects_small_p(self):
        with pytest.raises(ValueError):
            pnorm_stress(np.ones(3), np.ones(3), p=1.5)

    @given(seed=st.integers(0, 2**31), p=st.sampled_from([2.0, 4.0, 8.0, 16.0, 64.0]))
    @settings(max_examples=60, deadline=None)
    def test_bracketing(self, seed, p):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 400))
        svm = rng.lognormal(16.0, 2.0, n)
        x = rng.uniform(1e-3, 1.0, n)
        agg = pnorm_stress(svm, x, p=p)
        peak = agg.sigma_hat.max()
        assert agg.sigma_pn >= peak * (1 - 1e-12)
        assert agg.sigma_pn <= n ** (1.0 / p) * peak * (1 + 1e-12)


class TestStressSensitivity:
    def test_matches_central_differences(self, steel):
        mesh = build_mesh(0.5, 0.2, 0.025, BCSpec(pressure=50e3))
        rng = np.random.default_rng(11)
        x = rng.uniform(0.3, 0.95, mesh.n_elements)
        em, factor, F, u = _static_state(mesh, x, steel)
        s = fem2d.element_stresses(mesh, u, steel)
        agg = pnorm_stress(von_mises(s[:, 0], s[:, 1], s[:, 2]), x)
        grad = stress_sensitivity(mesh, x, u, agg, steel, factor, load=F, matrices=em)
        h = 1e-6
        for e in rng.choice(mesh.n_elements, 5, replace=False):
            xp, xm = x.copy(), x.copy()
            xp[e] += h
            xm[e] -= h
            fd = (_sigma_pn(mesh, xp, steel) - _sigma_pn(mesh, xm, steel)) / (2 * h)
            assert abs(grad[e] - fd) <= 1e-3 * abs(fd)

    def test_symmetric_gradient_for_solid_field(self, steel):
        mesh = build_mesh(0.4, 0.1, 0.02, BCSpec(pressure=50e3))
        x = np.ones(mesh.n_elements)
        em, factor, F, u = _static_state(mesh, x, steel)
        s = fem2d.element_stresses(mesh, u, steel)
        agg = pnorm_stress(von_mises(s[:, 0], s[:, 1], s[:, 2]), x)
        grad = stress_sensitivity(mesh, x, u, agg, steel, factor, load=F, matrices=em)
        g = grad.reshape(mesh.nx, mesh.ny)
        assert np.abs(g - g[::-1]).max() <= 1e-8 * np.abs(g).max()

    def test_large_p_tracks_peak_location(self, steel):
        mesh = build_mesh(0.5, 0.2, 0.025, BCSpec(pressure=50e3))
        rng = np.random.default_rng(3)
        x = rng.uniform(0.4, 1.0, mesh.n_elements)
        em, factor, F, u = _static_state(mesh, x, steel)
        s = fem2d.element_stresses(mesh, u, steel)
        agg = pnorm_stress(von_mises(s[:, 0], s[:, 1], s[:, 2]), x, p=64.0)
        grad = stress_sensitivity(mesh, x, u, agg, steel, factor, load=F, matrices=em)
        assert np.argmax(np.abs(grad)) == np.argmax(agg.sigma_hat)

    def test_stale_state_rejected(self, steel):
        mesh = build_mesh(0.2, 0.1, 0.025, BCSpec(pressure=50e3))
        x = np.full(mesh.n_elements, 0.6)
        em, factor, F, u = _static_state(mesh, x, steel)
        s = fem2d.element_stresses(mesh, u, steel)
        agg = pnorm_stress(von_mises(s[:, 0], s[:, 1], s[:, 2]), x)
        with pytest.raises(StaleStateError):
            stress_sensitivity(mesh, x, 2.0 * u, agg, steel, factor, load=F, matrices=em)


class TestFrequencyObjective:
    def _eig(self, lam):
        lam = np.asarray(lam, dtype=float)
        return fem2d.EigenSolution(
            eigenvalues=lam,
            eigenvectors=np.zeros((1, lam.size)),
            frequencies=np.sqrt(lam) / (2 * np.pi),
        )

    def test_first_mode_only(self):
        assert frequency_objective(self._eig([4.0, 9.0, 25.0]), [1, 0, 0]) == 4.0

    def test_weighted_sum(self):
        lam_bar = frequency_objective(self._eig([4.0, 9.0, 25.0]), [0.5, 0.3, 0.2])
        assert lam_bar == pytest.approx(9.7)

    def test_equal_eigenvalues(self):
        assert frequency_objective(self._eig([7.0, 7.0, 7.0]), [0.2, 0.5, 0.3]) == pytest.approx(7.0)

    def test_too_few_modes(self):
        with pytest.raises(ValueError):
            frequency_objective(self._eig([4.0]), [0.7, 0.3])

    def test_weights_must_normalize(self):
        with pytest.raises(ValueError):
            frequency_objective(self._eig([4.0, 9.0]), [0.7, 0.7])


class TestFrequencySensitivity:
    def _lam_bar(self, mesh, x, mat, w, scheme="dual"):
        em = fem2d.element_matrices(mat, mesh.element_size, mesh.thickness)
        K = fem2d.assemble(mesh, x, mat, "stiffness", matrices=em)
        M = fem2d.assemble(mesh, x, mat, "mass", scheme, matrices=em)
        return frequency_objective(fem2d.solve_eigen(K, M, len(w)), w)

    def test_matches_central_differences(self, steel):
        mesh = build_mesh(0.5, 0.2, 0.025, BCSpec())
        rng = np.random.default_rng(13)
        x = rng.uniform(0.3, 0.95, mesh.n_elements)
        w = np.array([0.7, 0.2, 0.1])
        em = fem2d.element_matrices(steel, mesh.element_size, mesh.thickness)
        K = fem2d.assemble(mesh, x, steel, "stiffness", matrices=em)
        M = fem2d.assemble(mesh, x, steel, "mass", matrices=em)
        eig = fem2d.solve_eigen(K, M, 3)
        grad = frequency_sensitivity(mesh, x, eig, steel, w, matrices=em)
        h = 1e-6
        for e in rng.choice(mesh.n_elements, 5, replace=False):
            xp, xm = x.copy(), x.copy()
            xp[e] += h
            xm[e] -= h
            fd = (self._lam_bar(mesh, xp, steel, w) - self._lam_bar(mesh, xm, steel, w)) / (2 * h)
            assert abs(grad[e] - fd) <= 1e-3 * abs(fd)

    def test_mass_derivative_branch_above_threshold(self, steel):
        assert fem2d.mass_derivative(0.5, steel) == pytest.approx(1.0)
        assert fem2d.mass_derivative(0.05, steel) == pytest.approx(
            steel.ql * 0.05 ** (steel.ql - 1)
        )

    def test_uniform_scaling_matches_closed_form(self, steel):
        # two-element toy mesh; uniform density scaling keeps mode shapes and
        # scales lambda by e(c) / (E0 c), a closed-form Rayleigh quotient
        mesh = build_mesh(0.04, 0.02, 0.02, BCSpec(clamp_right=False))
        w = np.array([1.0])
        c = 0.6
        x = np.full(mesh.n_elements, c)
        em = fem2d.element_matrices(steel, mesh.element_size, mesh.thickness)
        K = fem2d.assemble(mesh, x, steel, "stiffness", matrices=em)
        M = fem2d.assemble(mesh, x, steel, "mass", matrices=em)
        eig = fem2d.solve_eigen(K, M, 1)
        grad = frequency_sensitivity(mesh, x, eig, steel, w, matrices=em)

        lam1 = self._lam_bar(mesh, np.ones(mesh.n_elements), steel, w)
        e_of = lambda c_: steel.Emin + c_**steel.pl * (steel.E0 - steel.Emin)  # noqa: E731
        dlam_dc = lam1 / steel.E0 * (
            (3 * c**2 * (steel.E0 - steel.Emin) * c - e_of(c)) / c**2
        )
        assert grad.sum() == pytest.approx(dlam_dc, rel=1e-6)

    def test_repeated_eigenvalue_warning(self, steel):
        mesh = build_mesh(0.2, 0.2, 0.05, BCSpec())  # square domain, near-double modes
        eig = fem2d.EigenSolution(
            eigenvalues=np.array([100.0, 100.05]),
            eigenvectors=np.zeros((mesh.free_dofs.size, 2)),
            frequencies=np.sqrt([100.0, 100.05]) / (2 * np.pi),
        )
        with pytest.warns(topopt.RepeatedEigenvalueWarning):
            frequency_sensitivity(mesh, np.full(mesh.n_elements, 0.5), eig, steel, [0.5, 0.5])


class TestVolumeAndField:
    def test_constraint_value(self):
        v = np.full(4, 2.0)
        c = volume_constraint(np.array([0.5, 0.5, 0.25, 0.75]), v, 0.5)
        assert c.value == pytest.approx(0.0)
        assert volume_constraint(np.full(4, 0.3), v, 0.5).value < 0

    def test_density_field_validation(self):
        n = 5
        with pytest.raises(ValueError):
            DensityField(
                x=np.full(n, 0.5),
                active_mask=np.zeros(n, bool),
                passive_mask=np.zeros(n, bool),
                element_volumes=np.ones(n - 1),
            )
        mask = np.zeros(n, bool)
        mask[0] = True
        with pytest.raises(ValueError):
            DensityField(
                x=np.full(n, 0.5),
                active_mask=mask,
                passive_mask=np.zeros(n, bool),
                element_volumes=np.ones(n),
            )


class TestRunTopOpt:
    def test_degenerate_volume_fraction(self):
        # at VF = 1 the constraint never binds; the optimizer starts from the
        # all-solid field and only leaves it where that improves the relaxed
        # p-norm objective (which is not monotone in density), so the final
        # design can be no worse than all-solid
        cfg = TopOptConfig(
            length=0.3,
            height=0.06,
            element_size=0.01,
            objective="stress",
            volume_fraction=1.0,
            max_iterations=10,
        )
        res = run_topopt(cfg)
        solid = topopt.evaluate_stress(cfg, np.ones(res.mesh.n_elements), res.mesh)
        assert res.objective_value <= solid.sigma_pn * (1 + 1e-9)
        assert all(h.constraint <= 1e-12 for h in res.history)
        assert res.design.x.mean() > 0.9

    def test_stress_run_beats_uniform_baseline(self):
        cfg = TopOptConfig(
            length=0.5,
            height=0.1,
            element_size=0.01,
            objective="stress",
            volume_fraction=0.4,
            max_iterations=120,
        )
        res = run_topopt(cfg)
        baseline = topopt.evaluate_stress(cfg, np.full(res.mesh.n_elements, 0.4), res.mesh)
        assert res.objective_value < 0.7 * baseline.sigma_pn
        assert abs(res.volume_fraction - 0.4) <= 1e-3 * 0.4
        assert res.design.x[res.design.active_mask].min() == 1.0

    def test_iterates_respect_bounds_and_masks(self):
        cfg = TopOptConfig(
            length=0.2,
            height=0.06,
            element_size=0.01,
            objective="stress",
            volume_fraction=0.5,
            max_iterations=15,
        )
        res = run_topopt(cfg)
        assert (res.x_design >= cfg.xmin).all() and (res.x_design <= 1.0).all()
        assert (res.design.x > 0).all() and (res.design.x <= 1.0).all()
        assert len(res.history) == res.iterations

    def test_bit_reproducible(self):
        cfg = dict(
            length=0.2,
            height=0.06,
            element_size=0.01,
            objective="frequency",
            volume_fraction=0.4,
            max_iterations=8,
            n_modes=2,
            mode_weights=(0.8, 0.2),
        )
        r1 = run_topopt(TopOptConfig(**cfg))
        r2 = run_topopt(TopOptConfig(**cfg))
        assert np.array_equal(r1.design.x, r2.design.x)
        assert [h.objective for h in r1.history] == [h.objective for h in r2.history]

    def test_volume_fraction_below_faces_rejected(self):
        cfg = TopOptConfig(
            length=0.2, height=0.06, element_size=0.01, volume_fraction=0.05
        )
        with pytest.raises(ValueError):
            run_topopt(cfg)

    def test_joint_domain_extends_length(self):
        cfg = TopOptConfig(
            length=0.2,
            height=0.06,
            element_size=0.01,
            with_joints=True,
            joint_length=0.05,
            volume_fraction=0.5,
        )
        mesh, active = topopt.build_domain(cfg)
        assert mesh.nx == 30  # 0.2 + 2 * 0.05 over 0.01
        # face plates frozen only over the beam span
        cx = mesh.element_centroids[:, 0]
        assert not active[(cx < 0.05)].any()
        assert active[(cx > 0.05) & (cx < 0.25)].sum() > 0
        # pressure on the beam span only
        xs = mesh.node_coords[mesh.pressure_edges.ravel(), 0]
        assert xs.min() >= 0.05 - 1e-9 and xs.max() <= 0.25 + 1e-9
