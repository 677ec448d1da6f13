import numpy as np
import pytest
import scipy.sparse as sp

from cavident import (
    LoadCase,
    PDASError,
    PhaseField,
    StepMatrices,
    build_square_mesh,
    ginzburg_landau_energy,
    gradient_flow_step,
    pdas_solve,
    solve_adjoint,
    solve_forward,
)
from cavident.elasticity import elastic_operator
from cavident.phasefield import (
    ObstacleProblem,
    assemble_gradient_density,
    boundary_band_mask,
    build_step_problem,
    vi_slack,
)


def dense_oracle(A, b):
    """Exhaustive active-set enumeration for tiny box QPs."""
    import itertools

    Ad = A.toarray()
    n = len(b)
    for assignment in itertools.product((0, 1, 2), repeat=n):
        lower = np.array([a == 0 for a in assignment])
        upper = np.array([a == 1 for a in assignment])
        inactive = ~(lower | upper)
        w = np.zeros(n)
        w[upper] = 1.0
        idx = np.flatnonzero(inactive)
        if len(idx):
            sub = Ad[np.ix_(idx, idx)]
            rhs = b[idx] - Ad[np.ix_(idx, np.flatnonzero(upper))] @ w[upper]
            try:
                w[idx] = np.linalg.solve(sub, rhs)
            except np.linalg.LinAlgError:
                continue
        if np.any(w < -1e-11) or np.any(w > 1 + 1e-11):
            continue
        r = Ad @ w - b
        if lower.any() and r[lower].min() < -1e-9:
            continue
        if upper.any() and (-r[upper]).min() < -1e-9:
            continue
        if inactive.any() and np.abs(r[inactive]).max() > 1e-9:
            continue
        return w
    return None


class TestBandMask:
    def test_band_width(self, mesh8):
        mask = boundary_band_mask(mesh8, 0.1)
        # at h = 0.25, only boundary nodes are within 0.1
        on_boundary = np.max(np.abs(mesh8.vertices), axis=1) > 0.999
        assert np.array_equal(mask, on_boundary)

    def test_band_grows(self):
        mesh = build_square_mesh(32)
        assert boundary_band_mask(mesh, 0.1).sum() > boundary_band_mask(mesh, 0.01).sum()


class TestPhaseField:
    def test_zeros(self, mesh8):
        v = PhaseField.zeros(mesh8)
        assert v.values.sum() == 0.0
        assert v.frozen.any()

    def test_rejects_out_of_box(self, mesh8):
        frozen = boundary_band_mask(mesh8)
        with pytest.raises(ValueError):
            PhaseField(mesh8, np.full(mesh8.n_vertices, 1.5), frozen)

    def test_rejects_nonzero_frozen(self, mesh8):
        frozen = boundary_band_mask(mesh8)
        values = np.full(mesh8.n_vertices, 0.5)
        with pytest.raises(ValueError):
            PhaseField(mesh8, values, frozen)


class TestGinzburgLandau:
    def test_constant_zero_and_one(self, mesh16):
        mats = StepMatrices.build(mesh16)
        z = np.zeros(mesh16.n_vertices)
        assert ginzburg_landau_energy(z, mats, 1.0, 0.1) == 0.0
        assert ginzburg_landau_energy(np.ones_like(z), mats, 1.0, 0.1) == pytest.approx(
            0.0, abs=1e-12
        )

    def test_half_constant(self, mesh16):
        # v = 1/2: no gradient, well value 1/4 over area 4
        mats = StepMatrices.build(mesh16)
        v = np.full(mesh16.n_vertices, 0.5)
        alpha, eps = 0.7, 0.05
        assert ginzburg_landau_energy(v, mats, alpha, eps) == pytest.approx(
            alpha / eps, rel=1e-12
        )

    def test_linear_profile(self, mesh16):
        # v = (x+1)/2: |grad v|^2 = 1/4, well = v(1-v) with exact integral 2/3
        mats = StepMatrices.build(mesh16)
        v = (mesh16.vertices[:, 0] + 1.0) / 2.0
        alpha, eps = 1.0, 0.25
        expect = alpha * (eps * 1.0 + (2.0 / 3.0) / eps)
        assert ginzburg_landau_energy(v, mats, alpha, eps) == pytest.approx(expect, rel=1e-12)


class TestPDAS:
    def test_unconstrained_interior(self, rng):
        n = 6
        Q = rng.standard_normal((n, n))
        A = sp.csc_matrix(Q @ Q.T + n * np.eye(n))
        w_target = rng.uniform(0.3, 0.7, n)
        b = A @ w_target
        state = pdas_solve(ObstacleProblem(A, b, np.arange(n), n))
        assert np.abs(state.solution - w_target).max() < 1e-11
        assert state.iterations == 1
        assert not state.lower.any() and not state.upper.any()

    def test_fully_clamped(self):
        A = sp.csc_matrix(np.eye(3))
        state_low = pdas_solve(ObstacleProblem(A, np.array([-1.0, -2.0, -3.0]), np.arange(3), 3))
        assert np.abs(state_low.solution).max() == 0.0
        state_up = pdas_solve(ObstacleProblem(A, np.array([2.0, 3.0, 4.0]), np.arange(3), 3))
        assert np.abs(state_up.solution - 1.0).max() == 0.0

    def test_matches_oracle(self, rng):
        for _ in range(40):
            n = int(rng.integers(1, 7))
            Q = rng.standard_normal((n, n))
            A = sp.csc_matrix(Q @ Q.T + 0.2 * n * np.eye(n))
            b = 3.0 * rng.standard_normal(n)
            state = pdas_solve(ObstacleProblem(A, b, np.arange(n), n))
            expect = dense_oracle(A, b)
            assert expect is not None
            assert np.abs(state.solution - expect).max() < 1e-9

    def test_warm_start_converges(self, rng):
        n = 8
        Q = rng.standard_normal((n, n))
        A = sp.csc_matrix(Q @ Q.T + n * np.eye(n))
        b = 3.0 * rng.standard_normal(n)
        prob = ObstacleProblem(A, b, np.arange(n), n)
        cold = pdas_solve(prob)
        warm = pdas_solve(prob, warm_start=(cold.lower, cold.upper))
        assert np.abs(warm.solution - cold.solution).max() < 1e-12
        assert warm.iterations <= cold.iterations

    def test_multiplier_signs(self, rng):
        n = 10
        Q = rng.standard_normal((n, n))
        A = sp.csc_matrix(Q @ Q.T + 0.3 * n * np.eye(n))
        b = 4.0 * rng.standard_normal(n)
        state = pdas_solve(ObstacleProblem(A, b, np.arange(n), n))
        r = -state.multiplier  # r = Aw - b
        if state.lower.any():
            assert r[state.lower].min() >= -1e-10
        if state.upper.any():
            assert (-r[state.upper]).min() >= -1e-10
        inactive = ~(state.lower | state.upper)
        if inactive.any():
            assert np.abs(r[inactive]).max() < 1e-9

    def test_strongly_negative_rhs_clamps_to_zero(self, rng):
        n = 9
        Q = rng.standard_normal((n, n))
        A = sp.csc_matrix(Q @ Q.T + n * np.eye(n))
        b = -np.abs(rng.standard_normal(n)) - 10.0
        state = pdas_solve(ObstacleProblem(A, b, np.arange(n), n))
        assert np.abs(state.solution).max() == 0.0
        # lower multiplier is Aw - b = -b, nonnegative
        assert np.allclose(-state.multiplier, -b)
        assert (-b >= 0).all()


def make_pairs(mesh, params, loads, v):
    op = elastic_operator(mesh, params, v.values)
    pairs = []
    for load in loads:
        u = solve_forward(mesh, params, load, operator=op)
        p = solve_adjoint(mesh, params, load, u, operator=op)
        pairs.append((u, p))
    return pairs


@pytest.fixture(scope="module")
def step_setup():
    from cavident import ElasticityParams
    from cavident.synth import generate_measurements
    from cavident.presets import get_preset

    preset = get_preset("test1")
    params = ElasticityParams(preset.mu, preset.lam, preset.delta)
    mesh = build_square_mesh(12)
    loads = generate_measurements(
        preset.target,
        preset.load_definitions(),
        24,
        mesh,
        params,
        dirichlet_sides=("bottom",),
    )
    return mesh, params, loads


class TestGradientFlowStep:
    def test_step_respects_box_and_band(self, step_setup):
        mesh, params, loads = step_setup
        v = PhaseField.zeros(mesh)
        pairs = make_pairs(mesh, params, loads, v)
        v1, state, _ = gradient_flow_step(
            v, pairs, params, tau=1e-3, alpha_tilde=1e-2, epsilon=1.0 / (16 * np.pi)
        )
        assert v1.values.min() >= 0.0
        assert v1.values.max() <= 1.0
        assert np.abs(v1.values[v1.frozen]).max() == 0.0

    def test_step_satisfies_vi(self, step_setup, rng):
        mesh, params, loads = step_setup
        v = PhaseField.zeros(mesh)
        for _ in range(3):
            pairs = make_pairs(mesh, params, loads, v)
            v, state, problem = gradient_flow_step(
                v, pairs, params, tau=1e-3, alpha_tilde=1e-2, epsilon=1.0 / (16 * np.pi)
            )
            w = v.values[problem.free]
            for _ in range(50):
                omega = rng.uniform(0, 1, len(problem.b))
                assert problem.slack(w, omega) >= -1e-9

    def test_stationary_point_is_fixed(self, step_setup):
        # exact data from the defect-free body: the adjoint vanishes, the
        # misfit gradient is zero, and the double-well gradient points out
        # of the box at v = 0, so zero is a fixed point of the step
        mesh, params, loads = step_setup
        from cavident.elasticity import LoadCase
        from cavident.mesh import extract_boundary_trace, square_boundary_param

        t = square_boundary_param(mesh.vertices[mesh.neumann_vertices])
        exact = []
        for load in loads:
            u = solve_forward(mesh, params, load)
            trace = extract_boundary_trace(mesh, u.values)
            exact.append(LoadCase(load.id, load.traction, trace.sample(t)))

        mats = StepMatrices.build(mesh)
        v = PhaseField.zeros(mesh)
        pairs = make_pairs(mesh, params, exact, v)
        v_new, _, _ = gradient_flow_step(
            v, pairs, params,
            tau=1e-3, alpha_tilde=1e-2, epsilon=1.0 / (16 * np.pi), matrices=mats,
        )
        assert np.abs(v_new.values - v.values).max() <= 1e-10

    def test_vi_slack_helper(self, step_setup, rng):
        mesh, params, loads = step_setup
        v = PhaseField.zeros(mesh)
        pairs = make_pairs(mesh, params, loads, v)
        v1, _, problem = gradient_flow_step(
            v, pairs, params, tau=1e-3, alpha_tilde=1e-2, epsilon=1.0 / (16 * np.pi)
        )
        assert vi_slack(problem, v1.values[problem.free], rng, trials=50) >= -1e-9


class TestStepProblem:
    def test_frozen_eliminated(self, mesh8):
        v = PhaseField.zeros(mesh8)
        mats = StepMatrices.build(mesh8)
        prob = build_step_problem(
            v, np.zeros(mesh8.n_vertices), mats, tau=1e-3, alpha_tilde=1e-2, epsilon=0.02
        )
        assert len(prob.b) == (~v.frozen).sum()
        assert prob.A.shape == (len(prob.b), len(prob.b))

    def test_quadratic_model_matches_energy(self, mesh8, rng):
        # with zero misfit gradient the QP objective equals the semi-implicit
        # energy model: (1/2tau)|w-v|_M^2 + GL terms linearized at v
        tau, alpha, eps = 1e-3, 1e-2, 0.05
        frozen = boundary_band_mask(mesh8)
        vals = np.where(frozen, 0.0, rng.uniform(0, 1, mesh8.n_vertices))
        v = PhaseField(mesh8, vals, frozen)
        mats = StepMatrices.build(mesh8)
        prob = build_step_problem(v, np.zeros(mesh8.n_vertices), mats, tau=tau, alpha_tilde=alpha, epsilon=eps)

        w_free = rng.uniform(0, 1, len(prob.b))
        w = prob.expand(w_free)
        dv = w - vals
        M, Ks = mats.mass, mats.stiffness
        model = (
            dv @ (M @ dv) / (2 * tau)
            + alpha * (eps * (w @ (Ks @ w)) + ((1 - 2 * vals) @ (M @ w)) / eps)
        )
        qp = 0.5 * w_free @ (prob.A @ w_free) - prob.b @ w_free
        # the two differ by a w-independent constant: check via a second point
        w2_free = rng.uniform(0, 1, len(prob.b))
        w2 = prob.expand(w2_free)
        dv2 = w2 - vals
        model2 = (
            dv2 @ (M @ dv2) / (2 * tau)
            + alpha * (eps * (w2 @ (Ks @ w2)) + ((1 - 2 * vals) @ (M @ w2)) / eps)
        )
        qp2 = 0.5 * w2_free @ (prob.A @ w2_free) - prob.b @ w2_free
        assert qp - qp2 == pytest.approx(model - model2, rel=1e-9)

    def test_interior_point_without_misfit_gradient(self, mesh8):
        # a constant half field with no misfit pull: the unconstrained
        # solution stays strictly inside the box and is returned as-is
        frozen = boundary_band_mask(mesh8)
        vals = np.where(frozen, 0.0, 0.5)
        v = PhaseField(mesh8, vals, frozen)
        mats = StepMatrices.build(mesh8)
        prob = build_step_problem(
            v, np.zeros(mesh8.n_vertices), mats, tau=1e-3, alpha_tilde=1e-2, epsilon=0.05
        )
        state = pdas_solve(prob)
        import scipy.sparse.linalg as spla

        unconstrained = spla.spsolve(prob.A.tocsc(), prob.b)
        assert unconstrained.min() > 0.0 and unconstrained.max() < 1.0
        assert np.abs(state.solution - unconstrained).max() < 1e-12
        assert not state.lower.any() and not state.upper.any()

    def test_tau_scaling_of_matrix(self, mesh8):
        v = PhaseField.zeros(mesh8)
        mats = StepMatrices.build(mesh8)
        tau, alpha, eps = 1e-3, 1e-2, 0.05
        took = {}
        for t in (tau, tau / 2):
            took[t] = build_step_problem(
                v, np.zeros(mesh8.n_vertices), mats, tau=t, alpha_tilde=alpha, epsilon=eps
            )
        diff = (took[tau / 2].A - took[tau].A).tocsr()
        free = took[tau].free
        M_ff = mats.mass.tocsr()[free][:, free]
        assert abs(diff - M_ff / tau).max() < 1e-14

    def test_single_free_node_closed_form(self):
        # one scalar dof: minimizing a/2 w^2 - b w over [0, 1] clamps a\b
        import scipy.sparse as sp

        a = 2.0e3
        for b, expected in ((1.0e3, 0.5), (-4.0, 0.0), (3.0e3, 1.0)):
            prob = ObstacleProblem(
                sp.csc_matrix(np.array([[a]])), np.array([b]), np.array([0]), 1
            )
            state = pdas_solve(prob)
            assert state.solution[0] == pytest.approx(expected, abs=1e-14)


class TestGradientDensity:
    def test_zero_adjoint_gives_zero(self, step_setup):
        mesh, params, loads = step_setup
        v = PhaseField.zeros(mesh)
        op = elastic_operator(mesh, params, v.values)
        pairs = []
        for load in loads:
            u = solve_forward(mesh, params, load, operator=op)
            zero = type(u)(mesh, np.zeros_like(u.values))
            pairs.append((u, zero))
        G = assemble_gradient_density(mesh, params, pairs)
        assert np.abs(G).max() == 0.0

    def test_unit_contrast_gives_zero(self, step_setup):
        # delta -> 1 removes the material contrast and with it the signal;
        # the params type forbids delta = 1, so feed an equivalent stub
        from types import SimpleNamespace

        mesh, params, loads = step_setup
        v = PhaseField.zeros(mesh)
        pairs = make_pairs(mesh, params, loads, v)
        stub = SimpleNamespace(delta=1.0, voigt_matrix=params.voigt_matrix)
        G = assemble_gradient_density(mesh, stub, pairs)
        assert np.abs(G).max() == 0.0


class TestLongRun:
    def test_frozen_band_stays_zero_long_run(self):
        from cavident import ElasticityParams
        from cavident.synth import generate_measurements
        from cavident.presets import get_preset

        preset = get_preset("test1")
        params = ElasticityParams(preset.mu, preset.lam, preset.delta)
        mesh = build_square_mesh(8)
        loads = generate_measurements(
            preset.target,
            preset.load_definitions()[:1],
            16,
            mesh,
            params,
            dirichlet_sides=("bottom",),
        )
        mats = StepMatrices.build(mesh)
        v = PhaseField.zeros(mesh)
        warm = None
        for _ in range(1000):
            pairs = make_pairs(mesh, params, loads, v)
            v, state, _ = gradient_flow_step(
                v, pairs, params,
                tau=1e-3, alpha_tilde=1e-2, epsilon=1.0 / (16 * np.pi),
                matrices=mats, warm_start=warm,
            )
            warm = state.active_sets
        assert np.abs(v.values[v.frozen]).max() == 0.0
        assert v.values.min() >= 0.0 and v.values.max() <= 1.0
