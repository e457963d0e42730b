import numpy as np
import pytest

from xct import comm, geometry, pipeline, solver
from xct.engine import spmm_reference


def identity_system(n=6):
    class Identity:
        num_rows = n
        num_cols = n
        num_angles = n
        num_detector_cols = 1
        indptr = np.arange(n + 1, dtype=np.int64)
        indices = np.arange(n, dtype=np.int64)
        values = np.ones(n)

    return pipeline.assemble_from_matrix(
        Identity(), pipeline.SystemConfig(precision="double", ffactor=1))


@pytest.fixture(scope="module")
def problem64():
    geom = geometry.make_geometry(90, 1, 64, 0.0, np.pi)
    matrix = geometry.build_system_matrix(geom)
    phantom = geometry.generate_phantom("uniform-disk", 64, 1)
    sino = geometry.simulate_measurements(matrix, phantom, 0.0, 0)
    return geom, matrix, sino.slices_as_columns().astype(np.float64)


class TestCgls:
    def test_identity_converges_in_one_iteration(self):
        system = identity_system()
        y = np.array([3.0, -1.0, 2.0, 0.5, 4.0, 1.5])
        res = solver.cgls_solve(system, y, solver.SolveConfig(max_iters=5))
        assert np.allclose(res.x, y, atol=1e-12)
        assert res.residual_history[0] <= 1e-12
        assert res.iterations == 1
        assert res.projections == 1 and res.backprojections == 2

    def test_counter_identity_full_run(self, problem64):
        geom, _, y = problem64
        system = pipeline.assemble(geom, pipeline.SystemConfig(
            precision="double", ffactor=1))
        res = solver.cgls_solve(system, y, solver.SolveConfig(max_iters=30))
        assert res.projections == 30
        assert res.backprojections == 31
        assert res.iterations == 30

    def test_noiseless_convergence(self, problem64):
        geom, matrix, y = problem64
        system = pipeline.assemble(geom, pipeline.SystemConfig(
            precision="double", ffactor=1))
        res = solver.cgls_solve(system, y, solver.SolveConfig(max_iters=30))
        # the measurement residual decreases monotonically and the
        # normal-equation residual reaches well below 1e-4
        assert res.residual_history[-1] < 1e-3
        assert res.gradient_history[-1] < 1e-4

    def test_residual_monotone_nonincreasing(self, problem64):
        geom, _, y = problem64
        system = pipeline.assemble(geom, pipeline.SystemConfig(
            precision="double", ffactor=1))
        res = solver.cgls_solve(system, y, solver.SolveConfig(max_iters=25))
        h = np.array(res.residual_history)
        assert np.all(np.diff(h) <= 1e-10)

    def test_partition_invariance(self, problem64):
        # partitioning must not change the mathematics: single operator
        # applications agree to rounding, and short solves stay within
        # 1e-10 (CG amplifies last-ulp reduction-order differences
        # exponentially with iteration count, so the band is checked in
        # the regime where rounding has not been magnified)
        geom, matrix, y = problem64
        rng = np.random.default_rng(5)
        probe = rng.random((matrix.num_cols, 1))
        base_fwd = None
        estimates = {}
        for p_d in (1, 4, 6):
            system = pipeline.assemble(geom, pipeline.SystemConfig(
                precision="double", ffactor=1, p_d=p_d,
                comm_strategy="hierarchical"))
            fwd, _ = system.apply_forward(probe)
            if base_fwd is None:
                base_fwd = fwd
            else:
                assert np.abs(fwd - base_fwd).max() <= 1e-14 * base_fwd.max()
            res = solver.cgls_solve(system, y, solver.SolveConfig(max_iters=6))
            estimates[p_d] = res.x
        scale = np.abs(estimates[1]).max()
        for p_d in (4, 6):
            assert np.abs(estimates[p_d] - estimates[1]).max() <= 1e-10 * scale

    def test_ffactor_invariance(self, problem64):
        geom, _, y = problem64
        y16 = np.repeat(y, 16, axis=1)
        xs = {}
        for ff in (1, 16):
            system = pipeline.assemble(geom, pipeline.SystemConfig(
                precision="double", ffactor=ff))
            res = solver.cgls_solve(system, y16, solver.SolveConfig(max_iters=6))
            xs[ff] = res.x
        scale = np.abs(xs[1]).max()
        assert np.abs(xs[16] - xs[1]).max() <= 1e-10 * scale

    def test_normalization_transparency_in_double(self, problem64):
        # double-precision storage is exact, so routing every operator
        # application through normalize/denormalize must not move x
        geom, _, y = problem64
        system = pipeline.assemble(geom, pipeline.SystemConfig(
            precision="double", ffactor=1))
        base = solver.cgls_solve(system, y, solver.SolveConfig(max_iters=10)).x

        applied = []
        orig_fwd, orig_adj = system.apply_forward, system.apply_adjoint

        def fwd(x):
            out, states = orig_fwd(x)
            applied.append(states[0].factor)
            return out, states

        system.apply_forward = fwd
        again = solver.cgls_solve(system, y, solver.SolveConfig(max_iters=10)).x
        system.apply_forward = orig_fwd
        assert applied and any(f != 1.0 for f in applied)
        assert np.abs(again - base).max() <= 1e-12 * np.abs(base).max()

    def test_divergence_diagnostic(self):
        system = identity_system()
        y = np.full(6, 1e200)
        y[0] = np.inf
        with pytest.raises(solver.SolverDivergence) as err:
            solver.cgls_solve(system, y, solver.SolveConfig(max_iters=3))
        assert "iteration 0" in str(err.value) or "iteration" in str(err.value)
        assert "double" in str(err.value)

    def test_mixed_mode_converges_to_single_plateau(self, problem64):
        geom, _, y = problem64
        rels = {}
        for prec in ("single", "mixed"):
            system = pipeline.assemble(geom, pipeline.SystemConfig(
                precision=prec, ffactor=1))
            res = solver.cgls_solve(system, y, solver.SolveConfig(
                max_iters=24, precision=prec))
            rels[prec] = res.residual_history[-1]
        # reduced precision tracks the single-precision curve to the same
        # order of magnitude on a noiseless problem
        assert rels["mixed"] <= 3.0 * rels["single"]

    def test_zero_measurements(self):
        system = identity_system()
        res = solver.cgls_solve(system, np.zeros(6), solver.SolveConfig(max_iters=3))
        assert np.all(res.x == 0)
        assert res.iterations == 0


class TestEarlyStop:
    def test_stops_exactly_at_configured_iteration(self, problem64):
        geom, _, y = problem64
        system = pipeline.assemble(geom, pipeline.SystemConfig(
            precision="double", ffactor=1))
        cfg = solver.SolveConfig(max_iters=30, early_stop_iters=24)
        res = solver.cgls_solve(system, y, cfg)
        assert res.iterations == 24
        assert res.projections == 24 and res.backprojections == 25

    def test_unset_runs_to_max(self):
        system = identity_system()
        y = np.arange(1.0, 7.0)
        cfg = solver.SolveConfig(max_iters=4)
        res = solver.cgls_solve(system, y, cfg)
        # identity converges after one iteration (gradient vanishes)
        assert res.iterations <= 4

    def test_first_iterate(self, problem64):
        geom, _, y = problem64
        system = pipeline.assemble(geom, pipeline.SystemConfig(
            precision="double", ffactor=1))
        res = solver.cgls_solve(system, y, solver.SolveConfig(
            max_iters=30, early_stop_iters=1))
        assert res.iterations == 1

    def test_early_stop_helper_validation(self):
        cfg = solver.SolveConfig(max_iters=10, early_stop_iters=2)
        with pytest.raises(ValueError):
            solver.early_stop(cfg, [])
        assert not solver.early_stop(cfg, [0.5])
        assert solver.early_stop(cfg, [0.5, 0.4])
        with pytest.raises(ValueError):
            solver.SolveConfig(max_iters=10, early_stop_iters=11)


class TestResidualReport:
    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            solver.residual_curve_report({})
        empty = solver.SolveResult(x=np.zeros(1))
        with pytest.raises(ValueError):
            solver.residual_curve_report({"double": empty})

    def test_two_modes_four_data_columns(self):
        a = solver.SolveResult(x=np.zeros(1), residual_history=[0.5, 0.25],
                               iteration_seconds=[0.1, 0.1], mode="double")
        b = solver.SolveResult(x=np.zeros(1), residual_history=[0.5, 0.3],
                               iteration_seconds=[0.05, 0.05], mode="mixed")
        csv = solver.residual_curve_report({"double": a, "mixed": b})
        header = csv.splitlines()[0].split(",")
        assert header[0] == "iteration"
        assert len(header) == 1 + 4
        assert len(csv.splitlines()) == 3

    def test_monotone_decrease_on_noiseless_data(self, problem64):
        geom, _, y = problem64
        system = pipeline.assemble(geom, pipeline.SystemConfig(
            precision="double", ffactor=1))
        res = solver.cgls_solve(system, y, solver.SolveConfig(max_iters=10))
        csv = solver.residual_curve_report({"double": res})
        values = [float(line.split(",")[2]) for line in csv.splitlines()[1:]]
        assert all(b <= a for a, b in zip(values, values[1:]))


class TestPipelinePlumbing:
    def test_worker_count_does_not_change_results(self, problem64):
        geom, _, y = problem64
        outs = {}
        for workers in (1, 4):
            system = pipeline.assemble(geom, pipeline.SystemConfig(
                precision="double", ffactor=1, p_d=6, workers=workers))
            res = solver.cgls_solve(system, y, solver.SolveConfig(max_iters=5))
            outs[workers] = res.x
        assert np.array_equal(outs[1], outs[4])

    def test_direct_and_hierarchical_agree(self, problem64):
        geom, matrix, y = problem64
        xs = {}
        for strategy in ("direct", "hierarchical"):
            system = pipeline.assemble(geom, pipeline.SystemConfig(
                precision="double", ffactor=1, p_d=6, comm_strategy=strategy))
            xs[strategy] = solver.cgls_solve(
                system, y, solver.SolveConfig(max_iters=6)).x
        scale = np.abs(xs["direct"]).max()
        assert np.abs(xs["direct"] - xs["hierarchical"]).max() <= 1e-12 * scale

    def test_forward_matches_reference(self, problem64):
        geom, matrix, _ = problem64
        rng = np.random.default_rng(2)
        x = rng.random((matrix.num_cols, 2))
        system = pipeline.assemble(geom, pipeline.SystemConfig(
            precision="double", ffactor=2, p_d=4))
        out, _ = system.apply_forward(x)
        ref = spmm_reference(matrix, x)
        assert np.abs(out - ref).max() <= 1e-12 * ref.max()

    def test_partial_chunk_padding(self, problem64):
        # five slices through a fusing factor of four exercises the padded tail
        geom, matrix, _ = problem64
        rng = np.random.default_rng(3)
        x = rng.random((matrix.num_cols, 5))
        system = pipeline.assemble(geom, pipeline.SystemConfig(
            precision="double", ffactor=4))
        out, _ = system.apply_forward(x)
        ref = spmm_reference(matrix, x)
        assert np.abs(out - ref).max() <= 1e-12 * ref.max()

    def test_volume_reports_exposed(self, problem64):
        geom, _, _ = problem64
        system = pipeline.assemble(geom, pipeline.SystemConfig(
            precision="mixed", ffactor=4, p_d=6))
        reports = system.volume_reports()
        assert set(reports) == {"projection", "backprojection"}
        assert reports["projection"].level_bytes["global"] > 0
        counters = system.kernel_counters()
        assert counters.flops == 2 * counters.nnz * 4
