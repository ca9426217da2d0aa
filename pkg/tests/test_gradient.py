import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csrecon.errors import DegenerateInputError, DimensionError, InvalidSizeError
from csrecon.gradient import (
    ERROR_FLOOR_DB,
    GradientSettings,
    GradientState,
    apply_update,
    concentration,
    gradient_angle,
    gradient_vector,
    initial_step,
    iteration_error,
    reconstruct_gradient,
    write_trace,
    zero_fill,
)
from csrecon.transforms import build_basis, draw_selector


def naive_gradient(y, missing, mat, delta, scale=1.0):
    """Direct evaluation: perturb one sample, transform by a dense matrix, compare sums."""
    n = y.shape[0]
    g = np.zeros(n)
    for s in missing:
        up, down = y.astype(complex), y.astype(complex)
        up[s] += delta
        down[s] -= delta
        g[s] = scale * (np.abs(mat @ up).sum() - np.abs(mat @ down).sum()) / n
    return g


def cosine_case(seed, n=128):
    """Two seeded frequencies with amplitudes 1.0 and 0.7, half the samples missing."""
    rng = np.random.default_rng(seed)
    k1, k2 = rng.choice(np.arange(1, n // 2), 2, replace=False)
    t = np.arange(n)
    x = np.cos(2 * np.pi * k1 * t / n) + 0.7 * np.cos(2 * np.pi * k2 * t / n)
    return x, draw_selector(n, n // 2, seed).mask()


class TestConcentration:
    def test_examples(self):
        assert concentration(np.zeros(3)) == 0
        assert concentration([1, -2, 3]) == 6
        assert concentration([3 + 4j, 0]) == 5


class TestZeroFill:
    def test_example(self):
        assert zero_fill([5, 9], [True, False, True]).tolist() == [5, 0, 9]

    def test_nothing_missing(self):
        assert zero_fill([1.0, 2.0], [True, True]).tolist() == [1.0, 2.0]

    def test_all_missing(self):
        assert zero_fill([], [False] * 4).tolist() == [0, 0, 0, 0]

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            zero_fill([1, 2, 3], [True, False, True])


class TestInitialStep:
    def test_examples(self):
        assert initial_step(np.array([1, -3, 2, 0])) == 3
        assert initial_step(np.array([7])) == 7

    def test_random_scan(self):
        y = np.random.default_rng(0).normal(size=100)
        best = 0.0
        for v in y:
            best = max(best, abs(v))
        assert initial_step(y) == best

    def test_zero(self):
        with pytest.raises(DegenerateInputError):
            initial_step(np.zeros(5))


class TestGradientVector:
    def test_no_missing(self):
        st_ = GradientState(np.ones(4), 1.0, np.zeros(4))
        assert not np.any(gradient_vector(st_, build_basis("dft", 4), []))

    def test_four_point_example(self):
        basis = build_basis("dft", 4)
        st_ = GradientState(np.array([1.0, 0, 1, 0]), 1.0, np.zeros(4))
        g = gradient_vector(st_, basis, [1])
        f = np.exp(-2j * np.pi * np.outer(range(4), range(4)) / 4) / 2
        expected = (np.abs(f @ [1, 1, 1, 0]).sum() - np.abs(f @ [1, -1, 1, 0]).sum()) / 4
        assert g[1] == pytest.approx(expected, abs=1e-14)
        assert g[0] == g[2] == g[3] == 0

    @given(st.integers(2, 24), st.sampled_from(["dft", "dct"]), st.integers(0, 10_000),
           st.floats(1e-3, 10.0))
    @settings(max_examples=40, deadline=None)
    def test_matches_direct_evaluation(self, n, kind, seed, delta):
        rng = np.random.default_rng(seed)
        y = rng.normal(size=n)
        missing = np.flatnonzero(rng.random(n) < 0.5)
        basis = build_basis(kind, n)
        g = gradient_vector(GradientState(y, delta, np.zeros(n)), basis, missing, scale=2.5)
        ref = naive_gradient(y, missing, basis.matrix, delta, scale=2.5)
        assert np.abs(g - ref).max() <= 1e-10 * max(1.0, np.abs(ref).max())
        avail = np.setdiff1d(np.arange(n), missing)
        assert not np.any(g[avail])

    def test_near_zero_at_sparse_point(self):
        # constant signal, 1-sparse in DFT: each entry is exactly 2 delta / N^1.5
        for n in (128, 256):
            y = np.full(n, 3.0)
            missing = np.arange(0, n, 2)
            delta = 0.01
            g = gradient_vector(GradientState(y, delta, np.zeros(n)), build_basis("dft", n), missing)
            assert np.allclose(g[missing], 2 * delta / n**1.5, rtol=1e-6)
        assert np.abs(g).max() <= 1e-3 * delta

    def test_nonpositive_delta(self):
        with pytest.raises(InvalidSizeError):
            gradient_vector(GradientState(np.ones(4), 0.0, np.zeros(4)), build_basis("dft", 4), [1])


class TestApplyUpdate:
    def test_zero_gradient(self):
        st_ = GradientState(np.array([1.0, 2.0]), 1.0, np.zeros(2))
        new = apply_update(st_, np.zeros(2))
        assert np.array_equal(new.estimate, st_.estimate)
        assert new.iteration == 1

    def test_single_position(self):
        st_ = GradientState(np.array([0.0, 2.0]), 1.0, np.zeros(2))
        new = apply_update(st_, np.array([0.0, 0.5]))
        assert new.estimate[1] == 1.5

    def test_available_untouched(self):
        rng = np.random.default_rng(3)
        y = rng.normal(size=50)
        missing = rng.random(50) < 0.5
        g = np.where(missing, rng.normal(size=50), 0.0)
        new = apply_update(GradientState(y, 1.0, np.zeros(50)), g)
        assert np.array_equal(new.estimate[~missing], y[~missing])


class TestGradientAngle:
    def test_examples(self):
        g = np.array([1.0, 2.0, -1.0])
        assert gradient_angle(g, g) == pytest.approx(0, abs=1e-7)
        assert gradient_angle(g, -g) == pytest.approx(math.pi)
        assert gradient_angle(np.array([1.0, 0]), np.array([0, 3.0])) == pytest.approx(math.pi / 2)

    def test_zero_vector(self):
        assert gradient_angle(np.zeros(3), np.ones(3)) is None


class TestIterationError:
    def test_identical(self):
        y = np.array([1.0, 2.0, 3.0])
        assert iteration_error(y, y, [0, 2]) == ERROR_FLOOR_DB

    def test_zero_db(self):
        assert iteration_error(np.array([0.0, 0.0]), np.array([0.0, 1.0]), [1]) == pytest.approx(0.0)

    def test_example(self):
        assert iteration_error(np.array([1.0, 1.0]), np.array([2.0, 2.0]), [0, 1]) == pytest.approx(-6.0206, abs=1e-4)

    def test_zero_denominator(self):
        assert iteration_error(np.array([1.0]), np.array([0.0]), [0]) == ERROR_FLOOR_DB


class TestSettings:
    @pytest.mark.parametrize("kw", [{"step_reduction_factor": 1.0}, {"step_reduction_factor": 0.0},
                                    {"angle_threshold": 0.0}, {"angle_threshold": 4.0}])
    def test_invalid(self, kw):
        with pytest.raises(InvalidSizeError):
            GradientSettings(**kw)


class TestReconstructGradient:
    @pytest.mark.parametrize("seed", range(5))
    def test_two_sparse_converges(self, seed):
        x, mask = cosine_case(seed)
        res = reconstruct_gradient(x[mask], mask, build_basis("dft", 128))
        assert res.converged
        assert len(res.trace) <= 2000
        assert res.trace[-1].error_db <= -60
        assert np.abs(res.signal - x)[~mask].max() <= 1e-3 * np.abs(x).max()

    def test_available_samples_preserved(self):
        x, mask = cosine_case(7)
        seen = []

        def check(state):
            seen.append(np.array_equal(state.estimate[mask], x[mask]))
            assert state.delta > 0
            assert not np.any(state.gradient[mask])

        reconstruct_gradient(x[mask], mask, build_basis("dft", 128), observer=check)
        assert seen and all(seen)

    def test_delta_schedule(self):
        x, mask = cosine_case(8)
        cfg = GradientSettings()
        res = reconstruct_gradient(x[mask], mask, build_basis("dft", 128), cfg)
        delta0 = np.abs(x[mask]).max()
        k = 0
        for row in res.trace:
            assert row.delta == delta0 * cfg.step_reduction_factor**k
            if not math.isnan(row.beta) and row.beta > cfg.angle_threshold:
                k += 1
        assert k == res.reductions > 0

    def test_concentration_below_zero_fill(self):
        x, mask = cosine_case(9)
        res = reconstruct_gradient(x[mask], mask, build_basis("dft", 128))
        zf = zero_fill(x[mask], mask)
        mu0 = math.sqrt(128) * concentration(build_basis("dft", 128).forward(zf))
        assert res.trace[-1].mu < mu0

    def test_concentration_falls_across_step_stages(self):
        x, mask = cosine_case(9)
        res = reconstruct_gradient(x[mask], mask, build_basis("dft", 128))
        stage_end = {}
        for row in res.trace:
            stage_end[row.delta] = row.mu
        ends = [stage_end[d] for d in sorted(stage_end, reverse=True)]
        assert len(ends) > 1
        assert all(b <= a for a, b in zip(ends, ends[1:]))

    def test_directional_derivative(self):
        # away from kinks the two-sided estimate matches a fine central difference
        n = 32
        rng = np.random.default_rng(13)
        y = rng.normal(size=n)
        missing = np.arange(0, n, 3)
        basis = build_basis("dct", n)
        delta = 1e-4
        g = gradient_vector(GradientState(y, delta, np.zeros(n)), basis, missing) * n
        h = delta / 10
        for s in missing:
            e = np.zeros(n)
            e[s] = h
            fd = (concentration(basis.forward(y + e)) - concentration(basis.forward(y - e))) / (2 * h)
            assert abs(g[s] / (2 * delta) - fd) <= 0.15 * abs(fd)

    def test_nothing_missing(self):
        x = np.arange(1.0, 9.0)
        res = reconstruct_gradient(x, np.ones(8, bool), build_basis("dct", 8))
        assert res.converged and np.array_equal(res.signal, x)

    def test_all_zero_samples(self):
        with pytest.raises(DegenerateInputError):
            reconstruct_gradient(np.zeros(4), [True] * 4 + [False] * 4, build_basis("dct", 8))

    def test_iteration_cap(self):
        x, mask = cosine_case(10)
        res = reconstruct_gradient(x[mask], mask, build_basis("dft", 128), GradientSettings(max_iterations=3))
        assert len(res.trace) == 3 and not res.converged

    def test_deterministic(self):
        x, mask = cosine_case(11)
        a = reconstruct_gradient(x[mask], mask, build_basis("dft", 128))
        b = reconstruct_gradient(x[mask], mask, build_basis("dft", 128))
        assert np.array_equal(a.signal, b.signal)

    def test_trace_csv(self, tmp_path):
        x, mask = cosine_case(12)
        res = reconstruct_gradient(x[mask], mask, build_basis("dft", 128))
        path = tmp_path / "trace.csv"
        write_trace(res.trace, path)
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["iteration", "delta", "beta", "error_dB", "mu"]
        assert len(rows) == len(res.trace)
        assert float(rows[-1]["error_dB"]) == res.trace[-1].error_db
