import time

import numpy as np

from superfit.gradcheck import (
    CheckResult,
    network_suite,
    numeric_grad,
    op_suite,
    relative_error,
    run_suite,
)


def test_relative_error_definition():
    np.testing.assert_allclose(relative_error([1.0, 0.0, 2e-7], [1.1, 0.0, 0.0]), [0.1 / 1.1, 0.0, 0.2])


def test_numeric_grad_of_cubic():
    x = np.array([0.5, -1.0, 2.0])
    g = numeric_grad(lambda: float((x**3).sum()), x)
    np.testing.assert_allclose(g, 3 * x**2, rtol=1e-7)
    np.testing.assert_array_equal(x, [0.5, -1.0, 2.0])
    part = numeric_grad(lambda: float((x**3).sum()), x, indices=[1])
    assert part[0] == 0 and part[2] == 0 and abs(part[1] - 3) < 1e-6


def test_result_without_entries_does_not_pass():
    assert not CheckResult("x", 0, 0.0, 1e-4, checked=0).passed
    assert "FAIL" in CheckResult("x", 0, 1.0, 1e-4, checked=3).line()


def test_every_op_matches_finite_differences():
    results = op_suite(range(6))
    assert len(results) >= 100
    bad = [r.line() for r in results if not r.passed]
    assert not bad, bad
    assert all(r.tolerance == 1e-4 for r in results)


def test_networks_match_finite_differences():
    results = network_suite(range(3))
    bad = [r.line() for r in results if not r.passed]
    assert not bad, bad
    assert all(r.tolerance == 1e-3 for r in results)


def test_full_width_middlecnn_sampled():
    start = time.perf_counter()
    (full,) = [r for r in network_suite([], full_middlecnn=True)]
    assert full.name == "middlecnn_full" and full.passed, full.line()
    assert full.checked >= 20
    assert time.perf_counter() - start < 120


def test_suite_is_deterministic():
    a = [r.max_error for r in run_suite([0], [0])]
    b = [r.max_error for r in run_suite([0], [0])]
    assert a == b
