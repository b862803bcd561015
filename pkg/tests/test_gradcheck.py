import numpy as np

from specfield import gradcheck


def test_relative_error_floor():
    assert gradcheck.relative_error(0.0, 0.0) == 0.0
    assert np.isclose(gradcheck.relative_error(1e-9, 0.0), 1e-3)
    assert np.isclose(gradcheck.relative_error(2.0, 1.0), 0.5)


def test_32_random_parameters():
    errs = gradcheck.run(seed=1, n_params=32)
    picked = sum(e.size for k, e in errs.items() if k != "endmembers")
    assert picked >= 30
    worst = max(e.max() for e in errs.values())
    assert worst <= 2e-3, gradcheck.format_table(errs)


def test_every_class_is_exercised():
    problem = gradcheck.random_problem(seed=4)
    picks = gradcheck.pick_parameters(problem, 50, seed=4)
    assert {p[0] for p in picks} == set(gradcheck.CLASSES)
    table = gradcheck.format_table(gradcheck.run(seed=4, n_params=10, problem=problem))
    assert table.splitlines()[0].split()[0] == "parameter"
    assert len(table.splitlines()) == len(gradcheck.CLASSES) + 1
