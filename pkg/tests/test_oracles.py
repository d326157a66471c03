import math

from unirep import oracles


def test_posterior_toy():
    p = oracles.oracle_posterior([[[1.0, 0.0]]], [[2.0]], [[[1.0, 0.0]], [[0.0, 1.0]]])
    assert abs(p[0][0] - 0.8808) < 1e-4


def test_idt_loss_toy():
    loss = oracles.oracle_idt_loss([[[1.0, 0.0]]], [[2.0]], [[[1.0, 0.0]], [[0.0, 1.0]]], [0], margin=1.0)
    assert abs(loss - 0.3133) < 1e-4


def test_mls_and_cosine_toys():
    assert abs(oracles.oracle_mls([[1.0, 0.0]], [2.0], [[0.0, 1.0]], [2.0]) + 1.0) < 1e-15
    assert oracles.oracle_cosine([[1.0, 0.0], [1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]]) == 0.5


def test_metrics_toys():
    assert oracles.oracle_tar_at_far([0.9, 0.8], [0.5, 0.1], 0.5) == 1.0
    assert oracles.oracle_rank([0.3, 0.3, 0.1], 1) == 1
    assert oracles.oracle_rank_k([[0.1, 0.9]], [0], [0, 1], 1) == 0.0


def test_adv_uninformative():
    loss = oracles.oracle_adv_loss([[[1.0], [1.0]]], [[1, 0], [0, 1]], [[0.0, 0.0], [0.0, 0.0]], [0.0, 0.0])
    assert abs(loss - 2 * math.log(2)) < 1e-15


def test_oracle_module_is_self_contained():
    import ast
    import inspect
    tree = ast.parse(inspect.getsource(oracles))
    imported = {n.names[0].name for n in ast.walk(tree) if isinstance(n, ast.Import)}
    imported |= {n.module for n in ast.walk(tree) if isinstance(n, ast.ImportFrom)}
    assert imported <= {"math", "__future__"}
