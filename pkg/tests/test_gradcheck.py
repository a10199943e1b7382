import pytest

from taskmoe import gradcheck


def test_default_suite_passes():
    reports = gradcheck.run_suite("all")
    assert {r.op for r in reports} == {
        "gate_path", "expert_mix", "moe_attention", "task_infonce[sqeuclidean]", "task_infonce[cosine]",
        "sharded_task_infonce[W=4]", "total_loss", "total_loss[backbone]"}
    for r in reports:
        assert r.probes == gradcheck.PROBES
        assert r.tolerance == gradcheck.TOL
        assert r.passed, str(r)


def test_scoping():
    assert [r.op for r in gradcheck.run_suite("gate")] == ["gate_path"]
    assert [r.op for r in gradcheck.run_suite("experts")] == ["expert_mix", "moe_attention"]


@pytest.mark.parametrize("op", ["gate_path", "expert_mix", "task_infonce[cosine]", "total_loss"])
def test_corrupted_gradient_is_caught(op):
    reports = gradcheck.run_suite("all", corrupt={op})
    failed = [r.op for r in reports if not r.passed]
    assert failed == [op]
    assert str(next(r for r in reports if r.op == op)).startswith("FAIL")


def test_unknown_scope():
    with pytest.raises(ValueError):
        gradcheck.run_suite("optimizer")
