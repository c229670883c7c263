import pytest

from dck.config import tiny_config
from dck.gradcheck import CHECKS, run_suite

FAST = [name for name in CHECKS if name != "full_loss"]


@pytest.mark.parametrize("name", FAST)
def test_component_check_passes(name):
    result = run_suite(names=[name])
    assert result.passed() and result.max_rel_error < 1e-3


def test_rejects_float32():
    with pytest.raises(ValueError):
        run_suite(tiny_config(dtype="float32"), names=["layer_norm"])


def test_rejects_unknown_check():
    with pytest.raises(ValueError):
        run_suite(names=["softmax_of_doom"])


def test_report_serializes():
    record = run_suite(names=["layer_norm"]).to_dict()
    assert record["passed"] is True and record["checks"]["layer_norm"]["entries"] == 40
