import json

import numpy as np
import pytest

from kvquant.backends import Backend, BackendDescriptor, BackendId, get_backend
from kvquant.validation import CATEGORIES, run_suite, suite_matrices


def _off_by_one(t0=2, d0=3):
    ref = get_backend("scalar-ref")

    def quant(K, s, out, nwork):
        ref.quant_kernel(K, s, out, nwork)
        if out.shape[0] > t0 and out.shape[1] > d0:
            out[t0, d0] = out[t0, d0] + 1 if out[t0, d0] < 127 else out[t0, d0] - 1

    return Backend(BackendDescriptor(BackendId.BLOCKED, "mutant"), quant, ref.dequant_kernel, parallel=False)


def test_full_suite_passes():
    res = run_suite()
    assert res.total >= 25
    assert res.ok, res.failures
    assert res.passed == res.total


def test_every_category_present():
    seen = []
    run_suite(on_result=lambda case, msg: seen.append(case.category))
    assert set(seen) == set(CATEGORIES)


def test_identity_category_alone():
    res = run_suite(["identity"])
    assert res.total >= 3 and res.ok


def test_deterministic_across_runs():
    a = run_suite(["structural", "deterministic", "backend"])
    b = run_suite(["structural", "deterministic", "backend"])
    assert a == b


def test_unknown_category():
    with pytest.raises(ValueError, match="valid"):
        run_suite(["speed"])


def test_mutant_backend_caught_with_coordinate():
    res = run_suite(["backend", "edge"], backends=[_off_by_one()])
    assert not res.ok
    names = [n for n, _ in res.failures]
    assert "backend/blocked-vs-scalar-ref" in names
    msg = dict(res.failures)["backend/blocked-vs-scalar-ref"]
    assert "(2, 3)" in msg


def test_json_report():
    res = run_suite(["identity"])
    doc = json.loads(res.to_json())
    assert doc["total"] == res.total and doc["failures"] == []


def test_suite_matrices_cover_vector_tails():
    widths = {K.cols for _, K in suite_matrices()}
    assert {1, 2, 3, 4, 5, 7, 8, 13, 1027} <= widths
    assert any(w % 4 for w in widths if w > 4)
    assert all(np.isfinite(K.data).all() for _, K in suite_matrices())
