import json

import pytest

from corrbound import verify


@pytest.fixture(scope="module")
def quick():
    return verify.run_suite("oscillator", scale="quick", n_resamples=30)


def test_quick_suite_structure(quick):
    crit = set(quick.by_criterion())
    assert {1, 2, 3, 4, 5, 7, 8} <= crit
    for c in quick.checks:
        assert isinstance(c.passed, bool) and c.tolerance
        assert c.line().startswith(("[PASS]", "[FAIL]"))


def test_document(quick):
    doc = json.loads(verify.verification_document([quick]))
    assert doc["schema_version"] and "timestamp" in doc
    suite = doc["suites"][0]
    assert suite["suite"] == "oscillator" and "seconds" not in suite
    assert {"criterion", "name", "passed", "measured", "tolerance"} <= set(suite["checks"][0])


def test_integrator_order_check():
    checks = verify.check_integrator_order()
    assert all(c.passed for c in checks)
    assert all(3 <= r <= 5 for r in checks[0].measured["ratios"])


def test_unknown_suite():
    with pytest.raises(ValueError, match="valid suites"):
        verify.run("kepler")
    with pytest.raises(ValueError, match="scale"):
        verify.run_suite("oscillator", scale="huge")
