"""The built-in check suite behind the selftest CLI verb."""

from aoidispatch.selftest import (
    ALL_CHECKS,
    check_categorical_normalization,
    check_environment_invariants,
    check_first_update_ratio,
    check_gradients,
    check_replay_determinism,
    check_stationary_distribution,
    run_all,
)


def test_every_check_passes():
    results = run_all(log=None)
    failures = [r for r in results if not r.passed]
    assert not failures, failures


def test_checks_cover_all_registered():
    results = run_all(log=None)
    assert len(results) == len(ALL_CHECKS)
    assert len({r.name for r in results}) == len(results)


def test_individual_checks_are_deterministic():
    for check in (
        check_environment_invariants,
        check_replay_determinism,
        check_stationary_distribution,
        check_gradients,
        check_categorical_normalization,
        check_first_update_ratio,
    ):
        a, b = check(), check()
        assert a == b


def test_log_callback_receives_lines():
    lines = []
    run_all(log=lines.append)
    assert len(lines) == len(ALL_CHECKS)
    assert all(line.startswith(("PASS", "FAIL")) for line in lines)
