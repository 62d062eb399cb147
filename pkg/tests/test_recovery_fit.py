import numpy as np

from bitleak import recovery_fit


def test_fit_exact():
    rounds = np.arange(1, 201)
    fraction = 0.9 * (1 - np.exp(-rounds / 40))
    fit = recovery_fit.fit_recovery(rounds, fraction)
    assert fit.success
    assert np.isclose(fit.amplitude, 0.9, rtol=1e-4)
    assert np.isclose(fit.tau, 40, rtol=1e-3)


def test_fit_noisy():
    rng = np.random.default_rng(1)
    rounds = np.arange(1, 401)
    fraction = 0.95 * (1 - np.exp(-rounds / 100))
    fraction += rng.normal(scale=0.005, size=rounds.size)
    fit = recovery_fit.fit_recovery(rounds, fraction)
    assert abs(fit.amplitude - 0.95) < 0.02
    assert abs(fit.tau - 100) < 10


def test_fit_too_short():
    try:
        recovery_fit.fit_recovery([1], [0.1])
    except ValueError:
        pass
    else:
        assert False, "a single point cannot be fitted"


def test_rounds_to_target():
    fit = recovery_fit.RecoveryFit(amplitude=0.8, tau=50, success=True)
    assert recovery_fit.rounds_to_target(fit, 0) == 0
    assert recovery_fit.rounds_to_target(fit, 0.9) is None
    rr = recovery_fit.rounds_to_target(fit, 0.4)
    assert np.isclose(rr, 50 * np.log(2))


if __name__ == "__main__":
    # Run all tests
    _loc = locals()
    for _key in list(_loc.keys()):
        if _key.startswith("test_") and hasattr(_loc[_key], "__call__"):
            _loc[_key]()
