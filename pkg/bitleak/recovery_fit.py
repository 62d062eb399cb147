"""Saturating fit of recovery curves"""
import collections

import lmfit
import numpy as np


#: result of :func:`fit_recovery`
RecoveryFit = collections.namedtuple("RecoveryFit",
                                     ["amplitude", "tau", "success"])


def fit_recovery(rounds, fraction):
    """Fit ``amplitude * (1 - exp(-round / tau))`` to a recovery curve

    Parameters
    ----------
    rounds: 1d array-like
        Round numbers
    fraction: 1d array-like
        Recovered fraction after each round

    Returns
    -------
    fit: RecoveryFit
        Asymptotic fraction, time constant in rounds, and the
        lmfit success flag
    """
    rounds = np.asarray(rounds, dtype=float)
    fraction = np.asarray(fraction, dtype=float)
    if rounds.size < 2:
        raise ValueError("At least two curve points are required!")
    # initial tau from the round that reaches 63% of the last value
    reached = np.flatnonzero(fraction >= 0.63 * fraction[-1])
    tau0 = rounds[reached[0]] if reached.size and rounds[reached[0]] > 0 \
        else rounds[-1] / 2
    params = lmfit.Parameters()
    params.add(name="amplitude", value=max(fraction[-1], 1e-3), min=0,
               max=1)
    params.add(name="tau", value=max(tau0, 1e-3), min=1e-6)
    fr = lmfit.minimize(saturation_residual, params,
                        args=(rounds, fraction))
    return RecoveryFit(fr.params["amplitude"].value,
                       fr.params["tau"].value,
                       bool(fr.success))


def saturation_model(params, rounds):
    """lmfit saturating exponential"""
    amp = params["amplitude"].value
    tau = params["tau"].value
    return amp * (1 - np.exp(-np.asarray(rounds, dtype=float) / tau))


def saturation_residual(params, rounds, fraction):
    """lmfit saturating exponential residuals"""
    return saturation_model(params, rounds) - fraction


def rounds_to_target(fit, target):
    """Round count at which the fitted curve reaches `target`

    Returns `None` if the asymptote stays below the target.
    """
    if target <= 0:
        return 0.0
    if target >= fit.amplitude:
        return None
    return -fit.tau * np.log(1 - target / fit.amplitude)
