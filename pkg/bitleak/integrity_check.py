import numpy as np

from .archive import LeakArchive
from .bitprofile import WeightSetClass


#: checks performed by :func:`check`
VALID_CHECKS = ["ledger", "profile"]


class IntegrityCheckError(BaseException):
    """Raised when leak results contradict the ground truth"""
    pass


def check(archive_or_h5file, checks=None):
    """Verify leak results against the archived victim

    Parameters
    ----------
    archive_or_h5file: bitleak.archive.LeakArchive or str
        A leak archive or a path to an HDF5 file
    checks: list of str
        Which checks to perform ("ledger" and/or "profile")

    Raises
    ------
    IntegrityCheckError
        if the checks fail
    """
    if checks is None:
        checks = VALID_CHECKS
    elif isinstance(checks, str):
        checks = [checks]
    for ch in checks:
        if ch not in VALID_CHECKS:
            raise ValueError("Unknown check: {}".format(ch))

    if isinstance(archive_or_h5file, LeakArchive):
        _check_archive(archive_or_h5file, checks)
    else:
        with LeakArchive(h5file=archive_or_h5file, h5mode="r") as archive:
            _check_archive(archive, checks)


def _check_archive(archive, checks):
    victim = archive.get_victim()
    if "ledger" in checks:
        for name in archive.ledger_names():
            check_ledger(archive.get_ledger(name), victim, name=name)
    if "profile" in checks:
        for name in archive.profile_names():
            check_profile(archive.get_profile(name), victim, name=name)


def check_ledger(ledger, victim, name="ledger"):
    """Every known bit must equal the victim's bit

    Raises
    ------
    IntegrityCheckError
        if the check fails
    """
    if ledger.layer_shapes != [tuple(sh) for sh in victim.layer_shapes]:
        raise IntegrityCheckError(
            "Layer shapes of {} do not match the victim!".format(name))
    wrong = ledger.known & (ledger.values != victim.true_bits())
    if np.any(wrong):
        ww, bb = np.argwhere(wrong)[0]
        msg = "{} wrong bits in {}, e.g. weight {} bit {}!".format(
            int(np.count_nonzero(wrong)), name, ww, bb)
        raise IntegrityCheckError(msg)


def check_profile(profile, victim, name="profile"):
    """Every victim code must lie in its projected range and every
    fully leaked weight must be exact

    Raises
    ------
    IntegrityCheckError
        if the check fails
    """
    codes = victim.codes_flat().astype(np.int64)
    if codes.shape != profile.prefix.shape:
        raise IntegrityCheckError(
            "Weight count of {} does not match the victim!".format(name))
    outside = (codes < profile.code_min) | (codes > profile.code_max)
    if np.any(outside):
        idx = np.flatnonzero(outside)[0]
        msg = "Code {} of weight {} outside of [{}, {}] in {}!".format(
            codes[idx], idx, profile.code_min[idx], profile.code_max[idx],
            name)
        raise IntegrityCheckError(msg)
    full = profile.set_class == WeightSetClass.FULL
    if np.any(profile.code_min[full] != codes[full]):
        raise IntegrityCheckError(
            "Fully leaked weights of {} are not exact!".format(name))
