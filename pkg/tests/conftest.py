import shutil
import tempfile
import time

TMPDIR = tempfile.mkdtemp(prefix=time.strftime(
    "bitleak_test_%H.%M_"))


def pytest_configure(config):
    """Redirect temporary files of the tests to a throwaway directory"""
    tempfile.tempdir = TMPDIR


def pytest_unconfigure(config):
    """Remove the temporary test directory"""
    shutil.rmtree(TMPDIR, ignore_errors=True)
