#!/usr/bin/env python
"""Package version

The version string is maintained here and read by setup.py without
importing the package (which would pull in numpy and torch).
"""
version = "0.1.0"
