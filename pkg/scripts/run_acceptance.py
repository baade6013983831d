#!/usr/bin/env python3
"""Run the acceptance suite and print one PASS/FAIL line per criterion."""

import pathlib
import sys

import pytest

root = pathlib.Path(__file__).resolve().parents[1]
sys.exit(pytest.main([str(root / "tests" / "test_acceptance.py"), "-q", "-p", "no:cacheprovider"]))
