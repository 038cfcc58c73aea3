"""Run the acceptance suite and print one PASS/FAIL line per criterion.

Extra arguments are passed to pytest, e.g. ``-k "01 or 02"`` for the fast ones.
"""

import sys
from pathlib import Path

import pytest

TESTS = Path(__file__).resolve().parent.parent / "tests" / "test_acceptance.py"

if __name__ == "__main__":
    sys.exit(pytest.main([str(TESTS), "-q", "-rN", *sys.argv[1:]]))
