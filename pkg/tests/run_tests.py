#!/usr/bin/env python3
"""
Test runner for the ECG SE-ResNet engine
Runs each test module through pytest; pass --slow to include the desk-scale runs
"""

import sys
import os
import subprocess

PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

TEST_FILES = [
    "tests/test_data_processing.py",
    "tests/test_autodiff.py",
    "tests/test_model.py",
    "tests/test_training.py",
    "tests/test_inference.py",
    "tests/test_evaluation.py",
    "tests/test_synth.py",
    "tests/test_cli.py",
    "tests/test_acceptance.py",
]


def run_test_file(test_file, include_slow):
    """Run one test module"""
    print(f"\n{'='*60}")
    print(f"RUNNING: {test_file}")
    print(f"{'='*60}")

    command = [sys.executable, "-m", "pytest", test_file, "-q"]
    if not include_slow:
        command += ["-m", "not slow"]
    try:
        result = subprocess.run(command, capture_output=False, text=True, cwd=PROJECT_ROOT)
    except OSError as e:
        print(f"\n{test_file} - ERROR: {e}")
        return False

    # pytest exits 5 when every test in the module was deselected
    if result.returncode in (0, 5):
        print(f"\n{test_file} - PASSED")
        return True
    print(f"\n{test_file} - FAILED (exit code: {result.returncode})")
    return False


def check_dependencies():
    """Check that the numeric and test stack is importable"""
    print("Checking dependencies...")
    try:
        import numpy
        import pandas
        import sklearn
        import pydantic
        import dotenv
        import pytest
        print("All dependencies are installed.")
        return True
    except ImportError as e:
        print(f"Missing dependency: {e}")
        print("Please run: pip install -r requirements.txt")
        return False


def check_data_files():
    """Check that the bundled class map and reward matrix exist"""
    missing = [name for name in ("class_map.csv", "weights.csv")
               if not os.path.exists(os.path.join(PROJECT_ROOT, "data", name))]
    if missing:
        print(f"Data files not found in data/: {', '.join(missing)}")
        return False
    print("Class map and reward matrix found.")
    return True


def main():
    """Main test runner function"""
    include_slow = "--slow" in sys.argv[1:]
    print("ECG SE-RESNET ENGINE - TEST RUNNER")
    print("="*60)

    if not check_dependencies():
        return 1
    if not check_data_files():
        return 1

    print("\nStarting test execution...")
    passed = failed = 0
    for test_file in TEST_FILES:
        if not os.path.exists(os.path.join(PROJECT_ROOT, test_file)):
            print(f"Test file not found: {test_file}")
            failed += 1
        elif run_test_file(test_file, include_slow):
            passed += 1
        else:
            failed += 1

    print(f"\n{'='*60}")
    print("TEST SUMMARY")
    print(f"{'='*60}")
    print(f"Passed: {passed}")
    print(f"Failed: {failed}")
    print(f"Total: {passed + failed}")

    if failed == 0:
        print("\nALL TESTS PASSED!")
        return 0
    print(f"\n{failed} TEST FILE(S) FAILED!")
    return 1


if __name__ == "__main__":
    sys.exit(main())
