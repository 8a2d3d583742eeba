#!/usr/bin/env python3
"""
Script to run the test suite with coverage
"""
import subprocess
import sys


def main():
    """Run pytest over tests/ with coverage of src/."""
    print("🚀 Running kamtor tests")
    print("=" * 50)

    args = [sys.executable, "-m", "pytest", "tests", "-v", "--cov=src", "--cov-report=term-missing"]
    result = subprocess.run(args + sys.argv[1:])

    if result.returncode == 0:
        print("🎉 All tests passed!")
    else:
        print(f"⚠️ Tests failed with return code {result.returncode}")
    return result.returncode


if __name__ == "__main__":
    sys.exit(main())
