"""
Script-mode runner shared by the test files

Each test module lists its test functions and calls run_suite() under
``if __name__ == "__main__"``; pytest collects the same functions directly.
"""

import sys
import time
import traceback

import pytest


def run_suite(title, tests):
    """Run (name, function) pairs, print a summary, return True when nothing failed"""
    print("\n" + "="*60)
    print(f"{title} - TEST SUITE")
    print("="*60 + "\n")
    sys.stdout.flush()

    results = []
    for test_name, test_func in tests:
        print(f"\nRunning: {test_name}...")
        sys.stdout.flush()
        start = time.time()
        try:
            test_func()
            results.append((test_name, "PASS", time.time() - start))
        except pytest.skip.Exception as e:
            print(f"{test_name} skipped: {e}")
            results.append((test_name, "SKIP", time.time() - start))
        except Exception as e:
            print(f"{test_name} failed with error: {e}")
            traceback.print_exc()
            results.append((test_name, "FAIL", time.time() - start))
        sys.stdout.flush()

    print("\n" + "="*60)
    print("TEST SUMMARY")
    print("="*60 + "\n")

    for test_name, status, elapsed in results:
        print(f"{status}: {test_name} ({elapsed:.2f}s)")

    passed = sum(1 for _, status, _ in results if status == "PASS")
    failed = sum(1 for _, status, _ in results if status == "FAIL")
    print(f"\n{'='*60}")
    print(f"Results: {passed}/{len(results)} tests passed, {failed} failed")
    print("="*60 + "\n")
    sys.stdout.flush()
    return failed == 0
