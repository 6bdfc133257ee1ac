#!/usr/bin/env python3
"""
Test and smoke-run helper for declineforge.

Wraps the pytest marker subsets, the end-to-end smoke pipeline and the
formatting checks behind one command.
"""

import argparse
import subprocess
import sys

# command -> pytest marker expression (None runs everything)
MARKER_SUBSETS = {
    "unit": "unit",
    "integration": "integration",
    "slow": "slow",
    "fast": "not slow",
    "all": None,
}

SMOKE_CONFIG = "configs/smoke.json"
SOURCES = ["src/", "tests/"]


def run_command(cmd):
    """Run a command, echoing it first; True on exit status 0."""
    print(f"Running: {' '.join(cmd)}")
    return subprocess.run(cmd).returncode == 0


def run_pytest(marker, verbose=False, coverage=False):
    cmd = ["uv", "run", "pytest"]
    if marker:
        cmd.extend(["-m", marker])
    if coverage:
        cmd.extend(["--cov=src/declineforge", "--cov-report=term-missing"])
    if verbose:
        cmd.append("-v")
    return run_command(cmd)


def run_smoke_pipeline(workspace):
    """Every stage on the smoke configuration, then the report tables."""
    base = ["uv", "run", "declineforge"]
    options = ["--config", SMOKE_CONFIG, "--workspace", workspace]
    return run_command(base + ["run-all"] + options) and run_command(base + ["report"] + options)


def run_lint():
    checks = (
        ["uv", "run", "flake8", *SOURCES],
        ["uv", "run", "black", "--check", *SOURCES],
        ["uv", "run", "isort", "--check-only", *SOURCES],
    )
    return all(run_command(cmd) for cmd in checks)


def format_code():
    return run_command(["uv", "run", "black", *SOURCES]) and run_command(["uv", "run", "isort", *SOURCES])


def main():
    parser = argparse.ArgumentParser(description="Test runner for declineforge")
    parser.add_argument("--verbose", "-v", action="store_true", help="Verbose pytest output")
    parser.add_argument("--coverage", "-c", action="store_true", help="Report line coverage")

    subparsers = parser.add_subparsers(dest="command", help="Available commands")
    for name, marker in MARKER_SUBSETS.items():
        subparsers.add_parser(name, help=f"pytest -m '{marker}'" if marker else "Run every test")
    smoke = subparsers.add_parser("smoke", help="Run the pipeline end to end on the smoke config")
    smoke.add_argument("--workspace", default="workspace-smoke", help="Workspace directory")
    subparsers.add_parser("lint", help="flake8, black --check and isort --check-only")
    subparsers.add_parser("format", help="Format with black and isort")

    args = parser.parse_args()
    if not args.command:
        parser.print_help()
        return

    if args.command in MARKER_SUBSETS:
        success = run_pytest(MARKER_SUBSETS[args.command], args.verbose, args.coverage)
    elif args.command == "smoke":
        success = run_smoke_pipeline(args.workspace)
    elif args.command == "lint":
        success = run_lint()
    else:
        success = format_code()

    sys.exit(0 if success else 1)


if __name__ == "__main__":
    main()
