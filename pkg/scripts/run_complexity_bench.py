#!/usr/bin/env python3
"""Tabulate attention pair counts (closed-form vs counted in the forward pass)
for every layout over a ladder of grid sizes.  Thin wrapper over `tabform bench`.
"""
import sys

from tabform.cli import main as tabform_main


def main() -> int:
    argv = sys.argv[1:]
    if not any(a.startswith("--out") for a in argv):
        argv = ["--out", "runs/complexity-bench", *argv]
    return tabform_main(["bench", *argv])


if __name__ == "__main__":
    sys.exit(main())
