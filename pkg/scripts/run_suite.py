#!/usr/bin/env python3
"""Run the desk-scale strategy comparison suite.

Pretrains, adapts, and evaluates each strategy in the config's [suite]
section under shared seeds and task data, then prints the comparison table.
Any CLI flag of `skillroute suite` applies, e.g.:

    python3 scripts/run_suite.py --set trainer.seeds=0,1,2,3,4 \
        --set suite.strategies=shared,poly,poly-s,private-mu
"""
import sys

from skillroute.cli import main

if __name__ == "__main__":
    sys.exit(main(["suite", *sys.argv[1:]]))
