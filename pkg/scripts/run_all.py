#!/usr/bin/env python3
"""Run every experiment suite with the default desk-scale settings.

    python scripts/run_all.py [--out results] [--config experiment.ini] [--deterministic]
"""
import sys

from distcache.cli import main

if __name__ == "__main__":
    sys.exit(main(["run", "--suite", "all", *sys.argv[1:]]))
