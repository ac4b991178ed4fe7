#!/usr/bin/env python3
"""Analytic verification sweep; needs no dataset or trained model."""

import sys

from latdyn import cli

if __name__ == "__main__":
    sys.exit(cli.main(["theory", "--out", "theory_out"]))
