#!/usr/bin/env python3
"""Full desk-scale Burgers pipeline: data, training, and the three sweeps.

Equivalent to:
    latdyn gen-data configs/burgers_desk.cfg
    latdyn train    configs/burgers_desk.cfg
    latdyn eval     configs/burgers_desk.cfg --sweep dt
    latdyn eval     configs/burgers_desk.cfg --sweep noise
    latdyn eval     configs/burgers_desk.cfg --sweep params
"""

import sys
from pathlib import Path

from latdyn import cli

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "burgers_desk.cfg"


def main() -> int:
    for argv in (
        ["gen-data", str(CONFIG)],
        ["train", str(CONFIG)],
        ["eval", str(CONFIG), "--sweep", "dt"],
        ["eval", str(CONFIG), "--sweep", "noise"],
        ["eval", str(CONFIG), "--sweep", "params"],
    ):
        code = cli.main(argv)
        if code != 0:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
