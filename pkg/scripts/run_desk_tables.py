#!/usr/bin/env python3
"""Run every twin-experiment preset at desk scale into results/<name>/.

Desk scale keeps runtimes tolerable on one core; set DA_THREADS to use more
workers. Pass preset names to run a subset, e.g.:

    python scripts/run_desk_tables.py table1 table3
"""

import sys

from implicitda.cli import main

TWIN_PRESETS = ("table1", "table2", "table3", "table4", "table5", "table6")


def run(names):
    for name in names:
        print(f"=== {name} ===")
        status = main(["run", name, "--out", f"results/{name}"])
        if status != 0:
            return status
        main(["plotdata", f"results/{name}/results.csv", "--kind", "error_bars"])
    return 0


if __name__ == "__main__":
    names = sys.argv[1:] or TWIN_PRESETS
    sys.exit(run(names))
