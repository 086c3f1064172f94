#!/usr/bin/env python3
"""Strong-convergence studies (fig3: Lorenz KP/RK4, fig6: spectral PDE model).

Writes results/<name>/results.csv plus gnuplot-ready .dat series.
"""

import sys

from implicitda.cli import main


def run(names):
    for name in names:
        print(f"=== {name} ===")
        status = main(["run", name, "--out", f"results/{name}"])
        if status != 0:
            return status
        main(["plotdata", f"results/{name}/results.csv", "--kind", "convergence"])
    return 0


if __name__ == "__main__":
    sys.exit(run(sys.argv[1:] or ("fig3", "fig6")))
