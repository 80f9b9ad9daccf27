"""A reduced simulation table: 100 replications of the n = 500 normal design.

The full 1000-replication cells ship with the package and run through the
CLI, e.g. ``sarqsm simulate table1_n500``.
"""

from __future__ import annotations

from sarqsm import SimDesign, emit_table, run_design


def main() -> None:
    design = SimDesign(n=500, lambda0=0.3, reps=100, base_seed=7)
    table = run_design(design)
    print(emit_table(table, "markdown"))
    print("failure rates:", table.diagnostics["failure_rate"])


if __name__ == "__main__":
    main()
