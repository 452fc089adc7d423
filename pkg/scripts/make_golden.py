"""Regenerate tests/golden/. Run only after an intentional output change."""

import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

from helpers import golden_fixtures, tiny_fixtures  # noqa: E402

from edhmm_improv.chain import export_prism, lint_prism  # noqa: E402
from edhmm_improv.check import SoftConstraint, check_all, write_plot_csv  # noqa: E402
from edhmm_improv.edhmm import sample_trace  # noqa: E402
from edhmm_improv.synthetic import desk_model, sample_days  # noqa: E402
from edhmm_improv.trace_io import hourly_profile, save_traces  # noqa: E402

GOLDEN = ROOT / "tests" / "golden"


def desk_constraints():
    d = desk_model(2)
    prof = hourly_profile(sample_days(d, 200, 1, seed=0))
    return d, [SoftConstraint(h, prof.budgets[h - 1]) for h in range(1, 25)]


def main():
    GOLDEN.mkdir(parents=True, exist_ok=True)
    for name, (params, cons, T) in golden_fixtures().items():
        text, props = export_prism(params, cons, T_horizon=T)
        problems = lint_prism(text)
        if problems:
            raise SystemExit(f"{name}: {problems}")
        (GOLDEN / f"{name}.prism").write_text(text)
        (GOLDEN / f"{name}.props").write_text(props)

    y, _ = sample_trace(tiny_fixtures()[1], 12, seed=42)
    save_traces(GOLDEN / "sample_trace.json", [y])

    d, cons = desk_constraints()
    write_plot_csv(check_all(d, cons, T_horizon=24 * d.samples_per_hour), GOLDEN / "desk_check_plot.csv")
    print(f"wrote goldens to {GOLDEN}")


if __name__ == "__main__":
    main()
