"""Regenerate the verify-bounds fixtures in tests/fixtures.

I.csv / J.csv are two classes of a synthetic mixture (c=4, n=32).
report_corrupted.json is their bound report with mmd2 inflated past both
upper bounds, so re-checking it must fail.
"""
import json
from pathlib import Path

from horde.data import synth_mixture, write_samples_csv
from horde.oracle import bound_report

OUT = Path(__file__).resolve().parents[1] / "tests" / "fixtures"

if __name__ == "__main__":
    ds = synth_mixture(num_classes=2, per_class=32, c=4, spread=0.3, seed=2024)
    I, J = ds.class_samples(0), ds.class_samples(1)
    OUT.mkdir(parents=True, exist_ok=True)
    write_samples_csv(I, OUT / "I.csv")
    write_samples_csv(J, OUT / "J.csv")
    rep = bound_report(I, J, 0.5, 8).to_dict()
    rep["mmd2"] = 10.0  # verdict flags left as computed; the checker must not trust them
    (OUT / "report_corrupted.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
