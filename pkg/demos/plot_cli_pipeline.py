"""
Command-line pipeline
=====================

Generate a synthetic three-user dataset, run every ordered user pair with
all methods, and read back the summary. Everything goes to a temporary
directory.
"""

# %%
import csv
import tempfile
from pathlib import Path

from dtsda.cli import main

root = Path(tempfile.mkdtemp())
(root / "spec.csv").write_text("key,value\nnum_users,3\nsegments_per_activity,3\nwindow_len,16\nsampling_rate,16\nseed,0\n")
(root / "exp.cfg").write_text(
    "data = data\nmethods = dtsda, dann, source_only\nepochs = 2\nconv_channels = 8, 16\nbottleneck = 16\nhidden = 16\n"
)

# %%
# ``synth`` writes recordings.csv, activities.csv, dataset.cfg and the true
# states; ``run`` trains and evaluates six tasks per method.
assert main(["synth", "--spec", str(root / "spec.csv"), "--out", str(root / "data")]) == 0
assert main(["run", "--config", str(root / "exp.cfg"), "--out", str(root / "out"), "--heatmaps"]) == 0

# %%
with open(root / "out" / "summary.csv", newline="") as fh:
    for row in csv.DictReader(fh):
        print(row)
print(sorted(p.name for p in (root / "out").iterdir())[:6])
