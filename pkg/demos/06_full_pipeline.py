"""The whole experiment as a script: synth -> features -> lda -> train -> sweep.

This is exactly what the CLI subcommands run; at this miniature scale the
whole thing takes a few seconds. Scale `--minutes` up (and use tdnn-desk's
defaults of 12 epochs) to reproduce the desk-scale experiment.
"""

import tempfile
from pathlib import Path

from openlid.cli import main

workdir = Path(tempfile.mkdtemp(prefix="openlid_demo_")) / "run"

# CMVN off is the informative ablation at this miniature scale: the synthetic
# languages are near-stationary, so per-utterance mean subtraction removes most
# of the frame-level class signal and the model would need far more data/epochs
# to learn from temporal structure alone.
stages = [
    ["synth", "--seed", "7", "--minutes", "0.3", "--langs-in", "3", "--langs-out", "1"],
    ["features", "--cmvn", "off", "--blocks", "mfcc,logmel,pitch"],
    ["lda", "--dim", "2"],
    ["train", "--model", "tdnn-desk", "--epochs", "4", "--seed", "0"],
    ["eval", "--threshold", "0.7"],
    ["sweep", "--grid", "0.1:0.05:0.9"],
]
for argv in stages:
    code = main(["--workdir", str(workdir), *argv])
    assert code == 0, f"stage {argv[0]} exited {code}"

print(f"\nartifacts in {workdir}:")
for path in sorted(workdir.iterdir()):
    if path.is_file():
        print(f"  {path.name}  ({path.stat().st_size} bytes)")

print("\nsweep.csv:")
for line in (workdir / "sweep.csv").read_text().splitlines():
    print(" ", line)
