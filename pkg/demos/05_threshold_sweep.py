"""Max-softmax threshold rejection: the three accuracies vs the threshold.

Synthetic cached probabilities stand in for a trained model: in-set inputs
get confident, mostly-correct predictions; out-of-set inputs get flatter
ones. Raising the threshold trades in-set accuracy for rejection accuracy;
overall accuracy peaks somewhere in between.
"""

import tempfile
from pathlib import Path

import numpy as np

from openlid import classify_open, evaluate, render_reports, threshold_sweep

rng = np.random.default_rng(1)
k, n_in, n_out = 7, 400, 200

rows, references = [], []
for _ in range(n_in):
    true = int(rng.integers(k))
    logits = rng.standard_normal(k)
    logits[true] += rng.uniform(1.0, 4.0)  # confident and usually right
    rows.append(np.exp(logits) / np.exp(logits).sum())
    references.append(true)
for _ in range(n_out):
    logits = 0.8 * rng.standard_normal(k)  # flatter: nothing matches well
    rows.append(np.exp(logits) / np.exp(logits).sum())
    references.append(None)
probs = np.vstack(rows)

single = classify_open(probs[0], threshold=0.5)
print(f"one decision: label={single.label} max_prob={single.max_prob:.3f}")

taus = [round(0.1 + 0.05 * i, 4) for i in range(17)]
reports = threshold_sweep(probs, references, taus)

print("\n tau   overall  in-set  out-of-set")
for r in reports:
    print(f" {r.threshold:4.2f}   {r.overall_acc:5.1f}   {r.in_set_acc:5.1f}      {r.out_of_set_acc:5.1f}")

best = max(reports, key=lambda r: r.overall_acc)
print(f"\nbest overall accuracy {best.overall_acc:.1f}% at threshold {best.threshold:g} "
      f"(in-set {best.in_set_acc:.1f}%, out-of-set {best.out_of_set_acc:.1f}%)")

out = Path(tempfile.mkdtemp(prefix="openlid_demo_")) / "sweep"
csv_path, svg_path = render_reports(reports, out)
print(f"wrote {csv_path} and {svg_path}")
