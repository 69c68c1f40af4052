"""
Phantoms and dose metrics
=========================

Draw a synthetic thoracic slice, look at its analytic dose, and score a
deliberately wrong prediction with the dose metrics.
"""

import numpy as np

from ssmdose.metrics import dvh_curve, evaluate
from ssmdose.phantoms import STRUCTURE_NAMES, PhantomSpec, generate_phantom

ph = generate_phantom(PhantomSpec(seed=3))
print("structure", ph.structure.shape, "dose", ph.dose.shape)
for ch, name in enumerate(STRUCTURE_NAMES[1:], start=1):
    print(f"  {name:12s} {int(ph.structure[ch].sum()):5d} pixels")

# dose is 1 in the target and falls off as exp(-distance / 8 px)
print("dose inside target:", ph.dose[0][ph.ptv].min())

# a prediction that is 10% hot everywhere in the body
pred = np.where(ph.body, 1.1 * ph.dose[0], 0.0)
rep = evaluate(pred, ph.dose[0], ph.body, ph.structure, STRUCTURE_NAMES)
print(f"dose score {rep.dose_score:.4f}  dvh score {rep.dvh_score:.4f}  HI {rep.hi:.4f}")
for name, diffs in rep.per_structure.items():
    print(f"  {name:12s}", {k: round(v, 4) for k, v in diffs.items()})

c = dvh_curve(ph.dose[0], ph.organ("heart"))
print("heart receives >= 0.5 in", c.volume_fraction[np.searchsorted(c.thresholds, 0.5)], "of its volume")
