# coding: utf-8

# # Dose-volume metrics and the plan scorecard

# In[1]:

import numpy as np

from diffkt3d.phantom import PhantomConfig, generate_case
from diffkt3d.scorecard import default_spec, dose_at_volume, raw_reward, rescale_prescription, volume_at_dose

case = generate_case(11, PhantomConfig(site="han"))
dose = case.volumes["dose"].values
ptv = case.mask("ptv")
print("PTV D95 =", round(dose_at_volume(dose, ptv, 95), 2), "Gy")
print("PTV D2  =", round(dose_at_volume(dose, ptv, 2), 2), "Gy")
print("PTV V95% =", round(volume_at_dose(dose, ptv, 0.95 * case.prescription_gy), 3))


# The default scorecards are illustrative stand-ins, shipped as JSON. They
# are rescaled to each case's prescription before scoring.

# In[2]:

spec = rescale_prescription(default_spec(case.site), case.prescription_gy)
rep = raw_reward(dose, case, spec, reference=dose)
for e in rep.entries:
    print(f"{e['structure']:5s} {e['metric']:6s} value {e['value']:7.2f}  score {e['score']:5.2f} x {e['weight']}")
print("r_raw", round(rep.r_raw, 2), "hinge", rep.hinge, "missing", rep.missing)


# Scaling the dose down loses PTV coverage and trips the hard constraint.

# In[3]:

for f in (1.0, 0.9, 0.7, 0.0):
    r = raw_reward(f * dose, case, spec, reference=dose)
    print(f"dose x {f:.1f}: r_raw {r.r_raw:6.2f}  hinge {r.hinge:8.2f}  anchored {r.anchored():8.2f}")
