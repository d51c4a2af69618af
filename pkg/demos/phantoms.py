"""Render one synthetic subject across the age range and read its age back.

The ventricles grow and the cortex thins with age while everything else stays
fixed, so the analytic oracle can recover age from pixels alone.

    python demos/phantoms.py [out_dir]
"""
import os
import sys

from cyclediff.conditions import Condition, Sex
from cyclediff.io import write_pgm
from cyclediff.phantom import PhantomSpec, oracle_age, render_array, ventricle_fraction

out = sys.argv[1] if len(sys.argv) > 1 else "demo-phantoms"
os.makedirs(out, exist_ok=True)

print(f"{'age':>4} {'sex':>6} {'ventricle frac':>14} {'oracle age':>10}")
for sex in Sex:
    for age in (5, 20, 40, 60, 80, 95):
        img = render_array(PhantomSpec(Condition(age, sex), identity_seed=42))
        write_pgm(os.path.join(out, f"age{age:02d}-{sex.name.lower()}.pgm"), img)
        print(f"{age:4d} {sex.name.lower():>6} {ventricle_fraction(age):14.3f} {oracle_age(img):10.1f}")
print(f"wrote {out}/")
