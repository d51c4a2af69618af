"""Age one held-out subject through every decade with a trained checkpoint.

The source is inverted once; each target age reuses the same z_T.  The oracle
age of every output is printed next to its target.

    python demos/age_sweep.py CHECKPOINT [out_dir]
"""
import os
import sys

import numpy as np

from cyclediff.checkpoint import Checkpoint
from cyclediff.conditions import Condition, ConditionBatch, Sex
from cyclediff.diffusion import ddim_invert, ddim_sample
from cyclediff.io import write_pgm
from cyclediff.ndtensor import Tensor
from cyclediff.phantom import PhantomSpec, oracle_age, render_array
from cyclediff.pipeline import generative_model

ck = Checkpoint.load(sys.argv[1])
out = sys.argv[2] if len(sys.argv) > 2 else "demo-sweep"
os.makedirs(out, exist_ok=True)
model = generative_model(ck)

src = Condition(50.0, Sex.FEMALE)
img = render_array(PhantomSpec(src, identity_seed=7))
z_T = ddim_invert(model.eps_model, model.encode(img[None, None]), ConditionBatch.of([src]), model.schedule)

targets = np.arange(10.0, 100.0, 10.0)
cond = ConditionBatch(targets, np.zeros(len(targets), dtype=np.int64))
z, _ = ddim_sample(model.eps_model, Tensor(np.repeat(z_T.data, len(targets), axis=0)), cond, model.schedule)
imgs = model.decode(z)
print(f"source age {src.age:.0f}, oracle {oracle_age(img):.1f}")
for a, x in zip(targets, imgs):
    write_pgm(os.path.join(out, f"to-{a:02.0f}.pgm"), x)
    measured = oracle_age(x)
    print(f"target {a:4.0f}  oracle {'-' if measured is None else f'{measured:.1f}'}")
