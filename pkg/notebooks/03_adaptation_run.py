# coding: utf-8

# # Adapting a two-path segmenter to a shifted domain
#
# Two students are trained side by side. The source student sees source-style
# features and the target student sees target-style features of the same images.
# A mean teacher provides pseudo-labels on unlabelled target patches, and two patch
# discriminators align features across domains. This run is small enough for a laptop CPU.
# Single runs vary with the seed. Short runs (a few hundred steps) can favour the baseline,
# because self-training needs the teacher to settle first.

# In[1]:

import logging

from stdaseg.data import ShiftSpec, synth_dataset
from stdaseg.train import TrainConfig, evaluate, fit

logging.basicConfig(level=logging.INFO, format="%(message)s")
source, target = synth_dataset(seed=101, n_tiles=8, shift=ShiftSpec((2, 0, 1)))
ITERS = 800


# A source-only baseline: one path, no disentangling, no self-training, no adversary.

# In[2]:

base = dict(max_iters=ITERS, batch_size=4, patch_size=64, main_optimizer="adam", main_lr=1e-3, seed=1)
source_only = TrainConfig(**base, dual_path=False, use_ddm=False, lam=0.0, beta=0.0)
ckpt_base = fit(source_only, source, target)
print("source-only target mIoU", round(evaluate(ckpt_base, target).miou * 100, 1))


# The full method with a short self-training burn-in while the teacher catches up.

# In[3]:

full = TrainConfig(**base, alpha=0.9, st_burn_in=100)
ckpt_full = fit(full, source, target)
report = evaluate(ckpt_full, target)
print("adapted target mIoU", round(report.miou * 100, 1))
print(report.to_table())
