# coding: utf-8

# # Penalty functions
#
# A penalty compares a plan's cost with the optimal cost at the same true
# selectivities. The threshold form forgives anything within a factor 1 + tau.

# In[1]:

import numpy as np

from robustqo.penalty import PenaltySpec, PenaltyVariant, expected_penalty_arrays, penalty

threshold = PenaltySpec()
print(threshold)
print(penalty(threshold, 200, 100), penalty(threshold, 300, 100))


# In[2]:

for v in PenaltyVariant:
    if v is PenaltyVariant.VARIANCE:
        continue
    print(v.value, penalty(PenaltySpec(v), 300, 100))


# Expected penalties average over samples. Importance weights enter
# unnormalized, as sum(w * p) / n.

# In[3]:

rng = np.random.default_rng(0)
opt = rng.uniform(10, 100, size=1000)
plan = opt * rng.uniform(1, 4, size=1000)
print(expected_penalty_arrays(threshold, plan, opt))
print(expected_penalty_arrays(PenaltySpec(PenaltyVariant.VARIANCE), plan, opt))
