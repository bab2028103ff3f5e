# coding: utf-8

# # Robust plan selection
#
# Sample true selectivities over the sensitive dimensions, keep every plan
# that is optimal somewhere, then score each by its expected penalty on the
# same samples. The optima are cached so scoring needs no optimizer calls.

# In[1]:

import numpy as np

from robustqo import scenarios
from robustqo.plan_space import CallCounters, PlanSpace, optimize
from robustqo.robust_select import build_pool, choose_robust, evaluate_pool
from robustqo.workbench import load_scenario
from robustqo.workbench.pipeline import error_distribution, profile_store, stage_seeds

sc = load_scenario(scenarios.path("trap"))
_, s_hat, _ = sc.query()
dist = error_distribution(sc, profile_store(sc, stage_seeds(0)[0]), s_hat)
trad, _ = optimize(sc.graph, s_hat)

counters = CallCounters()
space = PlanSpace(sc.graph, counters)
pool, cache = build_pool(space, dist.restrict([0]), 200, np.random.default_rng(0), include=trad)
print(pool.occurrence_counts)
print("after pool build:", counters.snapshot())


# In[2]:

evaluated = evaluate_pool(space, pool, cache, sc.penalty)
print("after evaluation:", counters.snapshot())
for e in sorted(evaluated, key=lambda e: e.expected_penalty):
    print("%-22s %12.1f" % (e.fingerprint, e.expected_penalty))


# In[3]:

choice = choose_robust(evaluated)
print("traditional:", trad.fingerprint)
print("robust:     ", choice.plan.fingerprint, choice.expected_penalty)
