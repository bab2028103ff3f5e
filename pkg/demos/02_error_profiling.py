# coding: utf-8

# # Error profiling
#
# Observations pair an estimated and an actual cardinality for a small
# subquery pattern (a querylet). Errors live on the log scale,
# eps = ln(estimate / actual).

# In[1]:

import numpy as np

from robustqo.error_profiling import JointErrorDistribution, build_models, ingest_observations, recenter
from robustqo.workbench import load_scenario
from robustqo.workbench.scenario import generate_observations
from robustqo import scenarios

sc = load_scenario(scenarios.path("trap"))
obs = list(generate_observations(sc, 200, np.random.default_rng(0)))
print(len(obs), "observations")
print(obs[0].to_line())


# In[2]:

store = ingest_observations(obs)
for q, profile in sorted(store.profiles.items(), key=lambda kv: kv[0].canonical()):
    e = profile.errors
    print(q.canonical(), len(e), "mean eps %.3f" % e.mean())


# Each dimension gets two kernel density estimates of the error, one for
# small estimates and one for large ones, split at the median estimate.

# In[3]:

models = build_models(sc.graph, store)
for m in models:
    print(m.dim, "cutoff %.3g" % m.cutoff, "low mean %.3f" % m.low.mean, "high mean %.3f" % m.high.mean)


# The conditional distribution of true selectivities given one estimate vector.
# Recentering replaces the estimate by the model's expected truth.

# In[4]:

_, s_hat, _ = sc.query()
dist = JointErrorDistribution(tuple(models), s_hat)
draws = dist.sample(np.random.default_rng(1), 5)
print(draws)
print("estimate  ", s_hat)
print("recentered", recenter(dist))
