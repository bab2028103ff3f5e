# coding: utf-8

# # Sensitivity analysis
#
# Which selectivity errors actually matter for the plan the optimizer picked?
# First the methods on an analytic benchmark, then on a query.

# In[1]:

import math

import numpy as np

from robustqo.sensitivity import FunctionObjective, UniformBox, morris, sobol


def ishigami(x, a=7.0, b=0.1):
    return np.sin(x[:, 0]) + a * np.sin(x[:, 1]) ** 2 + b * x[:, 2] ** 4 * np.sin(x[:, 0])


box = UniformBox(np.full(3, -math.pi), np.full(3, math.pi))
sc = sobol(FunctionObjective(ishigami), box, 2**14, np.random.default_rng(0))
print("first order", np.round(sc.per_dim, 3))  # about 0.314, 0.442, 0
print("total order", np.round(sc.total_order, 3))  # about 0.558, 0.442, 0.244
print("evaluations", sc.evaluations)


# Morris elementary effects are exact on linear functions.

# In[2]:

lin = FunctionObjective(lambda x: 3 * x[:, 0] - 0.5 * x[:, 1])
box2 = UniformBox(np.zeros(3), np.ones(3))
print(morris(lin, box2, 20, np.random.default_rng(0)).per_dim)


# On a query the objective is the penalty of the traditional plan at sampled
# true selectivities. Sample counts double until the selected set is stable.

# In[3]:

from robustqo import scenarios
from robustqo.workbench import load_scenario
from robustqo.workbench.pipeline import analyze, error_distribution, profile_store, stage_seeds

scen = load_scenario(scenarios.path("star"))
_, s_hat, _ = scen.query()
obs_rng, sens_rng = stage_seeds(0)[:2]
dist = error_distribution(scen, profile_store(scen, obs_rng), s_hat)
a = analyze(scen, dist, sens_rng)
print("traditional plan:", a.traditional.fingerprint)
for d in range(scen.graph.dimension):
    print("%-8s first %.4f  total %.4f" % (scen.graph.dim_label(d), a.scores.per_dim[d], a.scores.total_order[d]))
print("sensitive:", a.selected, "after", a.converged.rounds, "rounds, K =", a.scores.K)
