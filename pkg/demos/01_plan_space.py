# coding: utf-8

# # Plan space and the optimizer
#
# A join graph holds tables, join edges and optional local selections. Every
# selection and every join edge is one coordinate of the selectivity vector.

# In[1]:

import numpy as np

from robustqo.plan_space import JoinGraph, cost, enumerate_all_plans, optimize

graph = JoinGraph.build(
    [("A", 200_000, False), ("B", 50_000, True), ("C", 1_000, False)],
    [("A", "B"), ("B", "C")],
)
for d in range(graph.dimension):
    print(d, graph.dim_label(d))


# The optimizer is a dynamic program over connected subsets with bushy trees
# and two join algorithms. With a tiny selectivity on B it picks nested loops.

# In[2]:

s_hat = np.array([1e-4, 2e-5, 1e-3])
plan, c = optimize(graph, s_hat)
print(plan.fingerprint, c)
print(plan.render())


# At a 200x larger selectivity the same plan is no longer the cheapest one.

# In[3]:

s_true = np.array([2e-2, 2e-5, 1e-3])
best, best_cost = optimize(graph, s_true)
print("plan chosen at the estimate:", cost(graph, plan, s_true))
print("best plan at the truth:     ", best_cost, best.fingerprint)


# Small graphs can be enumerated, which is how the tests check the optimizer.

# In[4]:

plans = enumerate_all_plans(graph)
print(len(plans), "plans;", "minimum matches:", min(cost(graph, p, s_true) for p in plans) == best_cost)
