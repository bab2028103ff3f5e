# coding: utf-8

# # The whole pipeline
#
# Profile, analyze, pool, choose; then cost the robust, traditional and
# recentered plans on shifted database instances.

# In[1]:

from robustqo import scenarios
from robustqo.workbench import load_scenario, run_pipeline
from robustqo.workbench.pipeline import simulate_instances

sc = load_scenario(scenarios.path("trap"))
r = run_pipeline(sc, seed=0)
print("sensitive dims:", r.analysis.selected)
for label, plan in (("robust", r.robust), ("traditional", r.traditional), ("recentered", r.recentered)):
    print("%-12s %-22s %12.1f" % (label, plan.fingerprint, r.in_model_penalty(plan.fingerprint)))
print(r.counters)


# In[2]:

plans = {"robust": r.robust, "traditional": r.traditional}
for row in simulate_instances(sc, plans):
    print(row.instance, {k: round(row.ratio(k), 3) for k in plans})


# The same runs are available from the command line, e.g.
#
#     robustqo --scenario trap.json --seed 0 plan
#     robustqo --scenario trap.json instances
#     robustqo --scenario trap.json pqo --anchors anchors.json --count 20

# In[3]:

from robustqo.workbench import cli

cli.run(["--scenario", str(scenarios.path("noise_free")), "plan", "--samples", "50"])
