# coding: utf-8

# # Reusing robust-plan work across query instances
#
# An anchor keeps the error models, the sample cache and the best candidates
# for one estimate vector. A nearby estimate vector reuses them if the KL
# divergence between the two conditional distributions is below ln(S).

# In[1]:

import numpy as np

from robustqo import scenarios
from robustqo.plan_space import call_tally
from robustqo.pqo import register_anchor, select_for_query
from robustqo.workbench import load_scenario
from robustqo.workbench.pipeline import error_distribution, profile_store, stage_seeds

sc = load_scenario(scenarios.path("trap"))
_, s_hat, _ = sc.query()
dist = error_distribution(sc, profile_store(sc, stage_seeds(0)[0]), s_hat)
anchor = register_anchor("q", sc.graph, dist, sc.penalty, 500, np.random.default_rng(0))
print("sensitive dims", anchor.sensitive_dims, "threshold %.3f" % np.log(anchor.n_samples))
print([c.fingerprint for c in anchor.candidates])


# Shifting the selection estimate: small shifts reuse, large ones fall back.
# The reuse path makes no optimizer or cost calls.

# In[2]:

rng = np.random.default_rng(1)
for shift in (0.0, 0.5, 1.0, 2.0, 4.0):
    before = call_tally()
    d = select_for_query(anchor, s_hat * [np.exp(shift), 1, 1], rng=rng)
    calls = {k: call_tally()[k] - before[k] for k in before}
    print("shift %.1f  KL %8.3f  %-8s %s  calls %s" % (shift, d.kl, d.outcome.value, d.chosen, calls))


# Anchors persist as JSON and reload byte for byte.

# In[3]:

from robustqo.pqo import AnchorEntry

text = anchor.dumps()
print(len(text), "bytes;", AnchorEntry.loads(text, sc.graph).dumps() == text)
