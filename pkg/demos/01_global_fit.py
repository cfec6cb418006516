"""
Fitting the multivariate M-model to one simulated domain
========================================================

Three diseases on a 12 x 12 lattice, data drawn from the Scenario 1
between-disease covariance.  We fit one model to the whole domain and
compare what it recovers with the truth.
"""

# %%
# Simulate a data set.  ``scenario1_preset`` fixes the variances, the
# correlations and the intercepts; the expected counts come from a
# log-normal spread around 50.
import numpy as np

from mdmap.graph import lattice_graph
from mdmap.inference import CountPanel, FitConfig, fit_submodel
from mdmap.simulate import scenario1_preset, simulate_replicate

graph = lattice_graph(12, 12)
spec = scenario1_preset(graph, seed=3)
observed, true_risk = simulate_replicate(spec, 0)
data = CountPanel(observed, spec.expected, spec.disease_names, graph.area_ids)
print("areas:", graph.n_areas, " diseases:", data.n_diseases, " edges:", graph.n_edges)

# %%
# Fit.  The hyperparameter mode is found first, then 1000 joint draws of
# the hyperparameters and the log-risks are taken from the approximation.
fit = fit_submodel(data, graph, FitConfig(n_samples=1000, seed=0))
print("log marginal likelihood at the mode: %.2f" % fit.log_marginal)
print("Newton decrement at the hyper mode: %.1e" % fit.diagnostics["hyper_decrement"])

# %%
# Between-disease parameters against the values used to simulate.
truth = spec.true_params()
print("\n%-9s %7s %7s %7s   95%% interval" % ("param", "true", "mean", "sd"))
for name, draws in fit.param_samples().items():
    lo, hi = np.quantile(draws, [0.025, 0.975])
    print("%-9s %7.3f %7.3f %7.3f   [%6.3f, %6.3f]" % (name, truth[name], draws.mean(), draws.std(), lo, hi))

# %%
# Relative risks: posterior medians track the true surface closely, and
# most 95% intervals contain it.
med = fit.risks.median
inside = (fit.risks.q025 <= true_risk) & (true_risk <= fit.risks.q975)
rel = (med - true_risk) / true_risk
print("\nmean |relative error| of medians: %.3f" % np.abs(rel).mean())
print("interval coverage of the true risks: %.3f" % inside.mean())
print("cells with P(R > 1) > 0.9:", int((fit.risks.exceed > 0.9).sum()), "of", med.size)

# %%
# DIC and WAIC from draws of the Poisson means.
crit = fit.criteria()
print("\nDIC %.1f  (p_D %.1f)   WAIC %.1f  (p_WAIC %.1f)" % (crit.dic, crit.p_d, crit.waic, crit.p_waic))
