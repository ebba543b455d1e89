"""Causal effects of emissions controls under wind-driven interference.

Modules: ``grid`` (rasters, facilities, regions), ``transport``
(advection-diffusion operators and the SAR likelihood), ``mcmc`` (transport
posterior), ``exposure`` (source-receptor matrix and upwind exposure),
``outcome`` (Poisson GLM, log-linear BART, Moran's I), ``effects``
(estimands and cut pooling), ``simulate`` (synthetic replication studies)
and ``cli``.
"""
__version__ = "0.1.0"
