"""Count-outcome response surfaces: Poisson GLM and log-linear BART."""
from .bart import BARTConfig, BARTPosterior, TreeEnsemble, fit_loglinear_bart
from .diagnostics import MoranResult, morans_i, region_weights
from .glm import GLMConfig, GLMParams, GLMPosterior, fit_poisson_glm
from .table import OutcomeTable, OutcomeValidationError, read_outcome_csv, write_outcome_csv

__all__ = [
    "BARTConfig", "BARTPosterior", "TreeEnsemble", "fit_loglinear_bart",
    "MoranResult", "morans_i", "region_weights",
    "GLMConfig", "GLMParams", "GLMPosterior", "fit_poisson_glm",
    "OutcomeTable", "OutcomeValidationError", "read_outcome_csv", "write_outcome_csv",
    "predict_rate",
]


def predict_rate(draw, x, z, g, offset):
    """``offset * f(x, z, g)`` for one GLMParams or TreeEnsemble draw."""
    import numpy as np

    x = np.atleast_2d(np.asarray(x, dtype=float))
    if isinstance(draw, TreeEnsemble):
        F = np.column_stack([x, np.broadcast_to(z, len(x)), np.broadcast_to(g, len(x))])
        logf = draw.predict_log(F)
    else:
        logf = draw.log_rate_factor(x, z, g)
    return np.asarray(offset, dtype=float) * np.exp(logf)
