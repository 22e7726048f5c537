"""Meta-analysis of mediation studies.

Aggregate-data estimators (parameter- and correlation-based MASEM, the
bivariate random-effects path model), participant-level case-mix
standardization of natural indirect effects, integration of studies that
only measured treatment and mediator, and a simulation lab with Monte
Carlo ground truth.
"""

__version__ = "0.1.0"
