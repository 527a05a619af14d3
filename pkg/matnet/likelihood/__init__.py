"""Output likelihoods of the models

All of them derive from likelihood.OutputLikelihood
"""
# when doing `import matnet.likelihood`
from . import bernoulli
from . import gaussian
from . import likelihood
from . import logistic

# when doing `from matnet.likelihood import *` (not recommended)
__all__ = ["bernoulli", "gaussian", "likelihood", "logistic", "make", "KINDS"]

KINDS = {
    "bernoulli": bernoulli.BernoulliLikelihood,
    "diag_gaussian": gaussian.GaussianLikelihood,
    "integrated_logistic": logistic.IntegratedLogisticLikelihood,
}


def make(kind: str, channels: int) -> likelihood.OutputLikelihood:
    """Return the output likelihood of the given kind

    :raises ValueError: for unknown kinds
    """
    try:
        return KINDS[kind](channels)
    except KeyError as e:
        raise ValueError(f"Unknown likelihood '{kind}', must be one of {list(KINDS)}") from e
