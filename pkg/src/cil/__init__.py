"""Invariance learning over continuously indexed domains.

Trains a classifier whose features carry no first-moment information about
the continuous domain index beyond what the label already explains, by
pitting an unconditional domain regressor against a label-conditioned one.
Ships the discrete-environment baselines (ERM, IRMv1, REx, GroupDRO), the
synthetic benchmarks, exact tabular oracles for the penalty, and a
Monte-Carlo study of why variance penalties break down when domains are many
and small.
"""

from .datagen import Dataset, Schedule, gen_logit, colorize_mnist, load_csv, load_idx
from .estimators import (
    CILClassifier,
    ERMClassifier,
    EqualWidthDomainBinner,
    GroupDROClassifier,
    IRMv1Classifier,
    QuantileDomainBinner,
    RExClassifier,
)
from .models import FeatureMask, MlpSpec, ModelBundle, init_bundle
from .objectives import PenaltySpec, TabularDist, cil_penalty_oracle, conditional_mean_oracle
from .splitter import EnvAssignment, equal_split, quantile_split
from .trainer import RunHistory, TrainConfig, evaluate, sgd_train, sgda_train

__version__ = "0.1.0"

__all__ = [
    "CILClassifier",
    "Dataset",
    "ERMClassifier",
    "EnvAssignment",
    "EqualWidthDomainBinner",
    "FeatureMask",
    "GroupDROClassifier",
    "IRMv1Classifier",
    "MlpSpec",
    "ModelBundle",
    "PenaltySpec",
    "QuantileDomainBinner",
    "RExClassifier",
    "RunHistory",
    "Schedule",
    "TabularDist",
    "TrainConfig",
    "cil_penalty_oracle",
    "colorize_mnist",
    "conditional_mean_oracle",
    "equal_split",
    "evaluate",
    "gen_logit",
    "init_bundle",
    "load_csv",
    "load_idx",
    "quantile_split",
    "sgd_train",
    "sgda_train",
    "__version__",
]
