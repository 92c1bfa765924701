"""Universal multi-source domain adaptation with margin-based class weighting.

A small numpy library for adapting a classifier from several labeled
source domains with differing label sets to an unlabeled target that may
contain classes no source has. Submodules:

* :mod:`uman.labelspace` -- label-set size matrices, concrete class
  layouts, Jaccard similarities, membership masks;
* :mod:`uman.synth` -- seeded synthetic multi-domain Gaussian data with
  controllable domain gaps;
* :mod:`uman.nn` -- dense MLP numerics with tape-based reverse-mode
  differentiation;
* :mod:`uman.core` -- prediction margins, the running per-class margin
  register, weighted adversarial training, rejecting inference;
* :mod:`uman.evaluate` -- the per-class + unknown evaluation protocol,
  reference baselines, and feature-alignment probes;
* :mod:`uman.config` / :mod:`uman.cli` -- JSON experiment configs and the
  ``uman`` command-line runner.
"""

from .labelspace import (
    LabelConfigError,
    LabelPartition,
    MembershipMasks,
    UmdaMatrix,
    jaccard_source_source,
    jaccard_source_target,
    matrix_from_partition,
    membership_masks,
    partition_from_matrix,
)
from .synth import DomainDataset, SyntheticSpec, batch_iterator, export_csv, generate, import_csv
from .nn import Mlp, NonFiniteGradientError, Tape, Value
from .core import (
    UNKNOWN,
    Hyperparams,
    LossReport,
    MarginResult,
    TargetMarginRegister,
    TrainResult,
    TrainingDiverged,
    batch_margins,
    classification_loss,
    domain_loss,
    extract_features,
    grl_lambda,
    infer,
    margin_of,
    margin_vector,
    normalize_weights,
    predict_classes,
    source_weight,
    target_weight,
    train,
)
from .evaluate import (
    METHODS,
    PROBE_KINDS,
    EvalReport,
    ProbeReport,
    alignment_probe,
    baseline_source_only,
    baseline_unweighted_adversarial,
    evaluate,
    run_method,
    score_predictions,
    transfer_gain,
)
from .config import (
    ExperimentConfig,
    KNOWN_METHODS,
    SWEEP_AXES,
    config_hash,
    derive_sweep_cell,
    load_config,
    parse_config,
)

__version__ = "0.1.0"
