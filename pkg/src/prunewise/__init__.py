"""Layer-removal model compression with treatment-effect guided selection.

Train a residual layer-stack classifier on a source domain, generate
compressed candidates by removing layer subsets (junction layers and the
decoder are briefly fine-tuned), estimate each removal's average treatment
effect on the model's predictions, and pick the candidate expected to
perform best on an unseen target domain with a forward stepwise regression
fitted on seen source-target pairs.
"""

from .analysis import layer_frequency, layer_importance_regression, spearman
from .compress import (
    CandidateSpec,
    ReconnectionPlan,
    build_candidate,
    finetune_candidate,
    plan_reconnection,
    sample_candidate_specs,
)
from .data import (
    DomainDataset,
    DomainPair,
    JsonlSchema,
    ShiftSpec,
    generate,
    load_jsonl,
    split,
    write_jsonl,
)
from .effects import KL, TOTAL_VARIATION, AteEstimate, estimate_ate, kl_divergence, tv_distance
from .errors import (
    DataFormatError,
    InputError,
    InsufficientDataError,
    PipelineError,
    PrunewiseError,
    PurityError,
    SingularityError,
    TrainingDivergence,
)
from .features import (
    CandidateRecord,
    assemble_record,
    indomain_f1,
    p_s_given_t,
    read_records,
    train_domain_classifier,
    write_records,
)
from .net import (
    Example,
    LayerStackModel,
    TrainConfig,
    deserialize,
    evaluate_macro_f1,
    forward,
    init_model,
    load_model,
    loss_and_grads,
    save_model,
    serialize,
    train,
)
from .pipeline import (
    ExperimentConfig,
    PairFold,
    SelectionReport,
    SelectionResult,
    evaluate_selection,
    fit_selector,
    load_config,
    make_pair_folds,
    run_all,
    run_training_pairs,
    select_for_unseen_pair,
)
from .regression import DesignMatrix, RegressionModel, ols_fit, predict, stepwise_fit

__version__ = "0.1.0"
