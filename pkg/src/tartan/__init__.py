"""End-task aware auxiliary training lab.

Train a shared-body multi-task model under four regimes (fine-tuning only,
pretrain-then-finetune, fixed-weight multi-tasking, online meta-learned task
weighting), validate the hypergradient approximation chain on analytic
quadratic bilevel problems, and compare methods across seeds with permutation
tests.
"""

__version__ = "0.1.0"

from .autodiff import (
    GradientMap,
    NonFiniteError,
    ParamSet,
    RecordConsumedError,
    Tensor,
    backward,
    forward_mlp,
    grad_check,
    loss,
)
from .bilevel import (
    QuadraticTaskSet,
    exact_hypergradient,
    finite_difference_hypergradient,
    identity_hessian_approx,
    neumann_inverse,
    one_step_approx,
    solve_inner,
)
from .model import (
    BodySpec,
    HeadSpec,
    MultiTaskModel,
    body_representation,
    build_model,
    load_checkpoint,
    register_task_head,
    reinit_meta_head,
    save_checkpoint,
)
from .prng import PRNG_ALGORITHM, PRNGSpec, substream
from .stats import SampleSet, aggregate_runs, format_mean_std, permutation_test
from .strategies import (
    DivergenceError,
    RunRecord,
    TaskWeights,
    TrainerConfig,
    compute_alignment,
    early_stop_check,
    estimate_meta_head,
    finetune,
    pretrain_then_finetune,
    train_multitask,
    train_tartan_meta,
    update_task_weights,
)
from .tasks import (
    LabeledDataset,
    SyntheticSpec,
    Task,
    derive_domain_task,
    derive_masked_reconstruction_task,
    generate_synthetic_classification,
    load_csv_dataset,
)
