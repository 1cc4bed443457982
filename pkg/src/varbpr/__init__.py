"""Implicit-feedback ranking with variational bag posteriors.

Train matrix-factorization rankers with plain pairwise loss (bpr), the
compressed bag objective (varbpr), or its uncompressed double-sum variant
(varbpr_elbo); encode exposure/suppression priors from popularity, quality,
and hardness signals; and reproduce the accuracy / exposure-control /
robustness / bound-verification experiments from the CLI.
"""

from .dataio import (
    InteractionLog,
    SignalBuffer,
    SplitBundle,
    compute_signals,
    inject_noise,
    load_ratings,
    split_clean_test,
    split_implicit,
)
from .inference import (
    InferenceConfig,
    PosteriorPair,
    PriorPair,
    encode_prior,
    hardness_scores,
    interest_centers,
    posterior_negative,
    posterior_positive,
    solve_posteriors,
)
from .learning import (
    AdamState,
    EmbeddingModel,
    TrainConfig,
    TrainingDivergedError,
    adam_step,
    bpr_loss,
    elbo_loss,
    load_checkpoint,
    save_checkpoint,
    train,
    varbpr_gradients,
    varbpr_loss,
)
from .evaluation import (
    DiagnosticsRow,
    EvalSettings,
    aplt_at_k,
    jensen_gap_probe,
    kl_compliance,
    likelihood_probe,
    ndcg_at_k,
    rank_topk,
    recall_at_k,
)
from .sampler import EnrichedInteraction, epoch_schedule, sample_bag
from .mathcore import entropy, kl_divergence, log_sigmoid, maclaurin_remainder, stable_softmax

__version__ = "0.1.0"
