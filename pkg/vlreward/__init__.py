from .datapipe import (
    FinetuneDataset,
    PairSampler,
    SampleTuple,
    TCNSampler,
    VIPSampler,
    batch_iter,
    build_dataset,
    reassign_views,
    split,
)
from .encoders import (
    EncoderConfig,
    ImageEncoder,
    LoraAdapter,
    SimilarityFn,
    TextEncoder,
    build_encoders,
    encode_image,
    encode_text,
    load_checkpoint,
    merge_lora,
    save_checkpoint,
    similarity,
)
from .evalbench import (
    BenchmarkConfig,
    ConstantRewardModel,
    EncoderRewardModel,
    EvalReport,
    NegatedRewardModel,
    OracleRewardModel,
    PairwiseBenchmark,
    build_pairwise,
    combine_reports,
    full_eval,
    pairwise_accuracy,
    to_markdown,
    voc,
    voc_report,
)
from .numcore import ComputationTape, Tensor, grad_check, l2_normalize, logsumexp, matmul, no_grad, norm
from .objectives import (
    OBJECTIVE_TAGS,
    EmbeddingBatch,
    ObjectiveConfig,
    build_objective,
    loss_infonce,
    loss_liv,
    loss_r3m,
    loss_tcn,
    loss_tcn_text,
    loss_triplet,
    loss_vip,
    loss_vip_text,
)
from .synthworld import (
    Rollout,
    RolloutArchive,
    RolloutConfig,
    SuiteConfig,
    TaskSpec,
    ViewRenderer,
    gen_rollout,
    generate_archive,
    ground_truth_reward,
    make_task_suite,
    render_view,
)
from .training import OptimizerState, TrainConfig, TrainedModel, adam_step, cosine_lr, train
