"""Parameter-efficient transfer of a transformer CTC recognizer via adapters."""

from .checkpoint import KIND_DELTA, KIND_FULL, load_checkpoint, read_header, save_checkpoint
from .ctc import (
    DecodeResult,
    ctc_loss,
    ctc_loss_bruteforce,
    edit_distance,
    greedy_decode,
    wer,
)
from .model import (
    AdapterConfig,
    Model,
    ModelConfig,
    adapter_forward,
    architecture_digest,
    build_model,
    insert_adapters,
    parameter_manifest,
    top_n_layers,
)
from .synthdata import (
    Dataset,
    SynthSpec,
    Utterance,
    generate,
    generate_role,
    load_dataset,
    make_language_pair,
    save_dataset,
    split_dataset,
)
from .tensor import Tensor, backward, finite_diff_check, no_grad
from .train import (
    Batch,
    EvalReport,
    Schedule,
    StepReport,
    TrainConfig,
    Trainer,
    evaluate,
    lr_at,
    run_training,
)
from .transfer import (
    ParamReport,
    TransferPolicy,
    apply_policy,
    count_params,
    count_params_config,
    delta_checkpoint_size,
    storage_projection,
)

__version__ = "0.1.0"
