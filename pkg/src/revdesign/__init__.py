"""Reverse-designing lab: infer image-edit operations and normalized values
from (source image, edited image, vague command) triplets with a desk-scale
two-image vision-language model."""

__version__ = "0.1.0"

from .imgedit import EditOp, EditSpec, OP_NAMES, apply_op, apply_spec, synth_image
from .dataset import (
    GenConfig,
    Manifest,
    TripletRecord,
    build_manifest,
    gen_command,
    gen_record,
    read_manifest,
    render_ground_truth,
    split_assign,
    write_manifest,
)
from .prompting import (
    EncodedSample,
    PromptTemplate,
    TokenVocab,
    assemble,
    assemble_prompt,
    build_vocab,
    builtin_templates,
    register_special_tokens,
    select_and_render,
)
from .model import (
    ModelConfig,
    encode_image,
    forward,
    greedy_decode,
    init_special_embedding,
    load_checkpoint,
    project,
    save_checkpoint,
)
from .training import (
    ExperimentConfig,
    grad_check,
    heuristic_aux,
    lm_loss,
    mse_aux,
    pretrain_lm,
    pretrain_vision,
    train,
)
from .evalkit import (
    MetricsReport,
    ParsedPrediction,
    accuracy,
    evaluate,
    param_mse,
    parse_output,
    render_report,
)
