"""qlrt: block-wise k-bit quantization, low-rank adapters, paged optimizer
state, and tournament evaluation, verifiable at desk scale."""

from .errors import (
    QlrtError,
    CorruptDataError,
    ContainerError,
    BadMagicError,
    UnsupportedVersionError,
    TruncatedFileError,
    ChecksumMismatchError,
    JudgmentFormatError,
    DegenerateSampleError,
    TrainingDivergedError,
)
from .codebooks import (
    CODEBOOK_NAMES,
    Codebook,
    Fp4Variant,
    get_codebook,
    inv_normal_cdf,
    make_fp4_codebook,
    make_int_codebook,
    make_nf_codebook,
    make_nf_midpoint_codebook,
)
from .blockquant import BlockQuantized, dequantize, pack_codes, quantize, unpack_codes
from .doublequant import (
    DQConstants,
    Fp8Spec,
    bits_per_param,
    decode_fp8,
    dq_compress,
    dq_decompress,
    encode_fp8,
)
from .container import inspect_header, load, save
from .qlora import (
    DenseLinear,
    Layer,
    LoraAdapter,
    QLinear,
    ToyModel,
    attach_adapters,
    lora_init,
    quantize_dense_stack,
)
from .paging import Pager, PagerConfig, Slab, StatePage, pager_open, with_page
from .training import (
    AdamOptimizer,
    MoonsTask,
    PagedMomentStore,
    PlainMomentStore,
    RegressionTask,
    TrainConfig,
    TrainReport,
    build_model,
    clip_global_norm,
    make_task,
    run_toy_training,
    train_toy,
)
from .elo import (
    EloConfig,
    JudgmentRecord,
    RatingRow,
    RatingTable,
    elo_update,
    expected_score,
    load_judgments,
    run_tournament,
)
from .analysis import (
    MemoryConfig,
    MemoryReport,
    NormalityReport,
    QuantConfig,
    QuantErrorRow,
    ShapiroResult,
    memory_report,
    normality_scan,
    quant_error_report,
    shapiro_wilk,
)

__version__ = "0.1.0"

__all__ = [
    "QlrtError",
    "CorruptDataError",
    "ContainerError",
    "BadMagicError",
    "UnsupportedVersionError",
    "TruncatedFileError",
    "ChecksumMismatchError",
    "JudgmentFormatError",
    "DegenerateSampleError",
    "TrainingDivergedError",
    "CODEBOOK_NAMES",
    "Codebook",
    "Fp4Variant",
    "get_codebook",
    "inv_normal_cdf",
    "make_fp4_codebook",
    "make_int_codebook",
    "make_nf_codebook",
    "make_nf_midpoint_codebook",
    "BlockQuantized",
    "dequantize",
    "pack_codes",
    "quantize",
    "unpack_codes",
    "DQConstants",
    "Fp8Spec",
    "bits_per_param",
    "decode_fp8",
    "dq_compress",
    "dq_decompress",
    "encode_fp8",
    "inspect_header",
    "load",
    "save",
    "DenseLinear",
    "Layer",
    "LoraAdapter",
    "QLinear",
    "ToyModel",
    "attach_adapters",
    "lora_init",
    "quantize_dense_stack",
    "Pager",
    "PagerConfig",
    "Slab",
    "StatePage",
    "pager_open",
    "with_page",
    "AdamOptimizer",
    "MoonsTask",
    "PagedMomentStore",
    "PlainMomentStore",
    "RegressionTask",
    "TrainConfig",
    "TrainReport",
    "build_model",
    "clip_global_norm",
    "make_task",
    "run_toy_training",
    "train_toy",
    "EloConfig",
    "JudgmentRecord",
    "RatingRow",
    "RatingTable",
    "elo_update",
    "expected_score",
    "load_judgments",
    "run_tournament",
    "MemoryConfig",
    "MemoryReport",
    "NormalityReport",
    "QuantConfig",
    "QuantErrorRow",
    "ShapiroResult",
    "memory_report",
    "normality_scan",
    "quant_error_report",
    "shapiro_wilk",
    "__version__",
]
