"""Desk-scale context-compression laboratory: python surface.

The heavy lifting lives in the C++ core (`ctxcomp._core`); this package
re-exports the operations that are useful from notebooks and scripts.
"""

from ._core import (  # noqa: F401
    AE,
    BOS,
    EOS,
    PAD,
    VOCAB_SIZE,
    CapacityError,
    ConfigError,
    ContractError,
    DataError,
    NumericError,
    bleu4,
    ce_decomposition,
    correlate,
    detokenize,
    entropy_bits,
    feasible,
    flops_estimate,
    generate,
    lossless_rate,
    lr_schedule,
    mixture_fractions,
    per_token_entropy,
    pretrain_lm,
    rate_distortion,
    rouge_l,
    tier_param_count,
    token_f1,
    tokenize,
)

__version__ = "0.1.0"
