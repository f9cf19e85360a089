"""Collaborative decoding engine.

Routes next-token generation between an aligned model and a pretrained
knowledge model using a critical-token classifier, alongside entropy-routed
and soft-mixing variants, the critical-token dataset pipeline, and an
evaluation harness.
"""

from .core import (
    DecisionLabel,
    GenerationTrace,
    MixtureWeights,
    PrefixTriple,
    TokenDistribution,
    TokenId,
    Vocabulary,
    argmax,
    entropy,
    mix,
    sample,
    softmax_with_temperature,
)
from .decoding import (
    GenerationResult,
    Strategy,
    StrategyConfig,
    cost_report,
    entropy_cds,
    generate,
    model_cds,
    run_strategy,
    self_cds,
    soft_mixing_cds,
)
from .models import (
    FewShotSpec,
    LanguageModel,
    NGramModel,
    RemoteModel,
    TableModel,
    WhitespaceTokenizer,
    render_fewshot_prefix,
)

__version__ = "0.1.0"

__all__ = [
    "DecisionLabel",
    "FewShotSpec",
    "GenerationResult",
    "GenerationTrace",
    "LanguageModel",
    "MixtureWeights",
    "NGramModel",
    "PrefixTriple",
    "RemoteModel",
    "Strategy",
    "StrategyConfig",
    "TableModel",
    "TokenDistribution",
    "TokenId",
    "Vocabulary",
    "WhitespaceTokenizer",
    "argmax",
    "cost_report",
    "entropy",
    "entropy_cds",
    "generate",
    "mix",
    "model_cds",
    "render_fewshot_prefix",
    "run_strategy",
    "sample",
    "self_cds",
    "soft_mixing_cds",
    "softmax_with_temperature",
    "__version__",
]
