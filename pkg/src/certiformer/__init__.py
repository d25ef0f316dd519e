"""Certified robustness bounds for small Transformer text classifiers."""
from .bounds import IntervalBounds, LinearBounds, PerturbationSpec, concretize
from .engine import METHODS, BoundEngine, BoundResult, propagate
from .errors import (
    CertiformerError,
    ConfigError,
    DomainViolation,
    EmptyInput,
    FormatError,
    Misclassified,
    RangeOverflow,
    ShapeError,
    UnknownToken,
    UnsupportedShape,
    VersionError,
)
from .io import (
    VocabTable,
    generate_fixture,
    generate_planted_fixture,
    load_model,
    save_model,
    tokenize,
)
from .model import Hyper, TransformerModel, forward_eval, predict
from .program import Program, compile_model
from .relaxations import bound_divide, bound_multiply, relax_unary
from .verifier import (
    SearchConfig,
    certify_epsilon,
    delta_lower,
    enumerate_position_sets,
    importance_ranking,
    run_ablation,
    upper_bound_substitution,
    verify,
)

__version__ = "0.1.0"

__all__ = [
    "BoundEngine", "BoundResult", "CertiformerError", "ConfigError", "DomainViolation", "EmptyInput",
    "FormatError", "Hyper", "IntervalBounds", "LinearBounds", "METHODS", "Misclassified",
    "PerturbationSpec", "Program", "RangeOverflow", "SearchConfig", "ShapeError", "TransformerModel",
    "UnknownToken", "UnsupportedShape", "VersionError", "VocabTable", "bound_divide", "bound_multiply",
    "certify_epsilon", "compile_model", "concretize", "delta_lower", "enumerate_position_sets",
    "forward_eval", "generate_fixture", "generate_planted_fixture", "importance_ranking", "load_model",
    "predict", "propagate", "relax_unary", "run_ablation", "save_model", "tokenize",
    "upper_bound_substitution", "verify",
]
