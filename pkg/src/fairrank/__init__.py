"""Risk-controlled thresholded Plackett-Luce ranking for fair exposure."""

__version__ = "0.1.0"

from .dataset import (  # noqa: E402
    Document,
    QueryCollection,
    ScoredQuery,
    SplitSpec,
    filter_no_relevant,
    parse_jsonl,
    parse_svmlight,
    split,
)
from .estimator import RcScoreTransformer, RiskControlledTPL, ThresholdedPLRanker  # noqa: E402
from .plmodel import TplConfig  # noqa: E402
from .riskcontrol import CalibrationResult, RiskSpec  # noqa: E402

__all__ = [
    "CalibrationResult",
    "Document",
    "QueryCollection",
    "RcScoreTransformer",
    "RiskControlledTPL",
    "RiskSpec",
    "ScoredQuery",
    "SplitSpec",
    "ThresholdedPLRanker",
    "TplConfig",
    "filter_no_relevant",
    "parse_jsonl",
    "parse_svmlight",
    "split",
]
