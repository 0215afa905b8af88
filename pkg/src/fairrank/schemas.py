"""JSON Schemas of the reports written by the harness and the CLI."""

_number = {"type": "number"}
_nullable_number = {"type": ["number", "null"]}

COVERAGE_REPORT = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "CoverageReport",
    "type": "object",
    "required": ["schema_version", "kind", "trials", "covered", "coverage_rate",
                 "coverage_rate_all", "abstentions", "settings", "records"],
    "properties": {
        "schema_version": {"const": 1},
        "kind": {"const": "coverage"},
        "trials": {"type": "integer", "minimum": 1},
        "covered": {"type": "integer", "minimum": 0},
        "coverage_rate": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "coverage_rate_all": {"type": "number", "minimum": 0, "maximum": 1},
        "abstentions": {"type": "integer", "minimum": 0},
        "settings": {"type": "object"},
        "generated_at": {"type": "string"},
        "records": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["trial", "alpha", "lambda_hat", "abstained", "test_ndcg",
                             "test_risk", "test_disparity", "det_ndcg", "det_disparity",
                             "cal_det_ndcg", "covered"],
                "properties": {
                    "trial": {"type": "integer", "minimum": 0},
                    "alpha": _number,
                    "lambda_hat": _nullable_number,
                    "abstained": {"type": "boolean"},
                    "test_ndcg": _number,
                    "test_risk": _number,
                    "test_disparity": _number,
                    "det_ndcg": _number,
                    "det_disparity": _number,
                    "cal_det_ndcg": _number,
                    "covered": {"type": "boolean"},
                },
            },
        },
    },
}

TRADEOFF_CURVE = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "TradeoffCurve",
    "type": "object",
    "required": ["schema_version", "kind", "settings", "pl", "deterministic", "rows"],
    "properties": {
        "schema_version": {"const": 1},
        "kind": {"const": "tradeoff"},
        "settings": {"type": "object"},
        "pl": {"type": "object"},
        "deterministic": {"type": "object"},
        "generated_at": {"type": "string"},
        "rows": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["lambda", "mean_ndcg", "mean_risk", "mean_disparity",
                             "mean_disparity_raw"],
                "properties": {k: _number for k in
                               ("lambda", "mean_ndcg", "mean_risk", "mean_disparity",
                                "mean_disparity_raw")},
            },
        },
    },
}

CALIBRATION_RESULT = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "CalibrationResult",
    "type": "object",
    "required": ["outcome", "alpha", "delta", "bound", "grid"],
    "properties": {
        "outcome": {"enum": ["selected", "abstain"]},
        "lambda_hat": _number,
        "alpha": _number,
        "delta": _number,
        "bound": {"enum": ["hb", "dkwm"]},
        "n": {"type": "integer"},
        "certified": {"type": "array", "items": _number},
        "grid": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["lambda", "r_hat", "r_tilde", "p_or_ucb", "disparity"],
                "properties": {
                    **{k: _number for k in ("lambda", "r_hat", "r_tilde", "p_or_ucb")},
                    "disparity": _nullable_number,
                },
            },
        },
    },
    "if": {"properties": {"outcome": {"const": "selected"}}},
    "then": {"required": ["lambda_hat"]},
}
