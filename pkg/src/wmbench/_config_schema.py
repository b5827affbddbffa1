"""JSON Schema of the run configuration file."""

from typing import Any, Dict

from .distortions import DistortionKind

_DISTORTION_IDS = sorted({kind.attack_id for kind in DistortionKind} | {kind.value for kind in DistortionKind})

_PROBABILITY = {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}
_EPSILONS = {
    "type": "array",
    "items": {"type": "number", "minimum": 0, "maximum": 1},
    "minItems": 1,
}

DATASET_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "properties": {
        "id": {"type": "string", "minLength": 1},
        "manifest": {"type": "string", "minLength": 1},
    },
    "required": ["id", "manifest"],
    "additionalProperties": False,
}

WATERMARK_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "properties": {
        "seed": {"type": "integer"},
        "length": {"type": "integer", "minimum": 1},
        "strength": {"type": "number", "minimum": 0},
        "block_size": {"type": "integer", "minimum": 2},
        "coefficient_pair": {
            "type": "array",
            "items": {
                "type": "array",
                "items": {"type": "integer", "minimum": 0},
                "minItems": 2,
                "maxItems": 2,
            },
            "minItems": 2,
            "maxItems": 2,
        },
        "message_hex": {"type": "string", "pattern": "^[0-9a-fA-F]+$"},
    },
    "additionalProperties": False,
}

ATTACKS_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "properties": {
        "distortions": {
            "type": "array",
            "items": {"type": "string", "enum": _DISTORTION_IDS},
            "uniqueItems": True,
        },
        "rcrop_mode": {"type": "string", "enum": ["remove", "retain"]},
        "include_baseline": {"type": "boolean"},
        "embedding": {
            "type": "object",
            "properties": {
                "enabled": {"type": "boolean"},
                "epsilons": _EPSILONS,
                "encoder_seed": {"type": "integer"},
                "output_dim": {"type": "integer", "minimum": 1},
                "iterations": {"type": "integer", "minimum": 0},
            },
            "additionalProperties": False,
        },
        "surrogate": {
            "type": "object",
            "properties": {
                "enabled": {"type": "boolean"},
                "settings": {
                    "type": "array",
                    "items": {"type": "string", "enum": ["UnWMvsWM", "RealVsWM", "WM1vsWM2"]},
                    "uniqueItems": True,
                },
                "train_manifest": {"type": "string"},
                "real_manifest": {"type": "string"},
                "epsilons": _EPSILONS,
                "iterations": {"type": "integer", "minimum": 0},
                "max_epochs": {"type": "integer", "minimum": 1},
                "validation_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}

RUN_CONFIG_SCHEMA: Dict[str, Any] = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "properties": {
        "seed": {"type": "integer"},
        "output_dir": {"type": "string", "minLength": 1},
        "run_id": {"type": "string", "pattern": "^[A-Za-z0-9._-]+$"},
        "workers": {"type": "integer", "minimum": 1, "maximum": 256},
        "datasets": {"type": "array", "items": DATASET_SCHEMA, "minItems": 1},
        "watermark": WATERMARK_SCHEMA,
        "attacks": ATTACKS_SCHEMA,
        "detection": {
            "type": "object",
            "properties": {"alpha": _PROBABILITY, "fpr_target": _PROBABILITY},
            "additionalProperties": False,
        },
        "identification": {
            "type": "object",
            "properties": {
                "users": {
                    "type": "array",
                    "items": {"type": "integer", "minimum": 2},
                    "minItems": 1,
                    "uniqueItems": True,
                },
                "repeats": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "quality": {
            "type": "object",
            "properties": {
                "cutoff": {"type": "number"},
                "external_metrics": {"type": "array", "items": {"type": "string"}},
            },
            "additionalProperties": False,
        },
        "report": {
            "type": "object",
            "properties": {
                "aggregate": {"type": "string", "enum": ["mean", "per-dataset"]},
                "radar_categories": {
                    "type": "object",
                    "additionalProperties": {"type": "array", "items": {"type": "string"}},
                },
            },
            "additionalProperties": False,
        },
        "ingest": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "dir": {"type": "string", "minLength": 1},
                    "attack": {"type": "string", "pattern": "^[A-Za-z]+-.+$"},
                    "strengths": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                },
                "required": ["dir", "attack"],
                "additionalProperties": False,
            },
        },
    },
    "required": ["datasets"],
    "additionalProperties": False,
}
