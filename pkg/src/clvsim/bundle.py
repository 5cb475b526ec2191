"""Versioned, canonical JSON persistence of the trained model state."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .core import FeatureSchema
from .errors import BundleFormatError, VersionError
from .predictors import MarkovBaseline, TransitionModel, ValueAssignerModel
from .segmentation import SegmentationModel
from .simulator import LearnedModels, Rule

FORMAT_VERSION = 1

_TOP_KEYS = {"format_version", "schema", "schema_hash", "segmentation", "transition_full", "transition_simple",
             "value_full", "value_simple", "baseline", "progression_rules", "metadata"}
_KEYS = {
    "transition": {"variant", "base_features", "n_segments", "classifier"},
    "value": {"variant", "base_features", "n_segments", "regressor"},
    "baseline": {"transition", "mean_value"},
    "segmentation": {"tree", "n_segments", "forced", "base_year", "requested_segments"},
    "rule": {"action", "amount"},
}


def canonical_json(obj: Any) -> str:
    """Sorted keys, compact separators, shortest round-trip float repr."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def _strict(d: Mapping, expected: set[str], where: str) -> None:
    if not isinstance(d, Mapping):
        raise BundleFormatError(f"{where}: expected an object")
    unknown = set(d) - expected
    missing = expected - set(d)
    if unknown:
        raise BundleFormatError(f"{where}: unknown fields {sorted(unknown)}")
    if missing:
        raise BundleFormatError(f"{where}: missing fields {sorted(missing)}")


@dataclass
class ModelBundle:
    schema: FeatureSchema
    segmentation: SegmentationModel
    transition_full: TransitionModel
    transition_simple: TransitionModel
    value_full: ValueAssignerModel
    value_simple: ValueAssignerModel
    baseline: MarkovBaseline
    progression_rules: dict[str, Rule]
    metadata: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @property
    def n_segments(self) -> int:
        return self.segmentation.n_segments

    def learned(self) -> LearnedModels:
        return LearnedModels(self.transition_full, self.transition_simple, self.value_full, self.value_simple)

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "schema": self.schema.to_dict(),
            "schema_hash": self.schema.schema_hash(),
            "segmentation": self.segmentation.to_dict(),
            "transition_full": self.transition_full.to_dict(),
            "transition_simple": self.transition_simple.to_dict(),
            "value_full": self.value_full.to_dict(),
            "value_simple": self.value_simple.to_dict(),
            "baseline": self.baseline.to_dict(),
            "progression_rules": {k: {"action": r.action, "amount": r.amount}
                                  for k, r in sorted(self.progression_rules.items())},
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelBundle":
        if not isinstance(d, Mapping) or "format_version" not in d:
            raise BundleFormatError("not a model bundle")
        if d["format_version"] != FORMAT_VERSION:
            raise VersionError(f"bundle format {d['format_version']} != reader format {FORMAT_VERSION}")
        _strict(d, _TOP_KEYS, "bundle")
        schema = FeatureSchema.from_dict(d["schema"])
        if schema.schema_hash() != d["schema_hash"]:
            raise VersionError("schema hash does not match the embedded schema")
        _strict(d["segmentation"], _KEYS["segmentation"], "segmentation")
        _strict(d["baseline"], _KEYS["baseline"], "baseline")
        for name in ("transition_full", "transition_simple"):
            _strict(d[name], _KEYS["transition"], name)
        for name in ("value_full", "value_simple"):
            _strict(d[name], _KEYS["value"], name)
        rules = {}
        for k, r in d["progression_rules"].items():
            _strict(r, _KEYS["rule"], f"progression_rules.{k}")
            rules[k] = Rule(r["action"], float(r["amount"]))
        bundle = cls(
            schema=schema,
            segmentation=SegmentationModel.from_dict(d["segmentation"]),
            transition_full=TransitionModel.from_dict(d["transition_full"]),
            transition_simple=TransitionModel.from_dict(d["transition_simple"]),
            value_full=ValueAssignerModel.from_dict(d["value_full"]),
            value_simple=ValueAssignerModel.from_dict(d["value_simple"]),
            baseline=MarkovBaseline.from_dict(d["baseline"]),
            progression_rules=rules,
            metadata=dict(d["metadata"]),
            format_version=int(d["format_version"]),
        )
        bundle.check_consistency()
        return bundle

    def check_consistency(self) -> None:
        S = self.n_segments
        parts = [self.transition_full, self.transition_simple, self.value_full, self.value_simple, self.baseline]
        if any(p.n_segments != S for p in parts):
            raise BundleFormatError("components disagree on the segment count")
        names = set(self.schema.names)
        for p in parts[:4]:
            stray = [f for f in p.base_features if f not in names and f != "cv_lag1"]
            if stray:
                raise VersionError(f"model features {stray[:3]} absent from the bundle schema")


def serialize_bundle(bundle: ModelBundle) -> str:
    return canonical_json(bundle.to_dict()) + "\n"


def deserialize_bundle(text: str) -> ModelBundle:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise BundleFormatError(f"bundle is not valid JSON: {exc}") from None
    return ModelBundle.from_dict(doc)


def write_bundle(bundle: ModelBundle, path: str | Path) -> None:
    Path(path).write_text(serialize_bundle(bundle))


def read_bundle(path: str | Path) -> ModelBundle:
    return deserialize_bundle(Path(path).read_text())
