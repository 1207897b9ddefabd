"""Core EHR types, the feature catalog and the markdown verbalizer."""
from __future__ import annotations

import json
import weakref
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Mapping, NamedTuple, Optional, Sequence, Union

from .errors import NotASubset, SchemaError, UnknownFeature

Value = Union[float, int, str, None]


class Modality(str, Enum):
    DEMOGRAPHIC = "demographic"
    DIAGNOSIS = "diagnosis"
    LAB = "lab"
    MEDICATION = "medication"
    PROCEDURE = "procedure"
    OTHER = "other"


# Header order used by the verbalizer; index doubles as the one-hot position.
MODALITY_ORDER = tuple(Modality)
_MODALITY_RANK = {m: k for k, m in enumerate(MODALITY_ORDER)}


@dataclass(frozen=True)
class FeatureInfo:
    display_name: str
    modality: Modality
    value_kind: str = "numeric"  # "numeric" | "categorical"
    reference_range: Optional[tuple[float, float]] = None

    def __post_init__(self):
        if self.value_kind not in ("numeric", "categorical"):
            raise ValueError(f"value_kind must be numeric or categorical, got {self.value_kind!r}")
        if self.reference_range is not None:
            lo, hi = self.reference_range
            if not lo < hi:
                raise ValueError(f"reference range needs min < max, got {self.reference_range}")
            if self.value_kind != "numeric":
                raise ValueError("reference ranges only apply to numeric features")

    @property
    def numeric(self) -> bool:
        return self.value_kind == "numeric"

    def is_abnormal(self, value: Value) -> bool:
        if self.reference_range is None or value is None or isinstance(value, str):
            return False
        lo, hi = self.reference_range
        return value < lo or value > hi


class FeatureCatalog(Mapping[str, FeatureInfo]):
    """Reference set of features, keyed by feature id, in insertion order."""

    def __init__(self, entries: Mapping[str, FeatureInfo]):
        self._entries = dict(entries)

    def __getitem__(self, feature_id: str) -> FeatureInfo:
        try:
            return self._entries[feature_id]
        except KeyError:
            raise UnknownFeature(feature_id) from None

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def __eq__(self, other):
        return isinstance(other, FeatureCatalog) and self._entries == other._entries

    def __repr__(self):
        return f"FeatureCatalog({len(self)} features)"

    def to_json(self) -> dict:
        out = {}
        for fid, info in self._entries.items():
            entry = {
                "display_name": info.display_name,
                "modality": info.modality.value,
                "value_kind": info.value_kind,
            }
            if info.reference_range is not None:
                entry["reference_range"] = list(info.reference_range)
            out[fid] = entry
        return out

    @classmethod
    def from_json(cls, data: Mapping) -> "FeatureCatalog":
        entries = {}
        for fid, entry in data.items():
            try:
                rr = entry.get("reference_range")
                entries[fid] = FeatureInfo(
                    display_name=entry["display_name"],
                    modality=Modality(entry["modality"]),
                    value_kind=entry.get("value_kind", "numeric"),
                    reference_range=tuple(rr) if rr is not None else None,
                )
            except KeyError as exc:
                raise SchemaError(f"missing key {exc.args[0]!r}", path=f"{fid}.{exc.args[0]}") from None
            except ValueError as exc:
                raise SchemaError(str(exc), path=fid) from None
        return cls(entries)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "FeatureCatalog":
        return cls.from_json(json.loads(Path(path).read_text()))


class FeatureValueTuple(NamedTuple):
    feature: str
    value: Value
    t: int


@dataclass(frozen=True, eq=True)
class PatientEHR:
    patient_id: str
    demographics: tuple[FeatureValueTuple, ...] = ()
    visits: tuple[tuple[FeatureValueTuple, ...], ...] = ()
    # Latent synthetic attributes (e.g. stay length); never verbalized.
    latent: Mapping[str, float] = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "demographics", tuple(FeatureValueTuple(*x) for x in self.demographics))
        object.__setattr__(self, "visits", tuple(tuple(FeatureValueTuple(*x) for x in v) for v in self.visits))

    @cached_property
    def tuples(self) -> tuple[FeatureValueTuple, ...]:
        """Flat view: demographics first, then visits in order. Rewrites index into this."""
        out = list(self.demographics)
        for visit in self.visits:
            out.extend(visit)
        return tuple(out)

    @cached_property
    def max_timestamp(self) -> int:
        return max((x.t for x in self.tuples), default=0)

    def features_present(self) -> list[str]:
        return sorted({x.feature for x in self.tuples})

    def subset(self, indices: Sequence[int]) -> "PatientEHR":
        """EHR restricted to the flat tuple positions in ``indices`` (visit layout kept)."""
        keep = set(indices)
        n_demo = len(self.demographics)
        demo = tuple(x for i, x in enumerate(self.demographics) if i in keep)
        visits, offset = [], n_demo
        for visit in self.visits:
            kept = tuple(x for j, x in enumerate(visit) if offset + j in keep)
            offset += len(visit)
            if kept:
                visits.append(kept)
        return PatientEHR(self.patient_id, demo, tuple(visits), self.latent)


@dataclass(frozen=True)
class Rewrite:
    """A derived EHR: kept positions of the source's flat tuple list, plus provenance."""

    patient_id: str
    kept: tuple[int, ...]
    source: str
    logprob: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "kept", tuple(sorted(int(i) for i in self.kept)))

    def check(self, ehr: PatientEHR) -> None:
        if self.patient_id != ehr.patient_id:
            raise NotASubset(f"rewrite of {self.patient_id!r} applied to {ehr.patient_id!r}")
        n = len(ehr.tuples)
        if len(set(self.kept)) != len(self.kept) or any(i < 0 or i >= n for i in self.kept):
            raise NotASubset(f"rewrite of {self.patient_id!r} keeps positions outside the source EHR")

    def mask(self, ehr: PatientEHR):
        import numpy as np

        self.check(ehr)
        m = np.zeros(len(ehr.tuples), dtype=bool)
        m[list(self.kept)] = True
        return m

    def materialize(self, ehr: PatientEHR) -> PatientEHR:
        self.check(ehr)
        return ehr.subset(self.kept)

    @classmethod
    def from_tuples(cls, ehr: PatientEHR, tuples, source: str, logprob=None) -> "Rewrite":
        """Map a tuple multiset back onto positions of ``ehr``; foreign tuples raise NotASubset."""
        free: dict[FeatureValueTuple, list[int]] = {}
        for i, x in enumerate(ehr.tuples):
            free.setdefault(x, []).append(i)
        kept = []
        for x in tuples:
            slots = free.get(FeatureValueTuple(*x))
            if not slots:
                raise NotASubset(f"tuple {tuple(x)!r} is not in EHR {ehr.patient_id!r}")
            kept.append(slots.pop(0))
        return cls(ehr.patient_id, tuple(kept), source, logprob)


_PLAN_CACHE: "weakref.WeakKeyDictionary[PatientEHR, tuple]" = weakref.WeakKeyDictionary()


@dataclass(frozen=True)
class VerbalizedEHR:
    text: str
    token_count: int


@dataclass
class ValidationIssue:
    kind: str  # UnknownFeature | ValueKind | TimestampOrder | VisitOrder | NegativeTimestamp | DemographicTimestamp
    index: int
    message: str


def format_value(value: Value) -> str:
    if value is None:
        return "(missing)"
    if isinstance(value, str):
        return value
    text = f"{float(value):.4f}".rstrip("0").rstrip(".")
    return "0" if text in ("-0", "") else text


def _render_plan(ehr: PatientEHR, catalog: FeatureCatalog) -> tuple[list[int], list[str], list[Modality]]:
    """Flat tuple positions in output order, with each one's line and modality (cached per EHR)."""
    cached = _PLAN_CACHE.get(ehr)
    if cached is not None and cached[0] is catalog:
        return cached[1]
    keyed = []
    for i, x in enumerate(ehr.tuples):
        info = catalog[x.feature]
        keyed.append((_MODALITY_RANK[info.modality], x.t, i, f"- {info.display_name}: {format_value(x.value)}",
                      info.modality))
    keyed.sort(key=lambda r: r[:3])
    plan = ([r[2] for r in keyed], [r[3] for r in keyed], [r[4] for r in keyed])
    _PLAN_CACHE[ehr] = (catalog, plan)
    return plan


def _render(positions, lines, modalities, keep=None) -> str:
    out, current = [], None
    for pos, line, modality in zip(positions, lines, modalities):
        if keep is not None and pos not in keep:
            continue
        if modality is not current:
            out.append(f"# {modality.value}")
            current = modality
        out.append(line)
    return "\n".join(out)


def verbalize(ehr: PatientEHR, catalog: FeatureCatalog) -> VerbalizedEHR:
    """Render an EHR as markdown: one ``# modality`` header per modality present,
    followed by ``- name: value`` lines in timestamp order (stable on ties)."""
    text = _render(*_render_plan(ehr, catalog))
    return VerbalizedEHR(text, len(text.split()))


def verbalize_rewrite(ehr: PatientEHR, rewrite: "Rewrite", catalog: FeatureCatalog) -> VerbalizedEHR:
    """Same text as ``verbalize(rewrite.materialize(ehr))`` without building the subset EHR.

    Dropping tuples keeps the relative order of the rest, so the source's
    rendering order can be filtered directly.
    """
    rewrite.check(ehr)
    text = _render(*_render_plan(ehr, catalog), keep=set(rewrite.kept))
    return VerbalizedEHR(text, len(text.split()))


def token_length(v: Union[VerbalizedEHR, str]) -> int:
    text = v.text if isinstance(v, VerbalizedEHR) else v
    return len(text.split())


def validate_ehr(ehr: PatientEHR, catalog: FeatureCatalog) -> list[ValidationIssue]:
    """Every violated invariant, with its flat tuple index. Empty list means valid."""
    issues = []
    for i, x in enumerate(ehr.tuples):
        if x.feature not in catalog:
            issues.append(ValidationIssue("UnknownFeature", i, f"unknown feature {x.feature!r}"))
            continue
        info = catalog[x.feature]
        if x.value is not None:
            is_text = isinstance(x.value, str)
            if info.numeric == is_text:
                issues.append(ValidationIssue("ValueKind", i, f"{x.feature!r} expects a {info.value_kind} value"))
        if not isinstance(x.t, int) or x.t < 0:
            issues.append(ValidationIssue("NegativeTimestamp", i, f"timestamp {x.t!r} is not a non-negative integer"))
    for i, x in enumerate(ehr.demographics):
        if x.t != 0:
            issues.append(ValidationIssue("DemographicTimestamp", i, "demographics carry timestamp 0"))
    offset = len(ehr.demographics)
    prev_first = None
    for visit in ehr.visits:
        for j in range(1, len(visit)):
            if visit[j].t < visit[j - 1].t:
                issues.append(ValidationIssue("TimestampOrder", offset + j, "timestamps decrease within a visit"))
        if visit:
            if prev_first is not None and visit[0].t < prev_first:
                issues.append(ValidationIssue("VisitOrder", offset, "visits are not ordered by first timestamp"))
            prev_first = visit[0].t
        offset += len(visit)
    return issues
