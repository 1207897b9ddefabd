"""JSONL cohort persistence.

One JSON object per line::

    {"patient_id": "p0001",
     "demographics": [["age", 63, 0], ["sex", "F", 0]],
     "visits": [[["lab_03", 4.1, 2], ...], ...],
     "labels": {"mor": 0, "ra": 1},
     "latent": {"stay_days": 9.0}}          # optional

``latent`` holds synthetic generator attributes used by the task labelers.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

from .ehr import FeatureCatalog, PatientEHR
from .errors import ParseError, SchemaError

Labels = dict[str, dict[str, int]]


def _tuple_to_json(x):
    return [x.feature, x.value, x.t]


def patient_to_json(ehr: PatientEHR, labels: Optional[dict] = None) -> dict:
    obj = {
        "patient_id": ehr.patient_id,
        "demographics": [_tuple_to_json(x) for x in ehr.demographics],
        "visits": [[_tuple_to_json(x) for x in visit] for visit in ehr.visits],
        "labels": dict(labels or {}),
    }
    if ehr.latent:
        obj["latent"] = dict(ehr.latent)
    return obj


def _parse_tuple(raw, path):
    if not isinstance(raw, list) or len(raw) != 3:
        raise SchemaError("expected [feature, value, t]", path=path)
    feature, value, t = raw
    if not isinstance(feature, str):
        raise SchemaError("feature id must be a string", path=path)
    if not isinstance(t, int) or isinstance(t, bool):
        raise SchemaError("timestamp must be an integer", path=path)
    return (feature, value, t)


def patient_from_json(obj, required_tasks=()) -> tuple[PatientEHR, dict[str, int]]:
    if not isinstance(obj, dict):
        raise SchemaError("expected a JSON object", path="")
    for key in ("patient_id", "demographics", "visits", "labels"):
        if key not in obj:
            raise SchemaError("missing field", path=key)
    labels = obj["labels"]
    if not isinstance(labels, dict):
        raise SchemaError("expected a task -> 0/1 map", path="labels")
    for task in required_tasks:
        if task not in labels:
            raise SchemaError("missing label", path=f"labels.{task}")
    for task, y in labels.items():
        if y not in (0, 1) or isinstance(y, bool):
            raise SchemaError("label must be 0 or 1", path=f"labels.{task}")
    demo = [_parse_tuple(x, f"demographics[{i}]") for i, x in enumerate(obj["demographics"])]
    visits = [
        [_parse_tuple(x, f"visits[{e}][{j}]") for j, x in enumerate(visit)]
        for e, visit in enumerate(obj["visits"])
    ]
    ehr = PatientEHR(str(obj["patient_id"]), tuple(demo), tuple(tuple(v) for v in visits), dict(obj.get("latent", {})))
    return ehr, {k: int(v) for k, v in labels.items()}


def save_cohort(path, cohort: list[PatientEHR], labels: Labels, catalog: Optional[FeatureCatalog] = None,
                catalog_path=None) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for ehr in cohort:
            fh.write(json.dumps(patient_to_json(ehr, labels.get(ehr.patient_id, {}))) + "\n")
    if catalog is not None:
        catalog.save(catalog_path or path.with_name("catalog.json"))


def load_cohort(path, catalog_path=None, required_tasks=()) -> tuple[list[PatientEHR], Labels, Optional[FeatureCatalog]]:
    """Read a cohort file (and its catalog, defaulting to ``catalog.json`` alongside)."""
    path = Path(path)
    cohort, labels = [], {}
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(exc.msg, line=lineno) from None
            try:
                ehr, y = patient_from_json(obj, required_tasks)
            except SchemaError as exc:
                raise SchemaError(f"line {lineno}: {exc}", path=exc.path) from None
            cohort.append(ehr)
            labels[ehr.patient_id] = y
    catalog_path = Path(catalog_path) if catalog_path else path.with_name("catalog.json")
    catalog = FeatureCatalog.load(catalog_path) if catalog_path.exists() else None
    return cohort, labels, catalog
