import numpy as np
import pytest
from hypothesis import strategies as st

from ehr_rewrite.ehr import FeatureCatalog, FeatureInfo, Modality, PatientEHR

MODALITIES = [Modality.LAB, Modality.DIAGNOSIS, Modality.MEDICATION, Modality.PROCEDURE]


def make_catalog(n_numeric=4, n_categorical=3) -> FeatureCatalog:
    entries = {
        "age": FeatureInfo("age", Modality.DEMOGRAPHIC),
        "potassium": FeatureInfo("potassium", Modality.LAB, reference_range=(3.5, 5.0)),
    }
    for i in range(n_numeric):
        entries[f"lab{i}"] = FeatureInfo(f"lab{i}", Modality.LAB, reference_range=(0.0, 1.0) if i % 2 else None)
    for i in range(n_categorical):
        m = MODALITIES[1 + i % 3]
        entries[f"cat{i}"] = FeatureInfo(f"cat{i}", m, "categorical")
    return FeatureCatalog(entries)


CATALOG = make_catalog()


@pytest.fixture
def catalog():
    return CATALOG


def random_ehr(rng: np.random.Generator, pid="p0", catalog=CATALOG, n_visits=None, max_per_visit=6) -> PatientEHR:
    """Valid random EHR over ``catalog`` (non-decreasing timestamps, visits ordered)."""
    feats = [f for f in catalog if f != "age"]
    n_visits = int(rng.integers(1, 4)) if n_visits is None else n_visits
    t, visits = 1, []
    for _ in range(n_visits):
        visit = []
        for _ in range(int(rng.integers(1, max_per_visit + 1))):
            f = feats[int(rng.integers(len(feats)))]
            info = catalog[f]
            value = f"{f}_{int(rng.integers(3))}" if not info.numeric else round(float(rng.normal(2.0, 2.0)), 2)
            visit.append((f, value, t))
            t += int(rng.integers(0, 3))
        visits.append(tuple(visit))
    return PatientEHR(pid, (("age", float(rng.integers(20, 90)), 0),), tuple(visits))


@st.composite
def ehrs(draw, max_visits=3, max_per_visit=5):
    seed = draw(st.integers(0, 2**31 - 1))
    n_visits = draw(st.integers(1, max_visits))
    return random_ehr(np.random.default_rng(seed), f"p{seed}", n_visits=n_visits, max_per_visit=max_per_visit)
