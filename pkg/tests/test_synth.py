import json

import numpy as np
import pytest

from daa.assoc import daa, naive_mwas
from daa.ingest import DataError
from daa.maxent import MaxEntModel
from daa.synth import (PRESETS, GroundTruthModel, SyntheticSpec, fit_ground_truth,
                       generate_cohort, make_ground_truth, plant_effects, score, to_counts)
from daa.transform import log_transform


def test_presets_are_zero_based_reference_effects():
    main = dict(PRESETS["table-s2-main"])
    assert sorted(main) == [0, 10, 18, 26, 32, 44]
    assert [main[i] for i in sorted(main)] == [-0.18, 0.24, -0.36, 0.17, -0.13, 0.18]


def test_spec_validation():
    with pytest.raises(DataError, match="distinct"):
        SyntheticSpec(((1, 0.1), (1, 0.2)))
    with pytest.raises(DataError, match="-1"):
        SyntheticSpec(((1, -1.0),))
    with pytest.raises(DataError, match="preset"):
        SyntheticSpec.preset("nope")
    with pytest.raises(DataError, match="out of range"):
        SyntheticSpec(((50, 0.1),)).validate_for(47)


def test_spec_json_round_trip():
    spec = SyntheticSpec.preset("table-s2-large", 10, 12, seed=4)
    assert SyntheticSpec.from_json(spec.to_json()) == spec


def test_ground_truth_contract(truth):
    model = truth.model
    assert model.dim == 47
    assert np.linalg.eigvalsh(model.C).min() > 0
    np.testing.assert_allclose(model.J @ model.C, np.eye(47), atol=1e-9)
    np.testing.assert_allclose(model.C @ model.h, model.m, atol=1e-9)
    off = ~np.eye(47, dtype=bool)
    density = np.mean(np.abs(model.J[off]) > 1e-12)
    assert 0.2 < density < 0.4
    sd = np.sqrt(np.diag(model.C))
    corr = model.C / np.outer(sd, sd)
    assert np.median(np.abs(corr[off & (np.abs(model.J) > 1e-12)])) >= 0.1
    assert np.ptp(model.m) > 5  # several e-folds of mean abundance


def test_ground_truth_seeded():
    a = make_ground_truth(dim=10, seed=3).model
    b = make_ground_truth(dim=10, seed=3).model
    c = make_ground_truth(dim=10, seed=4).model
    assert np.array_equal(a.J, b.J) and np.array_equal(a.m, b.m)
    assert not np.array_equal(a.J, c.J)


def test_ground_truth_rejects_zero_density():
    with pytest.raises(DataError, match="allow_diagonal"):
        make_ground_truth(dim=5, density=0.0)
    diag = make_ground_truth(dim=5, density=0.0, allow_diagonal=True).model
    assert np.count_nonzero(diag.J - np.diag(np.diag(diag.J))) == 0
    with pytest.raises(DataError):
        make_ground_truth(dim=1)


def test_plant_effects_empty_and_diagonal():
    truth = make_ground_truth(dim=6, density=0.0, allow_diagonal=True, seed=1)
    h_case, m_case = plant_effects(truth, SyntheticSpec(()))
    assert np.array_equal(h_case, truth.model.h) and np.allclose(m_case, truth.model.m)
    _, m_case = plant_effects(truth, SyntheticSpec(((2, 0.5),)))
    changed = np.flatnonzero(~np.isclose(m_case, truth.model.m, rtol=0, atol=1e-12))
    assert changed.tolist() == [2]


def test_plant_effects_dense_propagates(truth):
    spec = SyntheticSpec.preset("table-s2-main")
    h_case, m_case = plant_effects(truth, spec)
    np.testing.assert_allclose(m_case, truth.model.C @ h_case, atol=1e-9)
    moved = np.abs(m_case - truth.model.m) > 1e-6
    assert moved.sum() > 6
    assert np.flatnonzero(h_case != truth.model.h).tolist() == sorted(spec.indices)


def test_cohort_shape_and_determinism(truth):
    spec = SyntheticSpec.preset("table-s2-main", 30, 20, seed=5)
    a = generate_cohort(truth, spec)
    b = generate_cohort(truth, spec)
    assert a.data.shape == (47, 50)
    assert a.is_case.sum() == 30
    assert np.array_equal(a.data.values, b.data.values)
    assert a.truth == spec.indices


def test_null_cohort_few_false_positives(truth):
    spec = SyntheticSpec(tuple((i, 0.0) for i in range(6)), 275, 189, seed=2)
    c = generate_cohort(truth, spec)
    for t in (naive_mwas(c.data, c.labels, n_perm=2000, seed=1),
              daa(c.data, c.labels, n_perm=2000, seed=1)):
        assert t.n_significant <= 3


def test_real_controls_path(cohort):
    fitted = fit_ground_truth(cohort.data, cohort.labels)
    assert fitted.provenance == "fitted-from-data"
    controls = cohort.data.select_samples(np.flatnonzero(~cohort.is_case))
    spec = SyntheticSpec.preset("table-s2-main", 40, 250, seed=1)
    c = generate_cohort(fitted, spec, controls)
    ctrl = c.data.values[:, ~c.is_case]
    # more controls requested than available: bootstrapped from the real ones
    real = {tuple(col) for col in controls.values.T}
    assert all(tuple(col) in real for col in ctrl.T)


def test_score(cohort):
    t = daa(cohort.data, cohort.labels, n_perm=2000, seed=0)
    hits, fps = score(t, cohort.truth)
    assert hits | fps == set(t.significant_indices().tolist())
    assert hits <= cohort.truth


def test_to_counts_preserves_log_ratios(cohort):
    counts = to_counts(cohort.data)
    assert counts.counts.min() >= 0
    assert counts.counts.sum(axis=0).mean() == pytest.approx(1e6, rel=0.01)
    back = log_transform(counts, "none", pseudocount=1.0).values
    # within a sample, abundant taxa keep their log-ratios up to rounding
    for j in range(5):
        col = counts.counts[:, j] > 1000
        d = back[col, j] - cohort.data.values[col, j]
        assert np.ptp(d) < 2e-3
    with pytest.raises(DataError):
        to_counts(cohort.data, depth=0)


def test_truth_model_is_a_maxent_model(truth):
    assert isinstance(truth, GroundTruthModel)
    assert isinstance(truth.model, MaxEntModel)
    doc = json.loads(truth.model.to_json())
    assert doc["retained"] == 47
