import math

import numpy as np
import pytest

from calibkit.core import (
    AllZeroScores,
    BinningConfig,
    ConfidenceVector,
    Dataset,
    DatasetValidationError,
    DuplicateId,
    EmptyDataset,
    LabelOutOfRange,
    NonFiniteScore,
    OutOfRange,
    PredictionRecord,
    SchemaError,
    SimplexViolation,
    argmax_option,
    bin_index,
    bin_index_array,
    normalize_options,
    validate_dataset,
)


def test_normalize_direct_ratio():
    cv = normalize_options([2, 1, 1, 0])
    assert cv.probs == (0.5, 0.25, 0.25, 0.0)


def test_normalize_symmetry():
    assert normalize_options([1, 1, 1, 1]).probs == (0.25, 0.25, 0.25, 0.25)


def test_normalize_identity_on_normalized():
    cv = normalize_options([0.9, 0.05, 0.03, 0.02])
    assert cv.probs == pytest.approx((0.9, 0.05, 0.03, 0.02), abs=1e-15)


def test_normalize_errors():
    with pytest.raises(AllZeroScores):
        normalize_options([0.0, 0.0, 0.0])
    with pytest.raises(NonFiniteScore):
        normalize_options([1.0, float("nan")])
    with pytest.raises(NonFiniteScore):
        normalize_options([1.0, float("inf")])
    with pytest.raises(OutOfRange):
        normalize_options([1.0, -0.5])


def test_normalize_scale_invariant_and_idempotent():
    rng = np.random.default_rng(0)
    for _ in range(200):
        scores = rng.random(4) + 1e-6
        a = normalize_options(scores)
        b = normalize_options(7.3 * scores)
        assert a.probs == pytest.approx(b.probs, abs=1e-12)
        again = normalize_options(a.probs)
        assert again.probs == pytest.approx(a.probs, abs=1e-15)


def test_argmax_option_examples():
    assert argmax_option(ConfidenceVector((0.1, 0.6, 0.2, 0.1))) == 1
    assert argmax_option(ConfidenceVector((0.25, 0.25, 0.25, 0.25))) == 0
    assert argmax_option(ConfidenceVector((0.4, 0.4, 0.1, 0.1))) == 0


def test_argmax_invariant_under_monotone_rescale():
    rng = np.random.default_rng(1)
    for _ in range(100):
        cv = normalize_options(rng.random(5) + 1e-9)
        squared = normalize_options([p ** 2 for p in cv.probs])
        assert argmax_option(squared) == argmax_option(cv)


def test_bin_index_examples():
    assert bin_index(0.8, 10) == 8
    assert bin_index(0.8000001, 10) == 9
    assert bin_index(0.0, 10) == 1
    assert bin_index(1.0, 10) == 10


def test_bin_index_errors():
    with pytest.raises(OutOfRange):
        bin_index(-0.1, 10)
    with pytest.raises(OutOfRange):
        bin_index(1.1, 10)


def test_bin_index_monotone_and_surjective():
    M = 7
    values = np.linspace(0.0, 1.0, 2000)
    idx = bin_index_array(values, M)
    assert (np.diff(idx) >= 0).all()
    assert set(idx.tolist()) == set(range(1, M + 1))


def test_max_confidence_pigeonhole_bins():
    # With k classes the top confidence is at least 1/k, so at M=10, k=4 the
    # first two bins can never hold any record.
    rng = np.random.default_rng(2)
    probs = rng.dirichlet(np.ones(4), 500)
    assert probs.max(axis=1).min() >= 0.25
    idx = bin_index_array(probs.max(axis=1), 10)
    assert idx.min() >= 3


def test_confidence_vector_invariants():
    with pytest.raises(SimplexViolation):
        ConfidenceVector((0.5, 0.6))
    with pytest.raises(SimplexViolation):
        ConfidenceVector((1.2, -0.2))
    with pytest.raises(SimplexViolation):
        ConfidenceVector((1.0,))
    cv = ConfidenceVector((0.5, 0.5))
    assert cv.k == 2


def test_prediction_record_validation():
    cv = ConfidenceVector((0.5, 0.5))
    with pytest.raises(LabelOutOfRange):
        PredictionRecord("a", cv, 2)
    with pytest.raises(SchemaError):
        PredictionRecord("", cv, 0)
    with pytest.raises(SchemaError):
        PredictionRecord("a", cv, 0, split="dev")
    assert PredictionRecord("a", cv, 1, split="train").label == 1


def test_dataset_invariants():
    cv = ConfidenceVector((0.5, 0.5))
    with pytest.raises(EmptyDataset):
        Dataset([])
    with pytest.raises(DuplicateId):
        Dataset([PredictionRecord("a", cv, 0), PredictionRecord("a", cv, 1)])
    with pytest.raises(SchemaError):
        Dataset(
            [
                PredictionRecord("a", cv, 0),
                PredictionRecord("b", ConfidenceVector((0.2, 0.3, 0.5)), 0),
            ]
        )
    ds = Dataset([PredictionRecord("a", cv, 0), PredictionRecord("b", cv, 1)])
    assert ds.n == 2 and ds.k == 2
    assert ds.probs_matrix.shape == (2, 2)


def test_validate_dataset_happy_path():
    rows = [
        {"id": "a", "confidences": [0.7, 0.1, 0.1, 0.1], "label": 0},
        {"id": "b", "confidences": [0.25, 0.25, 0.25, 0.25], "label": 3, "split": "test"},
    ]
    ds = validate_dataset(rows)
    assert ds.n == 2 and ds.k == 4


def test_validate_dataset_label_out_of_range():
    rows = [{"id": "a", "confidences": [0.25, 0.25, 0.25, 0.25], "label": 5}]
    with pytest.raises(DatasetValidationError) as err:
        validate_dataset(rows)
    assert err.value.violations[0].index == 0
    assert err.value.violations[0].kind == "LabelOutOfRange"


def test_validate_dataset_renormalizes_within_tolerance():
    rows = [{"id": "a", "confidences": [0.4000003, 0.3, 0.2, 0.1], "label": 0}]
    ds = validate_dataset(rows)
    assert math.fsum(ds.records[0].confidences.probs) == pytest.approx(1.0, abs=1e-12)


def test_validate_dataset_rejects_bad_simplex():
    rows = [{"id": "a", "confidences": [0.6, 0.3, 0.2, 0.1], "label": 0}]
    with pytest.raises(DatasetValidationError) as err:
        validate_dataset(rows)
    assert err.value.violations[0].kind == "SimplexViolation"


def test_validate_dataset_collects_multiple_violations():
    rows = [
        {"id": "a", "confidences": [0.5, 0.5], "label": 0},
        {"id": "a", "confidences": [0.5, 0.5], "label": 0},
        {"confidences": [0.5, 0.5], "label": 0},
        {"id": "b", "confidences": [0.5, 0.5], "label": "x"},
    ]
    with pytest.raises(DatasetValidationError) as err:
        validate_dataset(rows)
    kinds = {v.kind for v in err.value.violations}
    assert "DuplicateId" in kinds and "SchemaError" in kinds


def test_binning_config():
    assert BinningConfig(M=10).effective_bins(12345) == 10
    heur = BinningConfig(strategy="cube-root-heuristic")
    assert heur.effective_bins(3000) == 14
    assert heur.effective_bins(1000) == 10
    assert heur.effective_bins(1) == 1
    with pytest.raises(OutOfRange):
        BinningConfig(M=0)
    with pytest.raises(SchemaError):
        BinningConfig(strategy="quantile")
