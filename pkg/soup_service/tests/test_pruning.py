# tests/test_pruning.py
import numpy as np
import pytest

from app.errors import ConfigError, ScheduleError, ShapeMismatchError, SparsityError
from app.nn_core import ArchSpec, init_model
from app.pruning import (
    Mask,
    SparsityPlan,
    apply_mask,
    filter_mask,
    gmp_event_steps,
    gmp_target_at,
    magnitude_mask,
    phase_sparsities,
    pruned_count,
    sparsity_of,
)


def _single_layer(values):
    values = np.asarray(values, dtype=np.float32)
    model = init_model(ArchSpec(sizes=[values.shape[1], values.shape[0]], batchnorm=False), seed=0)
    model.layers[0].weight[...] = values
    return model


def test_phase_sparsities_match_reported_phase_levels():
    # reported levels are rounded to one decimal percent
    assert phase_sparsities(0.98, 3) == pytest.approx([0.728, 0.926, 0.980], abs=1e-3)
    assert phase_sparsities(0.90, 3) == pytest.approx([0.536, 0.785, 0.900], abs=5e-4)


def test_phase_sparsities_follow_geometric_law_and_end_exactly():
    levels = phase_sparsities(0.9, 6)
    expected = [1.0 - 0.1 ** (j / 6) for j in range(1, 7)]
    assert levels == pytest.approx(expected, abs=1e-9)
    assert levels[-1] == 0.9
    assert levels == sorted(levels)
    assert phase_sparsities(0.7, 1) == [0.7]


@pytest.mark.parametrize("target, phases", [(0.9, 3), (0.98, 5), (0.5, 2)])
def test_constant_per_phase_rate_reaches_every_cumulative_level(target, phases):
    per_phase = 1.0 - (1.0 - target) ** (1.0 / phases)
    remaining = 1.0
    for level in phase_sparsities(target, phases):
        remaining *= 1.0 - per_phase
        assert abs((1.0 - remaining) - level) <= 1e-9


def test_phase_sparsities_reject_out_of_range():
    with pytest.raises(SparsityError):
        phase_sparsities(1.0, 3)
    with pytest.raises(SparsityError):
        phase_sparsities(0.5, 0)


def test_sparsity_plan_fills_cumulative_levels():
    plan = SparsityPlan(target_sparsity=0.9, phases=3)
    assert plan.cumulative == phase_sparsities(0.9, 3)
    with pytest.raises(ValueError):
        SparsityPlan(target_sparsity=0.9, phases=2, cumulative=[0.5])


def test_pruned_count_absorbs_decimal_representation_error():
    assert pruned_count(0.95, 4800) == 4560
    assert pruned_count(0.9, 10) == 9
    assert pruned_count(0.0, 10) == 0
    assert pruned_count(1.0, 10) == 10


def test_magnitude_mask_prunes_exact_count_globally(tiny_model):
    mask = magnitude_mask(tiny_model, 0.7)
    assert mask.pruned == pruned_count(0.7, mask.total)

    magnitudes = np.concatenate([np.abs(w).ravel() for w in tiny_model.prunable_weights().values()])
    kept = np.concatenate([keep.ravel() for keep in mask.tensors.values()])
    assert magnitudes[~kept].max() <= magnitudes[kept].min()


def test_magnitude_mask_is_monotone_across_phases(tiny_model):
    first = magnitude_mask(tiny_model, 0.5)
    model = apply_mask(tiny_model, first)
    for weight in model.prunable_weights().values():
        weight *= np.linspace(2.0, 0.1, weight.size).reshape(weight.shape).astype(np.float32)
    second = magnitude_mask(model, 0.8, first)
    assert second.is_superset_of(first)
    assert second.pruned == pruned_count(0.8, second.total)


def test_magnitude_mask_breaks_ties_by_position():
    model = _single_layer([[1.0, 1.0], [1.0, 1.0]])
    mask = magnitude_mask(model, 0.5)
    assert mask.tensors["dense0.weight"].tolist() == [[False, False], [True, True]]


def test_magnitude_mask_rejects_lower_sparsity(tiny_model):
    first = magnitude_mask(tiny_model, 0.6)
    with pytest.raises(SparsityError):
        magnitude_mask(tiny_model, 0.4, first)
    with pytest.raises(SparsityError):
        magnitude_mask(tiny_model, 1.5)


def test_mask_from_zeros_and_pruned_set():
    model = _single_layer([[0.0, 2.0, 0.0], [1.0, 0.0, 3.0]])
    mask = Mask.from_zeros(model)
    assert mask.kept == 3
    assert mask.sparsity == 0.5
    assert mask.pruned_set()["dense0.weight"].tolist() == [0, 2, 4]
    assert mask.equals(mask.copy())
    assert not mask.equals(Mask.full(model))


def test_mask_congruence_is_checked(tiny_model):
    other = init_model(ArchSpec(sizes=[4, 5, 3]), seed=0)
    with pytest.raises(ShapeMismatchError):
        apply_mask(tiny_model, Mask.full(other))


def test_apply_mask_zeroes_masked_coordinates_on_a_copy(tiny_model):
    mask = magnitude_mask(tiny_model, 0.5)
    masked = apply_mask(tiny_model, mask)
    assert sparsity_of(masked) == pytest.approx(mask.sparsity)
    assert sparsity_of(tiny_model) == 0.0
    assert Mask.from_zeros(masked).equals(mask)


def test_filter_mask_removes_lowest_norm_rows():
    model = _single_layer([[3.0, 3.0], [0.1, 0.1], [2.0, 0.0], [0.5, 0.5]])
    mask = filter_mask(model, 0.5)
    assert mask.tensors["dense0.weight"].all(axis=1).tolist() == [True, False, True, False]

    tighter = filter_mask(apply_mask(model, mask), 0.75, mask)
    assert tighter.is_superset_of(mask)
    assert tighter.tensors["dense0.weight"].all(axis=1).tolist() == [True, False, False, False]


def test_gmp_ramp_reaches_final_target():
    assert gmp_target_at(0, 100, 0.9, 4) == 0.0
    assert gmp_target_at(100, 100, 0.9, 4) == pytest.approx(0.9)
    assert gmp_target_at(50, 100, 0.9, 4) == pytest.approx(0.9 * (1 - 0.5**3))
    assert gmp_target_at(0, 0, 0.9, 1) == pytest.approx(0.9)

    targets = [gmp_target_at(step, 100, 0.9, 4) for step in range(101)]
    assert targets == sorted(targets)


def test_gmp_ramp_rejects_bad_arguments():
    with pytest.raises(ScheduleError):
        gmp_target_at(101, 100, 0.9, 4)
    with pytest.raises(ConfigError):
        gmp_target_at(0, 100, 0.9, 0)


def test_gmp_event_steps():
    assert gmp_event_steps(100, 4) == [25, 50, 75, 100]
    assert gmp_event_steps(10, 3) == [4, 7, 10]
    assert gmp_event_steps(0, 3) == [0]
    for step in gmp_event_steps(100, 4):
        assert gmp_target_at(step, 100, 0.8, 4) > gmp_target_at(step - 1, 100, 0.8, 4)
