import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import tides.drop_harness as dh
from tides.autodiff import rng_stream
from tides.drop_harness import (
    R_TEST_GRID,
    VARIANTS,
    DropPlan,
    IngestError,
    SweepRow,
    TimestampedSeries,
    VariantSpec,
    apply_drop,
    build_variant,
    evaluate_variant,
    ingest_csv,
    kept_count,
    decay_fit_classifier,
    model_inputs,
    pattern_checks,
    run_sweep,
    sample_drop,
    split_dataset,
    summarize,
    synth_classification,
    variant_config,
    variant_param_count,
)


def unit_series(L=10, C=2, label=0, sid="a"):
    return TimestampedSeries(np.arange(L * C, dtype=float).reshape(L, C), np.arange(L, dtype=float), label, sid)


# -------------------------------------------------------------- drop plans

def test_zero_rate_keeps_everything():
    plan = sample_drop(rng_stream(0, "p"), 0.0, 12)
    assert np.array_equal(plan.kept_indices, np.arange(12))


@settings(max_examples=60, deadline=None)
@given(r=st.floats(0.0, 0.9), L=st.integers(20, 300), seed=st.integers(0, 999))
def test_plans_keep_the_rounded_count_sorted_and_unique(r, L, seed):
    plan = sample_drop(rng_stream(seed, "p"), r, L)
    k = plan.kept_indices
    assert k.size == int(np.floor((1 - r) * L + 0.5))
    assert np.all(np.diff(k) > 0) and k.min() >= 0 and k.max() < L


def test_half_rate_on_forty_steps_keeps_twenty():
    assert sample_drop(rng_stream(1, "p"), 0.5, 40).kept_indices.size == 20
    assert kept_count(0.5, 5) == 3  # 2.5 rounds away from zero


def test_fixed_plans_are_pure_functions_of_seed_series_and_rate():
    a = sample_drop(None, 0.5, 50, "fixed", seed=3, series_id="x")
    b = sample_drop(rng_stream(99, "ignored"), 0.5, 50, "fixed", seed=3, series_id="x")
    assert np.array_equal(a.kept_indices, b.kept_indices)
    c = sample_drop(None, 0.3, 50, "fixed", seed=3, series_id="x")
    d = sample_drop(None, 0.5, 50, "fixed", seed=3, series_id="y")
    assert not np.array_equal(a.kept_indices, d.kept_indices)
    assert c.kept_indices.size != a.kept_indices.size


def test_fresh_plans_resample_every_call():
    rng = rng_stream(4, "p")
    assert not np.array_equal(sample_drop(rng, 0.5, 50).kept_indices, sample_drop(rng, 0.5, 50).kept_indices)


@pytest.mark.parametrize(
    "args",
    [(0.5, 3, "fresh"), (1.0, 10, "fresh"), (-0.1, 10, "fresh"), (0.9, 10, "fresh"), (0.5, 10, "sometimes")],
)
def test_invalid_plans_are_rejected(args):
    r, L, mode = args
    with pytest.raises(ValueError):
        sample_drop(rng_stream(0, "p"), r, L, mode)
    with pytest.raises(ValueError):
        sample_drop(None, 0.5, 10, "fresh")


def test_identity_plan_leaves_series_unchanged():
    s = unit_series()
    out = apply_drop(s, DropPlan(np.arange(len(s)), 0.0, "fixed"))
    assert np.array_equal(out.values, s.values) and np.array_equal(out.timestamps, s.timestamps)


def test_every_other_index_doubles_the_gaps():
    out = apply_drop(unit_series(10), DropPlan(np.arange(0, 10, 2), 0.5, "fixed"))
    assert np.array_equal(out.gaps(), np.full(4, 2.0))
    assert np.array_equal(out.step_deltas(), np.full(5, 2.0))


def test_gaps_telescope_and_timestamps_are_a_subsequence():
    rng = np.random.default_rng(5)
    t = np.cumsum(rng.uniform(0.1, 2.0, 80))
    s = TimestampedSeries(rng.normal(size=(80, 1)), t, 1, "z")
    for r in (0.1, 0.5, 0.9):
        out = apply_drop(s, sample_drop(rng_stream(6, "p"), r, 80))
        assert abs(out.gaps().sum() - (out.timestamps[-1] - out.timestamps[0])) < 1e-12
        assert np.all(np.isin(out.timestamps, t))
        assert np.allclose(out.gaps(), np.diff(out.timestamps), atol=1e-12)


def test_out_of_range_plan_fails():
    with pytest.raises(IndexError):
        apply_drop(unit_series(5), DropPlan(np.array([0, 5]), 0.5, "fixed"))


def test_series_validation():
    with pytest.raises(ValueError):
        TimestampedSeries(np.zeros((3, 1)), [0.0, 2.0, 1.0], 0)
    with pytest.raises(ValueError):
        TimestampedSeries(np.zeros((1, 1)), [0.0], 0)
    with pytest.raises(ValueError):
        TimestampedSeries(np.zeros((3, 1)), [0.0, 1.0], 0)


# -------------------------------------------------------------- variants

def test_table_hidden_sizes():
    assert VARIANTS["s5"].H == 80 and VARIANTS["tides"].H == 16


def test_six_variants_are_parameter_matched_within_ten_percent():
    counts = {n: variant_param_count(v, 1, 3) for n, v in VARIANTS.items()}
    for name, spec in VARIANTS.items():
        assert build_variant(spec, 1, 3, rng_stream(0, name)).n_params == counts[name]
    mid = np.mean(list(counts.values()))
    assert all(abs(c / mid - 1) < 0.10 for c in counts.values())


def test_delta_channel_only_for_learned_step_variants():
    batch = [unit_series(8, 1, sid=str(i)) for i in range(3)]
    for name, spec in VARIANTS.items():
        cfg = variant_config(spec, 1, 3)
        values, deltas = model_inputs(spec, batch)
        if spec.id_delta:
            assert cfg.delta_mode == "learned" and values.shape[-1] == 2
            assert np.array_equal(values[..., -1], deltas)
        else:
            assert cfg.delta_mode == "physical" and values.shape[-1] == 1


def test_unknown_flag_combination_fails():
    with pytest.raises(ValueError):
        variant_config(VariantSpec("odd", False, True, False, False, 16), 1, 3)


def test_selective_variant_with_zero_weights_reduces_to_the_lti_variant():
    wide = VariantSpec("tides80", True, False, True, False, 80)
    tides = build_variant(wide, 1, 3, rng_stream(7, "v"))
    s5 = build_variant(VARIANTS["s5"], 1, 3, rng_stream(8, "v"))
    p = {k: (np.zeros_like(v) if k.endswith(("w_up", "w_full")) else v) for k, v in tides.params.items()}
    shared = {k: p[k] for k in s5.params}
    batch = [apply_drop(s, sample_drop(rng_stream(i, "r"), 0.5, 40)) for i, s in enumerate(
        TimestampedSeries(np.random.default_rng(i).normal(size=(40, 1)), np.arange(40.0), 0) for i in range(4)
    )]
    values, deltas = model_inputs(wide, batch)
    a = tides(p, values, deltas, train=True).data
    b = s5(shared, values, deltas, train=True).data
    assert np.max(np.abs(a - b)) < 1e-12


def test_evaluation_plans_are_shared_across_specs(monkeypatch):
    seen = {}
    original = dh.apply_drop

    def record(series, plan):
        seen.setdefault(series.series_id, []).append(tuple(plan.kept_indices))
        return original(series, plan)

    monkeypatch.setattr(dh, "apply_drop", record)
    test = synth_classification(rng_stream(9, "d"), 6)
    for name in ("s5", "mamba"):
        model = build_variant(VARIANTS[name], 1, 3, rng_stream(0, name))
        model.stats[0].mean[:] = 0.0
        evaluate_variant(model, VARIANTS[name], test, 0.7, seed=2)
    assert all(len(v) == 2 and v[0] == v[1] for v in seen.values())


# -------------------------------------------------------------- ingest

def write(tmp_path, text, name="d.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_header_only_file_is_an_empty_dataset(tmp_path):
    assert ingest_csv(write(tmp_path, "series_id,timestamp,label,c0\n")) == []


def test_two_series_three_rows_each(tmp_path):
    text = "series_id,timestamp,label,c0,c1\n" + "".join(f"{s},{t},{i},{t},{-t}\n" for i, s in enumerate("ab") for t in range(3))
    data = ingest_csv(write(tmp_path, text))
    assert [len(s) for s in data] == [3, 3] and [s.label for s in data] == [0, 1]
    assert data[1].values.shape == (3, 2)


def test_unsorted_rows_give_the_sorted_dataset(tmp_path):
    rows = [f"s{i % 2},{t},{i % 2},{t * 0.5}" for i, t in enumerate([3.0, 1.0, 2.0, 0.5, 5.0, 4.0])]
    header = "series_id,timestamp,label,c0\n"
    shuffled = ingest_csv(write(tmp_path, header + "\n".join(rows) + "\n", "u.csv"))
    ordered = sorted(rows, key=lambda r: (r.split(",")[0], float(r.split(",")[1])))
    sorted_data = ingest_csv(write(tmp_path, header + "\n".join(ordered) + "\n", "s.csv"))
    for a, b in zip(shuffled, sorted_data):
        assert a.series_id == b.series_id
        assert np.array_equal(a.timestamps, b.timestamps) and np.array_equal(a.values, b.values)


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("", "missing header"),
        ("id,time,label,c0\n", "header"),
        ("series_id,timestamp,label,c0\na,0,0,1\na,1,0\n", ":3:"),
        ("series_id,timestamp,label,c0\na,0,0,x\n", ":2:"),
        ("series_id,timestamp,label,c0\na,0,0,1\na,0,0,2\n", "'a'"),
        ("series_id,timestamp,label,c0\na,0,0,1\na,1,1,2\n", "conflicting labels"),
    ],
)
def test_ingest_errors_point_at_the_problem(tmp_path, text, fragment):
    with pytest.raises(IngestError, match=fragment):
        ingest_csv(write(tmp_path, text))


# -------------------------------------------------------------- synthetic data

def test_synthetic_dataset_is_balanced_deterministic_and_solvable():
    a = synth_classification(rng_stream(10, "s"), 300)
    b = synth_classification(rng_stream(10, "s"), 300)
    labels = np.array([s.label for s in a])
    assert set(labels) == {0, 1, 2} and np.ptp(np.bincount(labels)) <= 1
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a, b))
    assert all(len(s) == 200 and np.array_equal(s.timestamps, np.arange(200.0)) for s in a)
    assert np.mean([decay_fit_classifier(s) == s.label for s in a]) >= 0.99
    with pytest.raises(ValueError):
        synth_classification(rng_stream(0, "s"), 2)


def test_split_keeps_both_sides_non_empty():
    data = synth_classification(rng_stream(11, "s"), 10)
    train, test = split_dataset(data, 0.3, rng_stream(0, "split"))
    assert len(test) == 3 and len(train) == 7
    assert {s.series_id for s in train}.isdisjoint(s.series_id for s in test)
    with pytest.raises(ValueError):
        split_dataset(data[:1], 0.5, rng_stream(0, "split"))


# -------------------------------------------------------------- sweep

def test_tiny_sweep_is_deterministic_and_summarized():
    data = synth_classification(rng_stream(12, "s"), 9)
    kw = dict(specs=[VARIANTS["tides"]], r_test_grid=(0.5, 0.9), seeds=(0,), epochs=1, batch=4)
    rows = run_sweep(data[:6], data[6:], **kw)
    again = run_sweep(data[:6], data[6:], **kw)
    assert [r.accuracy for r in rows] == [r.accuracy for r in again]
    assert {(r.spec, r.r_test) for r in rows} == {("tides", 0.5), ("tides", 0.9)}
    summary = summarize(rows + [SweepRow("tides", 1, 0.5, 0.5, 1.0)])
    assert summary["tides"][0.5] == pytest.approx((rows[0].accuracy + 1.0) / 2)
    with pytest.raises(ValueError):
        run_sweep(data[:6], data[6:], specs=[VARIANTS["s5"]], r_test_grid=(1.0,))


def test_pattern_checks_thresholds():
    grid = {r: 0.9 for r in R_TEST_GRID}
    summary = {"s5": dict(grid), "tides": {**grid, 0.9: 0.85}, "mamba": {**grid, 0.9: 0.6}}
    assert pattern_checks(summary) == {"lti_flat": True, "tides_robust": True, "gate_collapse": True}
    summary["s5"][0.1] = 0.95
    summary["tides"][0.9] = 0.75
    summary["mamba"][0.9] = 0.8
    assert not any(pattern_checks(summary).values())
