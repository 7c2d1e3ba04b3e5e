import math

import numpy as np
import pytest

from phn.data import EncodedBatch, SyntheticSpec, generate_synthetic
from phn.diagnostics import (
    DUMP_COLUMNS,
    REPORT_COLUMNS,
    SUMMARY_COLUMNS,
    GradientIntervalSpec,
    activation_dump,
    build_report,
    classify_interval,
    dump_from_report,
    read_table,
    report_from_logits,
    seeded_sample_ids,
    sigma_prime,
    ssg_scaling_ratios,
    weak_gradient_summary,
    write_activation_dump,
    write_report,
    write_scaling_ratio,
    write_summary,
)
from phn.errors import ConfigError, ContractError
from phn.model import ModelConfig, build, clone

EPSILONS = [1e-4, 0.01, 0.05, 0.1, 0.2, 0.249]


@pytest.fixture(scope="module")
def eval_batch():
    spec = SyntheticSpec(field_count=3, vocab_size_per_field=6, sample_count=400, seed=1)
    batch, _ = generate_synthetic(spec)
    return spec, batch


def model_for(spec, **kw):
    base = dict(vocab_sizes=spec.vocab_sizes, embedding_dim=4, cross_layers=1, field_layers=1, ffn_layers=1)
    base.update(kw)
    return build(ModelConfig(**base))


class TestIntervals:
    def test_zero_is_effective(self):
        for eps in EPSILONS:
            assert classify_interval(0.0, GradientIntervalSpec(eps)) == "effective"

    def test_default_boundary(self):
        spec = GradientIntervalSpec()
        s = (1 + math.sqrt(0.8)) / 2
        assert spec.boundary == pytest.approx(math.log(s / (1 - s)), abs=1e-15)
        assert spec.boundary == pytest.approx(2.887, abs=1e-3)
        assert classify_interval(3.0) == "weak"
        assert classify_interval(-3.0) == "weak"
        assert classify_interval(2.8) == "effective"

    def test_far_negative_always_weak(self):
        assert sigma_prime(-10.0) == pytest.approx(4.5396e-5, rel=1e-4)
        for eps in EPSILONS[1:]:
            assert classify_interval(-10.0, GradientIntervalSpec(eps)) == "weak"

    @pytest.mark.parametrize("eps", EPSILONS)
    def test_boundary_consistent(self, eps):
        spec = GradientIntervalSpec(eps)
        assert abs(sigma_prime(spec.boundary) - eps) < 1e-9
        assert classify_interval(spec.boundary * (1 - 1e-6), spec) == "effective"
        assert classify_interval(spec.boundary * (1 + 1e-6), spec) == "weak"

    @pytest.mark.parametrize("eps", [0.0, 0.25, -1.0, 0.3])
    def test_invalid_epsilon(self, eps):
        with pytest.raises(ConfigError):
            GradientIntervalSpec(eps)

    def test_vectorized(self):
        out = classify_interval(np.array([0.0, 5.0, -5.0]))
        assert list(out) == ["effective", "weak", "weak"]


class TestSampleSelection:
    def test_deterministic_and_sorted(self):
        a = seeded_sample_ids(1000, 200, 3)
        assert a.tolist() == seeded_sample_ids(1000, 200, 3).tolist()
        assert len(set(a.tolist())) == 200 and a.tolist() == sorted(a.tolist())

    def test_insufficient(self):
        with pytest.raises(ContractError):
            seeded_sample_ids(199, 200, 0)


class TestActivationDump:
    def test_two_hundred_rows_grouped_and_sorted(self, eval_batch):
        spec, batch = eval_batch
        dump = activation_dump(model_for(spec), batch, 200, seed=0)
        assert len(dump.rows) == 200
        labels = [r["label"] for r in dump.rows]
        assert labels == sorted(labels)
        for label in (0, 1):
            probs = [r["prob"] for r in dump.rows if r["label"] == label]
            assert probs == sorted(probs)
            ranks = [r["group_rank"] for r in dump.rows if r["label"] == label]
            assert ranks == list(range(len(ranks)))

    def test_partials_sum_to_logit(self, eval_batch):
        spec, batch = eval_batch
        dump = activation_dump(model_for(spec, bn="private", residual="prl"), batch, 200)
        for r in dump.rows:
            total = r["partial_ffn"] + r["partial_cross"] + r["partial_field"] + r["bias"]
            assert abs(total - r["logit"]) < 1e-10

    def test_single_tower_curve_is_model_curve(self, eval_batch):
        spec, batch = eval_batch
        model = model_for(spec, towers=("cross",))
        model.head_b.data[:] = -0.2
        dump = activation_dump(model, batch, 200)
        for r in dump.rows:
            assert r["conf_cross"] == pytest.approx(r["prob"], abs=1e-14)
            assert r["conf_ffn"] is None and r["partial_field"] is None

    def test_deterministic_given_checkpoint(self, eval_batch):
        spec, batch = eval_batch
        model = model_for(spec)
        assert activation_dump(model, batch, 200, seed=4).rows == activation_dump(clone(model), batch, 200, seed=4).rows

    def test_insufficient_samples(self, eval_batch):
        spec, batch = eval_batch
        with pytest.raises(ContractError):
            activation_dump(model_for(spec), batch.subset(np.arange(50)), 200)

    def test_public_bn_has_no_partials(self, eval_batch):
        spec, batch = eval_batch
        dump = activation_dump(model_for(spec, bn="public"), batch, 200)
        assert all(r["partial_ffn"] is None and r["conf_cross"] is None for r in dump.rows)

    def test_file(self, eval_batch, tmp_path):
        spec, batch = eval_batch
        dump = activation_dump(model_for(spec), batch, 200, meta={"checkpoint_sha256": "abc"})
        write_activation_dump(tmp_path / "d.tsv", dump)
        meta, columns, rows = read_table(tmp_path / "d.tsv")
        assert columns == DUMP_COLUMNS
        assert len(rows) == 200 and all(len(r) == len(DUMP_COLUMNS) for r in rows)
        assert meta["checkpoint_sha256"] == "abc" and meta["epsilon"] == "0.05"
        assert float(rows[0][columns.index("logit")]) == dump.rows[0]["logit"]


class TestReports:
    def test_interval_column_matches_spec(self, eval_batch, tmp_path):
        spec, batch = eval_batch
        model = model_for(spec)
        model.head_w.data *= 40  # push some logits past the boundary
        report = build_report("m", model, batch, GradientIntervalSpec(0.1), meta={"seed": 0})
        write_report(tmp_path / "r.tsv", report)
        meta, columns, rows = read_table(tmp_path / "r.tsv")
        assert columns == REPORT_COLUMNS
        assert meta["epsilon"] == "0.1" and meta["config_name"] == "m" and meta["seed"] == "0"
        kinds = {r[columns.index("interval")] for r in rows}
        assert kinds == {"weak", "effective"}
        boundary = GradientIntervalSpec(0.1).boundary
        for r in rows:
            z = float(r[columns.index("logit")])
            assert (r[columns.index("interval")] == "weak") == (abs(z) > boundary)

    def test_summary_of_zero_logits(self):
        r = report_from_logits("zero", [0, 1, 1, 0], np.zeros(4), np.arange(4))
        row = weak_gradient_summary([r])[0]
        assert row["weak_fraction"] == 0.0 and row["mean_sigma_prime"] == 0.25
        assert row["mean_pos_conf"] == 0.5 and row["mean_neg_conf"] == 0.5

    def test_identical_models_identical_rows(self, eval_batch):
        spec, batch = eval_batch
        ids = seeded_sample_ids(len(batch), 200, 0)
        model = model_for(spec)
        a = build_report("x", model, batch, sample_ids=ids)
        b = build_report("x", clone(model), batch, sample_ids=ids)
        rows = weak_gradient_summary({"a": a, "b": b})
        assert rows[0] == rows[1]

    def test_sample_mismatch(self, eval_batch):
        spec, batch = eval_batch
        model = model_for(spec)
        a = build_report("a", model, batch, sample_ids=np.arange(10))
        b = build_report("b", model, batch, sample_ids=np.arange(1, 11))
        with pytest.raises(ContractError):
            weak_gradient_summary([a, b])

    def test_summary_file(self, tmp_path):
        r = report_from_logits("z", [0, 1], np.array([-4.0, 0.5]), np.arange(2))
        write_summary(tmp_path / "s.tsv", weak_gradient_summary([r]), {"epsilon": 0.05})
        meta, columns, rows = read_table(tmp_path / "s.tsv")
        assert columns == SUMMARY_COLUMNS
        assert rows[0][columns.index("weak_fraction")] == "0.5"
        assert rows[0][columns.index("weak_fraction_neg")] == "1.0"


def ungated_ratio(model, batch):
    # |E| / (|E| + delta) per field: the exact value when E_sg == E_se
    se = np.abs(model.forward_parts(batch, training=False)["E_se"].data)
    return (se / (se + 1e-8)).mean(axis=(0, 2))


class TestScalingRatios:
    def test_embed_pattern_is_identity(self, eval_batch):
        spec, batch = eval_batch
        model = model_for(spec, selection="embed")
        towers, ratios = ssg_scaling_ratios(model, batch)
        assert towers == ["ffn", "cross", "field"]
        for row in ratios:
            np.testing.assert_allclose(row, ungated_ratio(model, batch), rtol=1e-12)

    def test_shape_and_file(self, eval_batch, tmp_path):
        spec, batch = eval_batch
        towers, ratios = ssg_scaling_ratios(model_for(spec, selection="Psa+Psg"), batch)
        assert ratios.shape == (3, spec.field_count)
        assert np.all(ratios > 0)
        write_scaling_ratio(tmp_path / "f.tsv", towers, ratios, {"selection": "Psa+Psg"})
        meta, columns, rows = read_table(tmp_path / "f.tsv")
        assert columns == ("tower", "field_1", "field_2", "field_3")
        assert [r[0] for r in rows] == towers
        np.testing.assert_array_equal(np.array([[float(v) for v in r[1:]] for r in rows]), ratios)

    def test_zero_gate_limit(self, eval_batch):
        spec, batch = eval_batch
        model = model_for(spec, selection="sa+sg")
        model.ssg.gates["ffn"].theta.data[:] = -800.0
        _, ratios = ssg_scaling_ratios(model, batch)
        np.testing.assert_allclose(ratios[0], ungated_ratio(model, batch), rtol=1e-12)


def test_report_on_single_sample():
    model = build(ModelConfig(vocab_sizes=(3, 3), embedding_dim=2, cross_layers=1, field_layers=1, ffn_layers=1))
    report = build_report("one", model, EncodedBatch([[1, 2]], [1]))
    assert len(report.logits) == 1
    row = report.summary_row()
    assert math.isnan(row["weak_fraction_neg"]) and math.isnan(row["mean_neg_conf"])
    assert dump_from_report(report).rows[0]["label"] == 1
