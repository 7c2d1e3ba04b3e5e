import json
from pathlib import Path

import numpy as np
import pytest

from phn.data import SyntheticSpec, generate_synthetic, split
from phn.diagnostics import (
    GradientIntervalSpec,
    dump_from_report,
    read_table,
    report_from_logits,
    weak_gradient_summary,
    write_activation_dump,
    write_report,
    write_scaling_ratio,
    write_summary,
)
from phn.errors import ConfigError
from phn.experiments import (
    ACTIVATION_ORDER,
    MATRIX_COLUMNS,
    RESIDUAL_BN_GRID,
    SELECTION_GRID,
    _rank_desc,
    default_matrix,
    load_matrix,
    resolve_config,
    run_diagnose,
    spearman,
    validate_matrix,
    write_matrix_summary,
)
from phn.model import ModelConfig, load_checkpoint
from phn.ssg import SELECTION_PATTERNS
from phn.training import TrainSpec, evaluate

from golden_util import check_golden, file_kind, layout

TINY = SyntheticSpec(field_count=3, vocab_size_per_field=5, sample_count=1500, seed=0)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    batch, _ = generate_synthetic(TINY)
    tr, va, te = split(batch, (0.6, 0.2, 0.2), 0)
    cfg = ModelConfig(vocab_sizes=TINY.vocab_sizes, embedding_dim=2, cross_layers=1, field_layers=1, ffn_layers=1)
    spec = TrainSpec(epochs=1, batch_size=128)
    out = tmp_path_factory.mktemp("diag")
    files = run_diagnose(str(out), cfg, spec, tr, va, te, meta={"data": "tiny"})
    return out, files, cfg, spec, (tr, va, te)


class TestMatrix:
    def test_default_groups(self):
        doc = default_matrix()
        validate_matrix(doc)
        assert list(doc["groups"]) == ["residual_bn", "selection"]
        assert len(doc["groups"]["residual_bn"]) == 9
        assert tuple(doc["groups"]["selection"]) == SELECTION_PATTERNS

    def test_residual_bn_grid_covers_product(self):
        combos = {(o["residual"], o["bn"]) for o, _ in RESIDUAL_BN_GRID.values()}
        assert combos == {(r, b) for r in ("base", "rl", "prl") for b in ("none", "public", "private")}

    def test_selection_grid_only_changes_selection(self):
        assert all(set(o) == {"selection"} for o, _ in SELECTION_GRID.values())

    def test_load_round_trip(self, tmp_path):
        (tmp_path / "m.json").write_text(json.dumps(default_matrix()))
        assert load_matrix(tmp_path / "m.json") == default_matrix()

    @pytest.mark.parametrize("doc", [
        {}, {"groups": {}}, {"groups": {"g": {}}},
        {"groups": {"g": {"c": {"overrides": {}, "extra": 1}}}},
        {"groups": {"g": {"..": {"overrides": {}}}}},
    ])
    def test_invalid(self, doc):
        with pytest.raises(ConfigError):
            validate_matrix(doc)

    def test_resolve_config(self):
        base = ModelConfig(vocab_sizes=(3, 3), embedding_dim=2)
        assert resolve_config(base, {"bn": "private"}).bn == "private"
        assert resolve_config(base, {}) == base
        with pytest.raises(ConfigError):
            resolve_config(base, {"depth": 3})


class TestRanking:
    def test_rank_desc_ties_by_name(self):
        assert _rank_desc([0.7, 0.9, 0.7], ["b", "c", "a"]) == [3, 1, 2]

    def test_spearman(self):
        assert spearman([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
        assert spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
        assert np.isnan(spearman([1], [1]))


class TestRunDiagnose:
    def test_layout_golden(self, tiny_run):
        out, files, *_ = tiny_run
        check_golden("diagnose_layout.json", json.dumps(layout(str(out), files), indent=2, sort_keys=True) + "\n")

    def test_report_counts(self, tiny_run):
        out, files, *_ = tiny_run
        reports = [f for f in files if file_kind(f) == "report"]
        assert len([f for f in reports if f.startswith("residual_bn/")]) == 9
        assert len([f for f in reports if f.startswith("selection/")]) == 7
        dumps = [Path(f).stem[5:] for f in files if Path(f).stem.startswith("dump_")]
        assert sorted(dumps) == sorted(ACTIVATION_ORDER)

    def test_checkpoints_reproduce_reports(self, tiny_run):
        out, files, _, _, (_, _, te) = tiny_run
        meta, columns, rows = read_table(out / "selection" / "sa.tsv")
        model = load_checkpoint(out / meta["checkpoint"])
        logits = np.array([float(r[columns.index("logit")]) for r in rows])
        _, _, probs = evaluate(model, te)
        np.testing.assert_allclose(1 / (1 + np.exp(-logits)), probs, rtol=1e-12)

    def test_summary_matches_metrics(self, tiny_run):
        out, _, _, _, (_, va, te) = tiny_run
        meta, columns, rows = read_table(out / "residual_bn" / "summary.tsv")
        assert columns == MATRIX_COLUMNS
        assert meta["note"] and meta["data"] == "tiny"
        by_name = {r[0]: dict(zip(columns, r)) for r in rows}
        rmeta, _, _ = read_table(out / "residual_bn" / "prl.tsv")
        model = load_checkpoint(out / rmeta["checkpoint"])
        assert float(by_name["prl"]["test_auc"]) == evaluate(model, te)[1]
        ranks = sorted(int(r["rank"]) for r in by_name.values())
        assert ranks == list(range(1, 10))
        assert meta["ordering"].split(" > ")[0] == min(by_name.values(), key=lambda r: int(r["rank"]))["config"]

    def test_public_private_bn_rows_agree(self, tiny_run):
        out, *_ = tiny_run
        _, columns, rows = read_table(out / "residual_bn" / "summary.tsv")
        by_name = {r[0]: r for r in rows}
        metrics = slice(columns.index("val_logloss"), columns.index("parameter_count") + 1)
        for res in ("base", "rl", "prl"):
            assert by_name[f"{res}+bn"][metrics] == by_name[f"{res}+pbn"][metrics]

    def test_summed_dump_is_sum_of_single_towers(self, tiny_run):
        out, *_ = tiny_run
        _, columns, rows = read_table(out / "activations" / "dump_towers_summed.tsv")
        singles = {}
        for t in ("ffn", "cross", "field"):
            _, c, rs = read_table(out / "activations" / f"dump_tower_{t}.tsv")
            singles[t] = {r[c.index("sample")]: float(r[c.index("logit")]) for r in rs}
        for r in rows:
            sid = r[columns.index("sample")]
            total = sum(singles[t][sid] for t in singles)
            assert float(r[columns.index("logit")]) == pytest.approx(total, abs=1e-12)
            assert float(r[columns.index("partial_cross")]) == singles["cross"][sid]

    def test_dumps_share_samples(self, tiny_run):
        out, *_ = tiny_run
        seen = None
        for name in ACTIVATION_ORDER:
            _, c, rs = read_table(out / "activations" / f"dump_{name}.tsv")
            ids = sorted(int(r[c.index("sample")]) for r in rs)
            assert seen is None or ids == seen
            seen = ids

    def test_rerun_is_bitwise_identical(self, tiny_run, tmp_path):
        out, files, cfg, spec, (tr, va, te) = tiny_run
        again = run_diagnose(str(tmp_path), cfg, spec, tr, va, te, meta={"data": "tiny"})
        assert again == files
        for rel in files:
            assert (out / rel).read_bytes() == (tmp_path / rel).read_bytes(), rel

    def test_custom_matrix(self, tiny_run, tmp_path):
        _, _, cfg, spec, (tr, va, te) = tiny_run
        doc = {"groups": {"mine": {"a": {"overrides": {"bn": "private"}}, "b": {"overrides": {}}}}}
        files = run_diagnose(str(tmp_path), cfg, spec, tr, va, te, matrix=doc)
        assert "mine/a.tsv" in files and "mine/summary.tsv" in files
        meta, columns, rows = read_table(tmp_path / "mine" / "summary.tsv")
        assert meta["reference_ordering"] == ""
        assert all(r[columns.index("reference_auc")] == "" for r in rows)


class TestWriterGolden:
    """Byte-exact writer output on fixed inputs (no training involved)."""

    def report(self):
        logits = np.array([-4.0, -0.5, 0.25, 3.5])
        parts = {"ffn": np.array([-1.0, -0.25, 0.0, 1.5]), "cross": np.array([-2.0, 0.0, 0.5, 1.0]),
                 "field": np.array([-0.5, 0.25, -0.75, 0.5])}
        return report_from_logits("fixed", [0, 1, 0, 1], logits, [7, 3, 11, 2], GradientIntervalSpec(0.05),
                                  meta={"seed": 0}, parts=parts, bias=-0.5)

    def test_report(self, tmp_path):
        write_report(tmp_path / "r.tsv", self.report())
        check_golden("report.tsv", (tmp_path / "r.tsv").read_text())

    def test_dump(self, tmp_path):
        write_activation_dump(tmp_path / "d.tsv", dump_from_report(self.report()))
        check_golden("activation_dump.tsv", (tmp_path / "d.tsv").read_text())

    def test_weak_gradient_summary(self, tmp_path):
        write_summary(tmp_path / "s.tsv", weak_gradient_summary([self.report()]), {"epsilon": 0.05})
        check_golden("weak_gradient_summary.tsv", (tmp_path / "s.tsv").read_text())

    def test_scaling_ratio(self, tmp_path):
        write_scaling_ratio(tmp_path / "g.tsv", ["ffn", "cross", "field"],
                            np.array([[1.0, 0.5, 0.25], [0.75, 1.0, 0.125], [0.5, 0.5, 0.5]]), {"selection": "sa+sg"})
        check_golden("scaling_ratio.tsv", (tmp_path / "g.tsv").read_text())

    def test_matrix_summary(self, tmp_path):
        rows = [{"config": "a", "val_logloss": 0.5, "val_auc": 0.75, "test_logloss": 0.625, "test_auc": 0.7,
                 "weak_fraction": 0.0, "mean_sigma_prime": 0.25, "parameter_count": 10, "best_epoch": 1,
                 "rank": 1, "reference_auc": 0.8, "reference_rank": 1},
                {"config": "b", "val_logloss": 0.6, "val_auc": 0.5, "test_logloss": 0.7, "test_auc": 0.5,
                 "weak_fraction": 0.5, "mean_sigma_prime": 0.125, "parameter_count": 12, "best_epoch": 2,
                 "rank": 2, "reference_auc": None, "reference_rank": ""}]
        write_matrix_summary(tmp_path / "m.tsv", rows, {"group": "g", "ordering": "a > b"})
        check_golden("matrix_summary.tsv", (tmp_path / "m.tsv").read_text())
