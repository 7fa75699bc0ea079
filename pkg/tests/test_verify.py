import csv

import numpy as np
import pytest

from chaingraph import verify as V
from chaingraph.distributions import Binary, Multilabel
from chaingraph.graph import augment_dropout, sequential


class TestReport:
    def _rep(self):
        rep = V.VerificationReport("demo")
        rep.add("a", 1.0, 1.0, 0.0, 1e-12)
        rep.add("b", 2.0, 2.5, 0.5, 1.0)
        rep.add("c", 0.0, 0.0, 3.0, V.INF)
        return rep

    def test_pass_and_max_error_ignores_unchecked(self):
        rep = self._rep()
        assert rep.passed and rep.max_error == 0.5

    def test_fails_iff_a_record_exceeds(self):
        rep = self._rep()
        rep.add("d", 0.0, 1.0, 1.0, 0.1)
        assert not rep.passed and rep.first_failure["point"] == "d"
        assert "first violation at d" in rep.summary()

    def test_nan_error_fails(self):
        rep = V.VerificationReport("x")
        rep.add("p", np.nan, 0.0, np.nan, 1.0)
        assert not rep.passed

    def test_tolerance_override(self):
        rep = self._rep().with_tolerance(0.0)
        assert not rep.passed and rep.first_failure["point"] == "b"
        assert rep.records[2]["tolerance"] == V.INF

    def test_csv(self, tmp_path):
        self._rep().to_csv(tmp_path / "r.csv")
        rows = list(csv.DictReader(open(tmp_path / "r.csv")))
        assert len(rows) == 3 and rows[1]["error"] == "0.5"

    def test_relative_error_floor(self):
        assert V.relative_error([1e-9], [2e-9]) == pytest.approx(1e-3)
        assert V.relative_error([1.0], [1.1]) == pytest.approx(0.1 / 1.1)


class TestChecks:
    def test_activations_scatter_data(self, tmp_path):
        rep = V.verify_activations()
        assert rep.passed
        rows = [r for r in rep.records if r["activation"] == "relu"]
        assert len(rows) == 1201 and rep.settings["n_samples"] == 200
        assert {"e", "value", "oracle", "mc_mean", "mc_se", "mc_var"} <= set(rows[0])
        by = {r["activation"]: max(x["error"] for x in rep.records if x["activation"] == r["activation"])
              for r in rep.records}
        assert by["sigmoid"] <= 1e-12 and by["tanh"] <= 1e-12 and by["softplus"] <= 0.05
        zero = next(r for r in rows if r["e"] == 0.0)
        assert zero["value"] == 0.0

    def test_mc(self):
        assert V.verify_mc(n=10 ** 5).passed

    def test_marginals(self):
        rep = V.verify_marginals(seeds=range(30))
        assert rep.passed

    def test_marginals_zero_scale(self):
        # independent layers: only summation roundoff remains
        errs = V.marginal_errors((2, 2, 2), (0.0,), range(5))
        assert errs.max() <= 1e-15

    def test_dropout(self):
        assert V.verify_dropout_scaling(n_masks=10 ** 4).passed

    def test_dropout_keep_all(self):
        g = augment_dropout(sequential([3, 4, 2], Binary(-1, 1), Multilabel(2)), "h1", 1.0)
        rep = V.verify_dropout_scaling(g, n_masks=0)
        assert rep.max_error == 0.0

    def test_residual(self):
        rep = V.verify_residual(n_inputs=20)
        assert rep.passed
        assert any(r["point"].startswith("nested") for r in rep.records)
        assert any(r["point"].startswith("zero-refining vs base") for r in rep.records)

    def test_gradients(self):
        rep = V.verify_gradients(seeds=range(3))
        assert rep.passed
        assert rep.records[0]["point"] == "linear net" and rep.records[0]["error"] <= 1e-8

    def test_reproducible(self, tmp_path):
        V.verify_residual(n_inputs=5).to_csv(tmp_path / "a.csv")
        V.verify_residual(n_inputs=5).to_csv(tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_registry(self):
        assert set(V.CHECKS) == {"activations", "mc", "marginals", "dropout", "residual", "gradients"}
