import csv
import json
from importlib import resources

import jsonschema
import numpy as np
import pytest

from medmeta import cli
from medmeta.core import AggregateMediationRecord, CorrelationRecord
from medmeta.errors import ConvergenceError
from medmeta.io import (
    InputFormatError,
    read_aggregate_csv,
    read_correlation_csv,
    read_ipd_csv,
    write_aggregate_csv,
    write_correlation_csv,
    write_ipd_csv,
    write_forest_csv,
)
from medmeta.meta_engines import Z975, random_effect_meta
from medmeta.simlab import DGPConfig, Dist, generate_aggregates, generate_study
from medmeta.within_study import fit_working_models

LINEAR = DGPConfig(alpha1=0.5, alpha2=(0.3,), beta2=0.4, beta3=(0.5,),
                   l_dist=(Dist.normal(0, 1),), n=600)


def schema():
    text = resources.files("medmeta").joinpath("schemas/report.schema.json").read_text()
    return json.loads(text)


def run(argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    agg = generate_aggregates(LINEAR, 8, seed=3, tau2=0.005)
    write_aggregate_csv(d / "agg.csv", agg.aggregates)
    write_correlation_csv(d / "cor.csv", agg.correlations)
    for i in range(2):
        write_ipd_csv(d / f"k{i}.csv", generate_study(LINEAR.replace(seed=10 + i), f"k{i}"))
    write_ipd_csv(d / "target.csv",
                  generate_study(LINEAR.replace(seed=20, l_dist=(Dist.normal(1, 2),)), "target"))
    j = generate_study(LINEAR.replace(seed=30, alpha1=0.3), "j")
    with open(d / "j.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "m", "y", "l1"])
        for row in zip(j.x, j.m, j.l[:, 0]):
            w.writerow([repr(float(row[0])), repr(float(row[1])), "", repr(float(row[2]))])
    (d / "dgp.json").write_text(LINEAR.to_json())
    return d


def commands(d, out):
    """One invocation per subcommand writing to ``out``."""
    return {
        "masem-param": ["masem-param", "--in", d / "agg.csv", "--method", "reml"],
        "masem-corr": ["masem-corr", "--in", d / "cor.csv"],
        "ml": ["ml", "--in", d / "agg.csv", "--bootstrap", 200, "--seed", 7],
        "ipd-transport": ["ipd-transport", "--source", d / "k0.csv", d / "k1.csv",
                          "--target", d / "target.csv", "--bootstrap", 50, "--seed", 3],
        "xm-integrate": ["xm-integrate", "--outcome", d / "k0.csv", d / "k1.csv",
                         "--mediator", d / "j.csv", "--bootstrap", 50, "--seed", 3],
        "simulate": ["simulate", "--config", d / "dgp.json", "--data", out.with_suffix(".csv"),
                     "--kind", "aggregates", "--k", 3, "--seed", 5],
        "demo-appendix1": ["demo-appendix1", "--n", 1000, "--seed", 11],
    }


class TestReaders:
    def test_aggregate_round_trip(self, tmp_path):
        recs = [AggregateMediationRecord("A", 0.2, 0.05, 100),
                AggregateMediationRecord("B", 0.1, 0.04, 120, 0.5, 0.1, 0.2, 0.05)]
        write_aggregate_csv(tmp_path / "a.csv", recs)
        assert read_aggregate_csv(tmp_path / "a.csv") == recs

    def test_correlation_empty_field_is_missing(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("study_id,n,r_xy,r_xm,r_my\nA,100,,0.3,0.2\n")
        (rec,) = read_correlation_csv(p)
        assert rec.r_xy is None and rec.r_xm == 0.3

    def test_correlation_round_trip(self, tmp_path):
        recs = [CorrelationRecord("A", 50, r_xm=0.3), CorrelationRecord("B", 80, 0.1, 0.2, 0.3)]
        write_correlation_csv(tmp_path / "c.csv", recs)
        assert [r.to_json() for r in read_correlation_csv(tmp_path / "c.csv")] == \
            [r.to_json() for r in recs]

    def test_na_token_rejected_with_position(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("study_id,theta_hat,se_theta,n\nA,0.2,0.05,100\nB,NA,0.05,100\n")
        with pytest.raises(InputFormatError, match=r"a\.csv:3:2:"):
            read_aggregate_csv(p)

    def test_missing_required_value(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("study_id,theta_hat,se_theta,n\nA,0.2,,100\n")
        with pytest.raises(InputFormatError, match=r":2:3: missing value"):
            read_aggregate_csv(p)

    def test_ragged_row(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("study_id,theta_hat,se_theta,n\nA,0.2,0.05\n")
        with pytest.raises(InputFormatError, match=r":2:4: expected 4 fields"):
            read_aggregate_csv(p)

    def test_unknown_column(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("study_id,theta,se_theta,n\nA,0.2,0.05,10\n")
        with pytest.raises(InputFormatError, match=r":1:2: unexpected column"):
            read_aggregate_csv(p)

    def test_record_validation_is_positioned(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("study_id,theta_hat,se_theta,n\nA,0.2,-0.05,10\n")
        with pytest.raises(InputFormatError, match=r":2:1:"):
            read_aggregate_csv(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputFormatError, match=r":0:0:"):
            read_aggregate_csv(tmp_path / "nope.csv")

    def test_ipd_round_trip(self, tmp_path):
        s = generate_study(LINEAR, "trial")
        write_ipd_csv(tmp_path / "trial.csv", s)
        back = read_ipd_csv(tmp_path / "trial.csv")
        assert back.study_id == "trial"
        np.testing.assert_array_equal(back.m, s.m)
        np.testing.assert_array_equal(back.l, s.l)

    def test_ipd_xm_only(self, data):
        j = read_ipd_csv(data / "j.csv")
        assert not j.has_outcome and j.covariate_names == ("l1",)

    def test_ipd_header_order(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("m,x\n0,1\n")
        with pytest.raises(InputFormatError, match=r":1:1:"):
            read_ipd_csv(p)

    def test_forest_csv(self, tmp_path):
        res = random_effect_meta([0.1, 0.3], [0.01, 0.02], study_ids=["a", "b"])
        write_forest_csv(tmp_path / "f.csv", res, Z975)
        with open(tmp_path / "f.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["study_id"] for r in rows] == ["a", "b", "pooled"]
        assert sum(float(r["weight"]) for r in rows[:2]) == pytest.approx(1.0)
        assert float(rows[2]["estimate"]) == pytest.approx(res.estimate)


class TestCommands:
    @pytest.mark.parametrize("name", ["masem-param", "masem-corr", "ml", "ipd-transport",
                                      "xm-integrate", "simulate", "demo-appendix1"])
    def test_report_valid_and_repeatable(self, data, tmp_path, name):
        texts = []
        for rep in range(2):
            out = tmp_path / f"{name}-{rep}.json"
            argv = commands(data, tmp_path / name)[name]
            assert run([*argv, "--out", out]) == 0
            texts.append(out.read_bytes())
        assert texts[0] == texts[1]
        report = json.loads(texts[0])
        jsonschema.validate(report, schema())
        assert report["provenance"]["command"] == name
        assert report["provenance"]["timestamp"] is None

    def test_forest_written_for_meta_runs(self, data, tmp_path):
        out = tmp_path / "param.json"
        assert run(["masem-param", "--in", data / "agg.csv", "--out", out]) == 0
        forest = tmp_path / "param.forest.csv"
        assert forest.read_text().splitlines()[0] == "study_id,estimate,se,ci_low,ci_high,weight"

    def test_config_echoes_defaults(self, data, tmp_path):
        out = tmp_path / "r.json"
        run(["ml", "--in", data / "agg.csv", "--bootstrap", 100, "--seed", 1, "--out", out])
        cfg = json.loads(out.read_text())["config"]
        assert cfg["method"] == "reml" and cfg["bootstrap"] == 100 and cfg["seed"] == 1

    def test_transport_matches_single_study_product(self, data, tmp_path):
        out = tmp_path / "t.json"
        assert run(["ipd-transport", "--source", data / "k0.csv", "--target", data / "target.csv",
                    "--x", 0, "--xstar", 1, "--bootstrap", 20, "--seed", 1, "--out", out]) == 0
        report = json.loads(out.read_text())
        (est,) = report["results"]["estimates"]
        wm = fit_working_models(read_ipd_csv(data / "k0.csv"), ("l1",))
        assert est["theta_jk"] == pytest.approx(wm.alpha1 * wm.beta2, abs=1e-8)
        assert est["theta_jk"] == pytest.approx(est["naive_product"], abs=1e-8)
        # the same product as the aggregate pipeline would report for this study
        agg = tmp_path / "k0-agg.csv"
        se = float(np.hypot(wm.alpha1 * wm.outcome.se_beta2, wm.beta2 * wm.mediator.se_alpha1))
        write_aggregate_csv(agg, [AggregateMediationRecord("k0", wm.alpha1 * wm.beta2, se, 600)])
        assert read_aggregate_csv(agg)[0].theta_hat == pytest.approx(est["theta_jk"], abs=1e-8)

    def test_demo_divergence(self, tmp_path):
        out = tmp_path / "demo.json"
        assert run(["demo-appendix1", "--seed", 11, "--out", out]) == 0
        results = json.loads(out.read_text())["results"]
        assert results["comparison"]["divergence"] is True
        for study in ("narrow", "wide"):
            assert {"standardized", "unstandardized"} <= set(results["studies"][study])

    def test_seed_drawn_and_echoed(self, tmp_path, capsys):
        out = tmp_path / "demo.json"
        assert run(["demo-appendix1", "--n", 500, "--out", out]) == 0
        echoed = int(capsys.readouterr().err.split("seed:")[1].split()[0])
        report = json.loads(out.read_text())
        assert report["provenance"]["seed"] == echoed == report["config"]["seed"]
        again = tmp_path / "again.json"
        run(["demo-appendix1", "--n", 500, "--seed", echoed, "--out", again])
        assert again.read_bytes() == out.read_bytes()

    def test_simulate_uses_config_seed(self, data, tmp_path):
        out = tmp_path / "s.json"
        assert run(["simulate", "--config", data / "dgp.json", "--data", tmp_path / "s.csv",
                    "--out", out]) == 0
        assert json.loads(out.read_text())["provenance"]["seed"] == LINEAR.seed

    def test_timestamp_opt_in(self, tmp_path):
        out = tmp_path / "demo.json"
        run(["demo-appendix1", "--n", 500, "--seed", 1, "--timestamp", "--out", out])
        assert json.loads(out.read_text())["provenance"]["timestamp"]


class TestExitCodes:
    def test_validation_error(self, tmp_path, capsys):
        p = tmp_path / "a.csv"
        p.write_text("study_id,theta_hat,se_theta,n\nA,x,0.05,100\n")
        assert run(["masem-param", "--in", p, "--out", tmp_path / "r.json"]) == 1
        assert "a.csv:2:2" in capsys.readouterr().err

    def test_too_few_studies(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("study_id,theta_hat,se_theta,n\nA,0.2,0.05,100\n")
        assert run(["masem-param", "--in", p, "--out", tmp_path / "r.json"]) == 1

    def test_convergence_error(self, data, tmp_path, monkeypatch):
        def fail(*args, **kwargs):
            raise ConvergenceError("no convergence", last_iterate=None)

        monkeypatch.setattr(cli, "parameter_based_masem", fail)
        assert run(["masem-param", "--in", data / "agg.csv", "--out", tmp_path / "r.json"]) == 2

    def test_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            run(["masem-param", "--out", tmp_path / "r.json"])
        assert info.value.code == 1

    def test_bad_config(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"alpha1": 0.5,\n "l_dist": [{"kind": "normal"}]}')
        assert run(["simulate", "--config", cfg, "--data", tmp_path / "d.csv", "--seed", 1,
                    "--out", tmp_path / "r.json"]) == 1
        cfg.write_text('{"alpha1": 0.5,')
        assert run(["simulate", "--config", cfg, "--data", tmp_path / "d.csv", "--seed", 1,
                    "--out", tmp_path / "r.json"]) == 1
