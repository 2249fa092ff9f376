import csv
import json

import pytest

from psmdetect.cli import main
from psmdetect.config import PipelineConfig, format_duration, parse_duration
from psmdetect.errors import ConfigError

from conftest import T1_ROWS


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    root = tmp_path_factory.mktemp("world")
    assert main(["synth", "--seed", "42", "--n-users", "300", "--n-messages", "1200",
                 "--time-span", "30", "--output-dir", str(root / "synth")]) == 0
    labels = list(csv.reader(open(root / "synth" / "labels.csv")))[1:]
    with open(root / "train.csv", "w") as fh:
        fh.write("user_id,label\n")
        for u, l in labels[::2]:
            fh.write(f"{u},{l}\n")
    return root


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


# -- config ------------------------------------------------------------------------


def test_duration_parsing():
    assert parse_duration("5d") == 432000
    assert parse_duration("12h") == 43200
    assert parse_duration("3600") == 3600
    assert parse_duration("1.5m") == 90
    assert format_duration(432000) == "5d"
    with pytest.raises(ConfigError):
        parse_duration("5 days")


def test_config_round_trip():
    cfg = PipelineConfig.loads("[decay]\ndelta = 2d\nsigma = 0.01\nk_set = km,nb\n[classify]\nk = 3\n")
    again = PipelineConfig.loads(cfg.dumps())
    assert again == cfg
    assert again.decay().delta == 2 * 86400 and again.decay().k_set == ("km", "nb")
    assert again.get("classify", "k") == 3
    assert again.digest() == cfg.digest()


@pytest.mark.parametrize(
    "text",
    [
        "[decay]\ndelt = 5d\n",          # unknown key
        "[decays]\ndelta = 5d\n",        # unknown section
        "[decay]\nsigma = -1\n",         # module validation
        "[causal]\nrho_mode = guess\n",
        "[classify]\nk = 0\n",
        "[log]\ntheta = many\n",
        "no section header\n",
    ],
)
def test_config_rejects(text):
    with pytest.raises(ConfigError):
        PipelineConfig.loads(text)


def test_defaults_match_documented_values():
    cfg = PipelineConfig()
    assert cfg.decay().delta == 5 * 86400 and cfg.decay().sigma == 0.001
    assert cfg.get("classify", "k") == 10
    assert cfg.get("evaluate", "period_length") == 10 * 86400


# -- exit codes ------------------------------------------------------------------------


def test_missing_input_is_usage_error(tmp_path, capsys):
    code, _, err = run(["stats", tmp_path / "nope.csv"], capsys)
    assert code == 2
    assert json.loads(err.strip().splitlines()[-1])["error"] == "usage"


def test_bad_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["stats", "--no-such-flag"])
    assert exc.value.code == 2


def test_validation_failure_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("user_id,message_id,timestamp\na,m1,1\nb,m1,-5\n")
    code, _, err = run(["ingest", bad], capsys)
    assert code == 1
    payload = json.loads(err.strip().splitlines()[-1])
    assert payload["line"] == 2


def test_unknown_config_key_exit_1(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[decay]\nwindow = 5d\n")
    log = tmp_path / "t1.csv"
    log.write_text("user_id,message_id,timestamp\n" + "".join(f"{u},{m},{t}\n" for u, m, t in T1_ROWS))
    code, _, err = run(["stats", log, "--config", cfg], capsys)
    assert code == 1 and "window" in err


# -- subcommands ------------------------------------------------------------------------


@pytest.fixture
def t1_csv(tmp_path):
    p = tmp_path / "t1.csv"
    p.write_text("user_id,message_id,timestamp\n" + "".join(f"{u},{m},{t}\n" for u, m, t in T1_ROWS))
    return p


def test_ingest_and_stats_t1(t1_csv, tmp_path, capsys):
    code, out, _ = run(["ingest", t1_csv], capsys)
    assert code == 0 and json.loads(out)["n_actions"] == 14
    code, out, _ = run(["stats", t1_csv, "--theta", "3"], capsys)
    report = json.loads(out)
    assert dict(map(tuple, report["size_histogram"])) == {2: 2, 3: 2, 4: 1}
    code, _, _ = run(["ingest", t1_csv, "--to", "jsonl", "-o", tmp_path / "t1.jsonl"], capsys)
    code, out, _ = run(["ingest", tmp_path / "t1.jsonl"], capsys)
    assert json.loads(out)["n_actions"] == 14


def test_metrics_t1(t1_csv, capsys):
    code, out, _ = run(["metrics", t1_csv, "--theta", "3", "--rho-mode", "computed"], capsys)
    rows = {r["user_id"]: r for r in csv.DictReader(out.splitlines())}
    assert float(rows["i"]["km"]) == 0.5
    assert float(rows["i"]["rel"]) == pytest.approx(0.996008, abs=1e-6)


def test_graph_and_communities(t1_csv, capsys):
    code, out, _ = run(["graph", t1_csv], capsys)
    lines = out.strip().splitlines()
    assert code == 0 and len(lines) == 6
    code, out, _ = run(["communities", t1_csv], capsys)
    assert out.splitlines()[0] == "user_id,community_id"


def test_flags_override_config(t1_csv, tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[decay]\ndelta = 1d\nsigma = 0.5\n[log]\ntheta = 5\n")
    out_dir = tmp_path / "run"
    code, _, err = run(["stats", t1_csv, "--config", cfg, "--theta", "3", "--output-dir", out_dir], capsys)
    assert code == 0
    manifest = json.loads((out_dir / "run_manifest.json").read_text())
    assert manifest["config"]["log"]["theta"] == 3  # flag wins
    assert manifest["config"]["decay"]["sigma"] == 0.5  # file value kept
    assert manifest["config"]["decay"]["delta"] == 86400
    assert "effective config" in err
    stats = json.loads((out_dir / "stats.json").read_text())
    assert sum(c["viral"] for c in stats["per_cascade"]) == 3  # theta 3, not 5


def test_pipeline_chain_and_manifest(world, capsys):
    log = world / "synth" / "log.csv"
    meta = json.loads((world / "synth" / "metadata.json").read_text())
    theta = meta["theta"]
    assert run(["decay", log, "--theta", theta, "--output-dir", world / "dec"], capsys)[0] == 0
    vec = world / "dec" / "decay_vectors.csv"
    assert run(["communities", log, "--output-dir", world / "com"], capsys)[0] == 0
    part = world / "com" / "partition.csv"
    code, _, _ = run(["classify", "c2dc", vec, "--labels", world / "train.csv", "--partition", part,
                      "--output-dir", world / "cls"], capsys)
    assert code == 0
    preds = world / "cls" / "predictions.csv"
    assert open(preds).readline().strip() == "user_id,predicted,score,provenance"
    code, out, _ = run(["evaluate", preds, "--truth", world / "synth" / "labels.csv"], capsys)
    report = json.loads(out)
    assert code == 0 and {"precision", "recall", "f1", "auc", "confusion"} <= set(report)

    manifest = json.loads((world / "cls" / "run_manifest.json").read_text())
    assert manifest["config"]["classify"]["k"] == 10
    assert manifest["seeds"] == {"louvain": 0}
    assert len(manifest["config_sha256"]) == 64
    assert {"psmdetect", "numpy", "scipy", "python"} <= set(manifest["versions"])
    assert str(preds) in manifest["outputs"]


def test_identical_runs_byte_identical(world, capsys, tmp_path):
    log = world / "synth" / "log.csv"
    outs = []
    for workers in (1, 1, 4):
        d = tmp_path / f"w{len(outs)}"
        assert run(["decay", log, "--theta", "8", "--workers", workers, "--output-dir", d], capsys)[0] == 0
        outs.append((d / "decay_vectors.csv").read_bytes())
    assert outs[0] == outs[1] == outs[2]


def test_evaluate_cv_and_external(world, capsys, tmp_path):
    log = world / "synth" / "log.csv"
    vec = tmp_path / "v.csv"
    run(["metrics", log, "--theta", "8", "-o", vec], capsys)
    truth = world / "synth" / "labels.csv"
    code, out, _ = run(["evaluate", "--cv", vec, "--truth", truth, "--classifier", "knn", "--folds", "5"], capsys)
    assert code == 0 and len(json.loads(out)["folds"]) == 5
    code, out, _ = run(["evaluate", "--cv", vec, "--truth", truth, "--classifier", "c2dc", "--log", log], capsys)
    assert code == 0
    code, _, err = run(["evaluate", "--cv", vec, "--truth", truth, "--classifier", "c2dc"], capsys)
    assert code == 2
    ext = tmp_path / "external.csv"
    ext.write_text("user_id,predicted,score\nu000,PSM,0.9\nu001,normal,0.1\n")
    code, out, _ = run(["evaluate", ext, "--truth", truth], capsys)
    assert code == 0 and json.loads(out)["n"] == 2


def test_classify_threshold_and_knn(world, capsys, tmp_path):
    vec = tmp_path / "v.csv"
    run(["metrics", world / "synth" / "log.csv", "--theta", "8", "-o", vec], capsys)
    code, out, _ = run(["classify", "threshold", vec, "--metric", "rel", "--thr-rel", "5"], capsys)
    assert code == 0 and "threshold(rel)" in out
    code, _, _ = run(["classify", "knn", vec], capsys)
    assert code == 2  # training labels required
    code, out, _ = run(["classify", "knn", vec, "--labels", world / "train.csv", "--k", "3"], capsys)
    assert code == 0 and ",knn" in out


def test_timeline_and_ttest(world, capsys, tmp_path):
    log = world / "synth" / "log.csv"
    truth = world / "synth" / "labels.csv"
    code, out, _ = run(["timeline", log, "--truth", truth, "--theta", "8", "--features", "causal",
                        "--classifier", "knn", "--horizon", "0.7", "--csv", tmp_path / "t.csv"], capsys)
    assert code == 0
    report = json.loads(out)
    assert len(report["periods"]) == 3
    assert (tmp_path / "t.csv").read_text().splitlines()[-1].startswith("remaining,")
    vec = tmp_path / "v.csv"
    run(["metrics", log, "--theta", "8", "-o", vec], capsys)
    code, out, _ = run(["ttest", vec, "--log", log], capsys)
    res = json.loads(out)
    assert code == 0 and 0 <= res["p_value"] <= 1 and res["reject_at"] == 0.01


def test_stats_plot(t1_csv, tmp_path, capsys):
    pytest.importorskip("matplotlib")
    png = tmp_path / "stats.png"
    code, _, _ = run(["stats", t1_csv, "--theta", "3", "--plot", png], capsys)
    assert code == 0 and png.read_bytes()[:4] == b"\x89PNG"
