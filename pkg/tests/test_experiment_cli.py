import json
import os

import numpy as np
import pytest

from mimicshift import cli
from mimicshift.experiment import (FILTER_NAMES, ConfigError, ExperimentConfig, StageError,
                                   load_attacker, load_normal, run_experiment)
from mimicshift.filters import DECISION_COLUMNS, decide, write_decision_log
from mimicshift.markov import PUBLISHED_PROFILES

SMALL = """
[corpus]
n_requests = 3000
[attack]
n_iterations = 10
generator_pretrain_epochs = 1
mimic_pretrain_epochs = 1
[traffic]
n_minutes = 4
requests_per_minute = 200
[filters.normal]
n_epochs = 1
"""


def _small(tmp_path, corpus_extra="", **kw):
    path = tmp_path / "small.toml"
    path.write_text(SMALL.replace("[corpus]\n", "[corpus]\n" + corpus_extra))
    return ExperimentConfig.load(str(path), out_dir=str(tmp_path / "out"), **kw)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg = _small(tmp)
    return cfg, run_experiment(cfg)


# ------------------------------------------------------------------ config


def test_defaults_preset_loads():
    cfg = ExperimentConfig.load("paper-defaults")
    assert cfg.section("filters")["rejection_rate"] == 0.8
    assert cfg.section("traffic")["alpha"] == 0.8
    assert cfg.section("attack")["omega"] == 3
    assert len(cfg.profiles()) == 3


@pytest.mark.parametrize("extra, match", [
    ("[traffic]\nalpha = 1.0\n", "alpha"),
    ("[filters]\nrejection_rate = 1.5\n", "rejection_rate"),
    ("[filters]\nnames = [\"N-only\", \"Sieve\"]\n", "unknown filters"),
    ("[filters]\nnames = [\"N-only\", \"N-only\"]\n", "twice"),
    ("[attack]\nomega = 0\n", "omega"),
    ("[corpus]\nsource = \"missing.csv\"\n", "does not exist"),
    ("[corpus]\npreset = \"nope\"\n", "preset"),
    ("[attack]\nprofiles = [{pi = [0.5, 0.4], trans = [[1, 0], [0, 1]]}]\n", "profiles"),
    ("[traffic]\ntest_minutes = 11\n", "test_minutes"),
])
def test_config_validation(extra, match):
    with pytest.raises(ConfigError, match=match):
        ExperimentConfig.from_toml(extra)


def test_bad_toml_and_unknown_preset():
    with pytest.raises(ConfigError, match="TOML"):
        ExperimentConfig.from_toml("[corpus\n")
    with pytest.raises(ConfigError, match="preset"):
        ExperimentConfig.load("no-such-preset")


def test_stage_seeds_distinct_and_stable():
    cfg = ExperimentConfig.load("paper-defaults")
    seeds = [cfg.stage_seed(s) for s in ("synth", "gan", "normal", "schedule", "generate")]
    assert len(set(seeds)) == len(seeds)
    assert ExperimentConfig.load("paper-defaults").stage_seed("gan") == seeds[1]


# -------------------------------------------------------------- pipeline


def test_every_filter_once_per_mode(small_run):
    _, res = small_run
    for mode in ("static", "shifting"):
        assert sorted(r.model for r in res.rows if r.dataset == mode) == sorted(FILTER_NAMES)


def test_outputs_written(small_run):
    cfg, res = small_run
    out = cfg.out_dir
    for name in ("metrics.json", "metrics.csv", "metrics_curves.csv", "summary.json"):
        assert os.path.exists(os.path.join(out, name))
    logs = os.listdir(os.path.join(out, "decisions"))
    assert len(logs) == 2 * len(FILTER_NAMES)
    header = open(os.path.join(out, "decisions", logs[0])).readline().strip()
    assert header == ",".join(DECISION_COLUMNS)
    assert set(os.listdir(res.checkpoints["attacker"])) >= {"generator.ckpt", "attacker.json"}


def test_n_only_unaffected_by_shifting(small_run):
    _, res = small_run
    a, b = res.row("static", "N-only"), res.row("shifting", "N-only")
    assert a.values() == b.values()


def test_static_run_replays_final_profile(small_run):
    _, res = small_run
    shifting = res.schedule["shifting"]["profile_index"]
    assert res.schedule["static"]["profile_index"] == [shifting[-1]] * len(shifting)


def _expected_class_freq(p, T=16):
    v, out = np.asarray(p.pi), np.zeros(3)
    for _ in range(T):
        out += v
        v = v @ p.trans
    return out / T


def test_schedule_log_matches_generated_conditions(small_run):
    _, res = small_run
    expected = [_expected_class_freq(p) for p in PUBLISHED_PROFILES]
    sched = res.schedule["shifting"]
    for k, audit in zip(sched["profile_index"], sched["audit"]):
        dist = [np.abs(np.asarray(audit["class_freq"]) - e).sum() for e in expected]
        assert int(np.argmin(dist)) == k


def test_enhanced_filters_use_randomized_intervals(small_run):
    _, res = small_run
    iv = res.schedule["shifting"]["intervals"]
    assert iv["Enhanced-Iterative"] == [[0, 4]]
    assert iv["Iterative"] == [[m, m + 1] for m in range(4)]


def test_stage_failure_writes_error_json(tmp_path):
    (tmp_path / "bad.csv").write_text("nonsense,header\n1,2\n")
    cfg = _small(tmp_path, 'source = "bad.csv"\n')
    with pytest.raises(StageError) as info:
        run_experiment(cfg)
    assert info.value.stage == "corpus"
    err = json.loads((tmp_path / "out" / "error.json").read_text())
    assert err["stage"] == "corpus" and err["rows"] == []


def test_bundles_round_trip(small_run):
    _, res = small_run
    gan = load_attacker(res.checkpoints["attacker"])
    normal, vocab = load_normal(res.checkpoints["normal"])
    assert vocab == gan.vocab_
    out = gan.generate_interval(PUBLISHED_PROFILES[0], 5, 0)
    assert len(out) == 5
    assert np.isfinite(normal.score_samples(out.token_sequences())).all()


# ------------------------------------------------------------------- CLI


def _main(argv, capsys):
    rc = cli.main(argv)
    cap = capsys.readouterr()
    return rc, cap.out, cap.err


def test_cli_synth_top3(tmp_path, capsys):
    rc, out, _ = _main(["synth", "--n-requests", "5000", "--out", str(tmp_path / "c.csv")], capsys)
    assert rc == 0
    assert json.loads(out)["top3_mass"] == pytest.approx(0.912, abs=0.02)


def test_cli_eval_hand_made_log(tmp_path, capsys):
    # 10 attacks (8 rejected) and 10 normals (1 rejected)
    scores = [0.1] * 8 + [0.9] * 2 + [0.2] + [0.8] * 9
    labels = ["attack"] * 10 + ["normal"] * 10
    d = decide(scores, 0.45)
    write_decision_log(tmp_path / "d.csv", d, labels)
    rc, out, _ = _main(["eval", str(tmp_path / "d.csv"), "--out", str(tmp_path / "e.json")],
                       capsys)
    assert rc == 0
    res = json.loads(out)
    assert res["acc"] == pytest.approx(0.85)
    assert res["fnr"] == pytest.approx(0.2) and res["fpr"] == pytest.approx(0.1)
    assert json.loads((tmp_path / "e.json").read_text())["schema_version"] == 1


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["synth", "--bogus"],
                                  ["eval"], ["synth", "--preset", "nope"]])
def test_cli_usage_errors(argv, capsys):
    rc, _, err = _main(argv, capsys)
    assert rc == 2
    assert json.loads(err)["error"] == "usage"


def test_cli_config_error(tmp_path, capsys):
    (tmp_path / "c.toml").write_text("[traffic]\nalpha = 2\n")
    rc, _, err = _main(["run", "--config", str(tmp_path / "c.toml")], capsys)
    assert rc == 2
    assert json.loads(err)["error"] == "config"


def test_cli_missing_file(tmp_path, capsys):
    rc, _, err = _main(["eval", str(tmp_path / "none.csv")], capsys)
    assert rc == 1
    assert "message" in json.loads(err)


def test_cli_report(small_run, capsys):
    cfg, _ = small_run
    rc, out, _ = _main(["report", os.path.join(cfg.out_dir, "metrics.json"),
                        "--reference", "HULK"], capsys)
    assert rc == 0
    assert "0.8997" in out and "Enhanced-Iterative" in out


def test_cli_attack_filter_eval_chain(small_run, tmp_path, capsys):
    cfg, res = small_run
    rc, _, _ = _main(["synth", "--n-requests", "300", "--seed", "1",
                      "--out", str(tmp_path / "normal.csv")], capsys)
    assert rc == 0
    rc, out, err = _main(["attack", "--model", res.checkpoints["attacker"],
                          "--normal", str(tmp_path / "normal.csv"), "--minutes", "3",
                          "--requests-per-minute", "50", "--out", str(tmp_path / "iv")], capsys)
    assert rc == 0, err
    assert len(json.loads(out)["profile_index"]) == 3
    rc, out, err = _main(["filter", "--filter", "N-over-D",
                          "--normal-model", res.checkpoints["normal"],
                          "--out", str(tmp_path / "d.csv"), str(tmp_path / "iv" / "minute_*.csv")],
                         capsys)
    assert rc == 0, err
    assert json.loads(out)["intervals"] == [[0, 1], [1, 2], [2, 3]]
    rc, out, err = _main(["eval", str(tmp_path / "d.csv"), "--interval", "2",
                          "--out", str(tmp_path / "e.json")], capsys)
    assert rc == 0, err
    assert 0 <= json.loads(out)["acc"] <= 1
