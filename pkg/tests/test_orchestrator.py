import json

import numpy as np
import pytest
from scipy import stats

from carl_fdia.env import NullDetector, ScriptedAdversary, SyntheticAdversary
from carl_fdia.errors import ConfigError, DatasetError, InvalidInputError, LibraryStateError
from carl_fdia.orchestrator import (
    AgentLibrary,
    Experiment,
    OfflineConfig,
    load_config,
    rehearsal_distribution,
    stream_rng,
    train_offline_detector,
    uniform_distribution,
)

from .oracles import chi_square_statistic

TINY = [
    "predictor.rollouts=4", "predictor.epochs=2",
    "offline.train_episodes=20", "offline.holdout_episodes=5", "offline.epochs=2", "offline.hidden=[16]",
    "adversary.hidden=[16]", "adversary.ppo.rollout_batch_episodes=5", "adversary.ppo.minibatch_size=128",
    "detector.ppo.rollout_batch_episodes=5", "detector.ppo.minibatch_size=128",
    "carl.episodes=10", "evaluation.episodes=2", "evaluation.stamp_episodes=2",
    "evaluation.explain_episodes=2", "evaluation.log_episodes=1",
]


def tiny_config(*extra):
    return load_config(None, TINY + list(extra))


def test_rehearsal_distribution_examples():
    np.testing.assert_allclose(rehearsal_distribution(4), [0.8, 0.05, 0.05, 0.05, 0.05])
    np.testing.assert_allclose(rehearsal_distribution(1), [0.8, 0.2])
    with pytest.raises(LibraryStateError):
        rehearsal_distribution(0)
    with pytest.raises(InvalidInputError):
        rehearsal_distribution(2, anchor=1.5)


def test_uniform_distribution():
    np.testing.assert_allclose(uniform_distribution(5), [0.2] * 5)
    with pytest.raises(LibraryStateError):
        uniform_distribution(0)


def test_environment_sampling_passes_chi_square(scenario):
    probs = rehearsal_distribution(4)
    opponents = [SyntheticAdversary(10)] + [
        ScriptedAdversary(lambda w, b=b: (b, -1.0, False), name=f"s{b}") for b in range(1, 5)]
    env = scenario.defender_env(opponents, probs)
    env.reset(10_000, np.random.default_rng(0))
    counts = np.bincount(env.assign, minlength=5)
    stat = chi_square_statistic(counts, probs)
    assert stat == pytest.approx(stats.chisquare(counts, 10_000 * probs).statistic)
    assert stat < stats.chi2.ppf(0.99, df=4)


def test_streams_are_independent():
    a = stream_rng(0, "carl-adversary", 1).random(4)
    assert not np.array_equal(a, stream_rng(0, "carl-detector", 1).random(4))
    assert not np.array_equal(a, stream_rng(0, "carl-adversary", 2).random(4))
    assert np.array_equal(a, stream_rng(0, "carl-adversary", 1).random(4))


def test_offline_detector_on_restricted_generator(scenario):
    # a single target bus with a fixed fraction is easy to separate
    adversary = SyntheticAdversary(10, fractions=(0.2,), altered_values=(-1.0,), buses=(4,))
    cfg = OfflineConfig(train_episodes=60, holdout_episodes=20, epochs=20, hidden=(64, 64))
    _, report = train_offline_detector(scenario, cfg, np.random.default_rng(0), np.random.default_rng(1),
                                       adversary=adversary, require_all_classes=False)
    assert report["holdout_accuracy"] > 0.9


def test_offline_detector_rejects_single_class(scenario):
    muted = ScriptedAdversary(lambda w: (1, 0.0, True))
    cfg = OfflineConfig(train_episodes=2, holdout_episodes=1, epochs=1, hidden=(8,))
    with pytest.raises(DatasetError):
        train_offline_detector(scenario, cfg, np.random.default_rng(0), np.random.default_rng(1),
                               adversary=muted, require_all_classes=False)
    with pytest.raises(DatasetError):
        train_offline_detector(scenario, cfg, np.random.default_rng(0), np.random.default_rng(1), adversary=muted)


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(None, ["carl.unknown=1"])
    with pytest.raises(ConfigError):
        load_config(None, ["seed=-1"])
    with pytest.raises(ConfigError):
        load_config(None, ["rcarl.anchor_probability=2"])
    with pytest.raises(ConfigError):
        load_config(None, ["adversary.ppo.clip_epsilon=0"])
    with pytest.raises(ConfigError):
        load_config(None, ["carl=3"])
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


def test_partial_config_file_merges(tmp_path):
    (tmp_path / "p.json").write_text(json.dumps({"carl": {"episodes": 7}}))
    config = load_config(tmp_path / "p.json")
    assert config["carl"]["episodes"] == 7 and config["carl"]["iterations"] == 4


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    exp = Experiment(tiny_config("carl.iterations=1"), out)
    exp.run("report")
    return out


def test_tiny_run_produces_reports(tiny_run):
    for rel in ("report.md", "evaluation/cross_eval.csv", "evaluation/forgetting.csv",
                "explain/droop_hist.csv", "library/library.json", "library/A1/curve.csv"):
        assert (tiny_run / rel).exists(), rel
    manifest = json.loads((tiny_run / "manifest.json").read_text())
    assert [s["name"] for s in manifest["stages"]] == [
        "predictor", "offline", "carl-1", "rcarl", "evaluate", "explain", "report"]


def test_library_verifies_and_records_lineage(tiny_run):
    lib = AgentLibrary.open(tiny_run / "library", 10)
    lib.verify()
    assert lib.detector_names == ["D0", "D1"] and lib.adversary_names == ["A0", "A1"]
    d1 = lib.entry("D1")
    assert d1["lineage"][-1]["trained_against"][0]["name"] == "A1"
    assert lib.entry("A1")["lineage"][-1]["trained_against"][0]["name"] == "D0"
    assert lib.entry("D_R")["lineage"][-1]["sampling"] == {"A0": 0.8, "A1": pytest.approx(0.2)}


def test_library_is_append_only(tiny_run):
    lib = AgentLibrary.open(tiny_run / "library", 10)
    with pytest.raises(LibraryStateError):
        lib.add(lib.agent("D1"), "detector")


def test_library_detects_tampered_checkpoint(tiny_run, tmp_path):
    import shutil

    shutil.copytree(tiny_run / "library", tmp_path / "lib")
    index = tmp_path / "lib" / "library.json"
    data = json.loads(index.read_text())
    data["detectors"][1]["policy_hash"] = "0" * 40
    index.write_text(json.dumps(data))
    with pytest.raises(LibraryStateError):
        AgentLibrary.open(tmp_path / "lib", 10).verify()


def test_resume_with_completed_run_does_nothing(tiny_run):
    exp = Experiment(tiny_config("carl.iterations=1"), tiny_run, resume=True)
    assert all(s["status"] == "done" for s in exp.plan("report"))
    assert exp.run("report") == []


def test_existing_run_needs_resume(tiny_run):
    with pytest.raises(ConfigError):
        Experiment(tiny_config("carl.iterations=1"), tiny_run)


def test_resume_with_changed_config_fails(tiny_run):
    with pytest.raises(ConfigError, match="carl.episodes"):
        Experiment(tiny_config("carl.iterations=1", "carl.episodes=11"), tiny_run, resume=True)


def test_zero_iterations_gives_offline_detector_only(tmp_path):
    exp = Experiment(tiny_config("carl.iterations=0"), tmp_path)
    assert exp.run("carl") == ["predictor", "offline"]
    lib = AgentLibrary.open(tmp_path / "library", 10)
    assert lib.detector_names == ["D0"] and lib.adversary_names == ["A0"]
    with pytest.raises(LibraryStateError):
        exp.stage_names("rcarl")


def test_interrupted_run_resumes_to_identical_artifacts(tmp_path):
    straight = Experiment(tiny_config("carl.iterations=2", "rcarl.enabled=false"), tmp_path / "a")
    straight.run("carl")
    # stop after the first iteration, then resume with a larger count
    first = Experiment(tiny_config("carl.iterations=1", "rcarl.enabled=false"), tmp_path / "b")
    first.run("carl")
    resumed = Experiment(tiny_config("carl.iterations=2", "rcarl.enabled=false"), tmp_path / "b", resume=True)
    assert resumed.run("carl") == ["carl-2"]
    for name in ("A1", "D1", "A2", "D2"):
        for f in ("policy.json", "value.json", "agent.json"):
            assert (tmp_path / "a" / "library" / name / f).read_bytes() == \
                (tmp_path / "b" / "library" / name / f).read_bytes()
    lib = AgentLibrary.open(tmp_path / "b" / "library", 10)
    assert lib.entry("A2")["lineage"][-2]["warm_start_from"] == "A1"
    assert lib.entry("D2")["lineage"][-2]["warm_start_from"] == "D1"
