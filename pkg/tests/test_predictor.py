import numpy as np
import pytest

from carl_fdia.env import SyntheticAdversary, NullDetector
from carl_fdia.errors import InvalidInputError
from carl_fdia.grid import GridState, Trajectory, default_initial_state, rollout_reference, simulate
from carl_fdia.predictor import (
    PredictorConfig,
    PredictorModel,
    reference_dataset,
    read_dataset,
    residual_at,
    state_matrix,
    train_predictor,
    write_dataset,
)


def constant_trajectory(value, length=30):
    states = [GridState(np.full(2, value), np.full(2, -value), 0.01 * k) for k in range(length)]
    return Trajectory(states, 0.01)


def test_constant_trajectories_are_predicted_exactly():
    trajs = [constant_trajectory(v) for v in (0.1, -0.3, 0.5, 0.0)]
    model = train_predictor(trajs, PredictorConfig(window=4, epochs=5))
    assert model.holdout_mse < 1e-20
    window = state_matrix(trajs[0])[:4]
    assert np.all(residual_at(model, window) == 0.0)


def test_default_scenario_holdout_mse(predictor):
    assert predictor.holdout_mse <= 0.1 * predictor.target_variance


def test_training_is_deterministic(default_grid):
    trajs = reference_dataset(default_grid, default_initial_state(10), 4, 60, 0.01, seed=3)
    a = train_predictor(trajs, PredictorConfig(epochs=3, seed=5))
    b = train_predictor(trajs, PredictorConfig(epochs=3, seed=5))
    assert a.content_hash() == b.content_hash()


def test_training_loss_decreases(predictor):
    losses = np.asarray(predictor.losses)
    k = max(len(losses) // 10, 1)
    assert losses[-k:].mean() < losses[:k].mean()


def test_rejects_attacked_or_short_data(default_grid):
    attacked = simulate(default_grid, default_initial_state(10), 0.01, [(1, -1.0)] * 10)
    with pytest.raises(InvalidInputError):
        train_predictor([attacked])
    with pytest.raises(InvalidInputError):
        train_predictor([constant_trajectory(0.0, length=3)], PredictorConfig(window=6))
    with pytest.raises(InvalidInputError):
        train_predictor([])


def test_residual_window_length_checked(predictor):
    with pytest.raises(InvalidInputError):
        residual_at(predictor, np.zeros((5, 20)))


def test_residual_zero_when_prediction_is_observed(predictor, reference):
    window = state_matrix(reference)[:6].copy()
    window[-1] = predictor.predict(window[None, :-1])[0]
    assert np.all(residual_at(predictor, window) == 0.0)


def test_attack_enlarges_residual(default_grid, predictor, reference):
    # same start, k'=-1 applied from mid-window on the bus with the largest swing
    t0 = 100
    start = reference.states[t0]
    bus = int(np.argmax(np.abs(start.omega))) + 1
    clean = simulate(default_grid, start, 0.01, [(None, 0.0)] * 5)
    attacked = simulate(default_grid, start, 0.01, [(None, 0.0)] * 2 + [(bus, -1.0)] * 3)
    r_clean = residual_at(predictor, clean.states)
    r_attack = residual_at(predictor, attacked.states)
    assert np.linalg.norm(r_attack) > np.linalg.norm(r_clean)


def test_residuals_separate_synthetic_attacks(scenario, predictor):
    env = scenario.defender_env([SyntheticAdversary(10)])
    rng = np.random.default_rng(9)
    obs = env.reset(40, rng)
    attacked, clean = [], []
    detector = NullDetector()
    while obs is not None:
        res = np.linalg.norm(obs[:, -20:], axis=1)
        truth = env.ground_truth
        attacked.extend(res[truth != 0])
        clean.extend(res[truth == 0])
        obs, _, done, _ = env.step(detector.decide(obs))
    assert np.median(attacked) > np.median(clean)


def test_checkpoint_roundtrip(tmp_path, predictor):
    predictor.save(tmp_path / "p.json")
    back = PredictorModel.load(tmp_path / "p.json")
    assert back.content_hash() == predictor.content_hash()
    x = np.random.default_rng(0).normal(size=(3, 5, 20))
    assert np.array_equal(back.predict(x), predictor.predict(x))


def test_dataset_roundtrip(tmp_path, default_grid):
    trajs = reference_dataset(default_grid, default_initial_state(10), 2, 12, 0.01, seed=0)
    write_dataset(trajs, tmp_path / "ds")
    back = read_dataset(tmp_path / "ds")
    assert len(back) == 2
    assert np.array_equal(back[1].omega, trajs[1].omega)
    assert (tmp_path / "ds" / "manifest.json").exists()
