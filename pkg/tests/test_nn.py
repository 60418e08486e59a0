import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carl_fdia.errors import IncompatibleCheckpointError, InvalidInputError, NumericalDivergenceError
from carl_fdia.nn import (
    MLP,
    Categorical,
    Checkpoint,
    NetworkSpec,
    OptimizerState,
    backward,
    categorical_from_logits,
    forward,
    load_checkpoint,
    optimizer_step,
    save_checkpoint,
    split_heads,
)

from .oracles import gradient_check, softmax

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_zero_network_outputs_zero():
    spec = NetworkSpec((4, 5, 3))
    assert np.all(forward(spec, np.zeros(spec.parameter_count), np.ones(4)) == 0.0)


def test_scalar_linear_net_forward():
    spec = NetworkSpec((1, 1), "linear")
    assert forward(spec, np.array([2.0, 1.0]), np.array([3.0]))[0] == 7.0


def test_forward_is_deterministic():
    spec = NetworkSpec((6, 8, 2))
    net = MLP.init(spec, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=6)
    assert np.array_equal(forward(spec, net.params, x), forward(spec, net.params, x))


def test_dimension_mismatch_raises():
    spec = NetworkSpec((3, 2))
    with pytest.raises(InvalidInputError):
        forward(spec, np.zeros(spec.parameter_count), np.zeros(4))
    with pytest.raises(InvalidInputError):
        backward(spec, np.zeros(spec.parameter_count), np.zeros(3), np.zeros(3))
    with pytest.raises(InvalidInputError):
        MLP(spec, np.zeros(5))


def test_spec_validation():
    with pytest.raises(InvalidInputError):
        NetworkSpec((3,))
    with pytest.raises(InvalidInputError):
        NetworkSpec((3, 0, 2))
    with pytest.raises(InvalidInputError):
        NetworkSpec((3, 5), head_splits=(2, 2))
    with pytest.raises(InvalidInputError):
        NetworkSpec((3, 5), activation="sigmoid")


def test_zero_output_gradient_gives_zero_parameter_gradient():
    spec = NetworkSpec((4, 7, 3))
    net = MLP.init(spec, np.random.default_rng(2))
    grad, dx = backward(spec, net.params, np.ones(4), np.zeros(3))
    assert not grad.any() and not dx.any()


def test_scalar_linear_net_backward():
    spec = NetworkSpec((1, 1), "linear")
    grad, dx = backward(spec, np.array([0.5, 0.0]), np.array([3.0]), np.array([1.0]))
    assert grad[0] == 3.0  # dL/dw = x
    assert grad[1] == 1.0  # dL/db
    assert dx[0] == 0.5


@pytest.mark.parametrize("sizes,activation", [
    ((21, 256, 256, 6), "tanh"),
    ((140, 256, 256, 11), "tanh"),
    ((5, 9, 4), "relu"),
    ((3, 4, 4, 2), "linear"),
])
def test_gradient_matches_finite_differences(sizes, activation):
    assert gradient_check(NetworkSpec(sizes, activation), np.random.default_rng(len(sizes))) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 12), min_size=2, max_size=4), st.integers(0, 10**6))
def test_gradient_check_random_shapes(sizes, seed):
    assert gradient_check(NetworkSpec(tuple(sizes)), np.random.default_rng(seed), n_params=20) < 1e-4


def test_categorical_symmetric():
    dist = categorical_from_logits([0.0, 0.0])
    np.testing.assert_allclose(dist.probs, [0.5, 0.5])
    assert dist.entropy() == pytest.approx(math.log(2), abs=1e-15)


def test_categorical_large_logits_do_not_overflow():
    dist = Categorical([1000.0, 0.0])
    assert np.all(np.isfinite(dist.probs))
    assert dist.probs[0] == pytest.approx(1.0) and dist.probs[1] < 1e-300


def test_categorical_hand_probabilities():
    dist = Categorical([math.log(1.0), math.log(3.0)])
    np.testing.assert_allclose(dist.probs, [0.25, 0.75], atol=1e-15)


def test_categorical_rejects_empty_and_nonfinite():
    with pytest.raises(InvalidInputError):
        Categorical([])
    with pytest.raises(InvalidInputError):
        Categorical([0.0, float("nan")])


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=1, max_size=12), st.randoms(use_true_random=False))
def test_softmax_properties(logits, rnd):
    dist = Categorical(logits)
    assert np.all(dist.probs >= 0)
    assert abs(dist.probs.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(dist.probs, softmax(logits), rtol=1e-9, atol=1e-15)
    np.testing.assert_allclose(np.exp(dist.log_probs), dist.probs, atol=1e-10)
    assert dist.entropy() >= 0
    perm = list(range(len(logits)))
    rnd.shuffle(perm)
    permuted = Categorical(np.asarray(logits)[perm])
    np.testing.assert_allclose(permuted.probs, dist.probs[perm], atol=1e-15)
    for i, z in enumerate(logits):
        lse = max(logits) + math.log(sum(math.exp(v - max(logits)) for v in logits))
        assert dist.log_prob(i) == pytest.approx(z - lse, abs=1e-9)


def test_seeded_sampling_is_reproducible():
    dist = Categorical(np.log([[0.2, 0.3, 0.5]] * 50))
    a = dist.sample(np.random.default_rng(4))
    b = dist.sample(np.random.default_rng(4))
    assert np.array_equal(a, b)


def test_sampling_frequencies():
    dist = Categorical(np.log(np.tile([0.2, 0.3, 0.5], (20000, 1))))
    freq = np.bincount(dist.sample(np.random.default_rng(5)), minlength=3) / 20000
    np.testing.assert_allclose(freq, [0.2, 0.3, 0.5], atol=0.015)


def test_joint_log_prob_of_heads():
    logits = np.random.default_rng(6).normal(size=(4, 15))
    heads = split_heads(logits, (10, 3, 2))
    actions = np.array([[1, 0, 1], [9, 2, 0], [4, 1, 1], [0, 0, 0]])
    joint = sum(h.log_prob(actions[:, i]) for i, h in enumerate(heads))
    product = np.prod([h.probs[np.arange(4), actions[:, i]] for i, h in enumerate(heads)], axis=0)
    np.testing.assert_allclose(np.exp(joint), product, rtol=1e-10)


def test_log_prob_and_entropy_gradients():
    rng = np.random.default_rng(7)
    z = rng.normal(size=5)
    h = 1e-6
    dist = Categorical(z)
    for i in range(5):
        e = np.zeros(5)
        e[i] = h
        num_lp = (Categorical(z + e).log_prob(2) - Categorical(z - e).log_prob(2)) / (2 * h)
        num_ent = (Categorical(z + e).entropy() - Categorical(z - e).entropy()) / (2 * h)
        assert dist.log_prob_grad(2)[i] == pytest.approx(num_lp, abs=1e-8)
        assert dist.entropy_grad()[i] == pytest.approx(num_ent, abs=1e-8)


def test_adam_zero_gradient():
    state = OptimizerState.zeros(3)
    params = np.array([1.0, -2.0, 3.0])
    new, st2 = optimizer_step(state, params, np.zeros(3))
    assert np.array_equal(new, params) and st2.step == 1


def test_adam_first_step_is_sign():
    lr = 1e-4
    g = np.array([0.3, -5.0, 1e-3])
    new, _ = optimizer_step(OptimizerState.zeros(3, lr), np.zeros(3), g)
    np.testing.assert_allclose(new, -lr * np.sign(g), rtol=1e-4)


def test_adam_is_deterministic_and_pure():
    state = OptimizerState.zeros(2)
    params = np.array([0.1, 0.2])
    a = optimizer_step(state, params, np.array([1.0, 2.0]))
    b = optimizer_step(state, params, np.array([1.0, 2.0]))
    assert np.array_equal(a[0], b[0]) and state.step == 0 and np.array_equal(params, [0.1, 0.2])


def test_adam_rejects_nonfinite_gradient():
    state = OptimizerState.zeros(2)
    with pytest.raises(NumericalDivergenceError):
        optimizer_step(state, np.zeros(2), np.array([np.inf, 0.0]))
    assert state.step == 0


def test_adam_matches_two_step_hand_computation():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    g1, g2 = 2.0, -1.0
    p, st1 = optimizer_step(OptimizerState.zeros(1, lr), np.zeros(1), np.array([g1]))
    p, _ = optimizer_step(st1, p, np.array([g2]))
    m1, v1 = (1 - b1) * g1, (1 - b2) * g1 ** 2
    x1 = -lr * (m1 / (1 - b1)) / (math.sqrt(v1 / (1 - b2)) + eps)
    m2, v2 = b1 * m1 + (1 - b1) * g2, b2 * v1 + (1 - b2) * g2 ** 2
    x2 = x1 - lr * (m2 / (1 - b1 ** 2)) / (math.sqrt(v2 / (1 - b2 ** 2)) + eps)
    assert p[0] == pytest.approx(x2, abs=1e-15)


def test_checkpoint_roundtrip_is_byte_identical(tmp_path):
    spec = NetworkSpec((4, 6, 3), head_splits=(3,))
    net = MLP.init(spec, np.random.default_rng(8))
    opt = OptimizerState.zeros(spec.parameter_count)
    _, opt = optimizer_step(opt, net.params, np.ones(spec.parameter_count))
    ckpt = Checkpoint(spec, net.params, opt, 3, {"name": "x"})
    save_checkpoint(ckpt, tmp_path / "a.json")
    back = load_checkpoint(tmp_path / "a.json")
    save_checkpoint(back, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert np.array_equal(back.params, net.params) and back.optimizer.step == 1


def test_checkpoint_tamper_detected(tmp_path):
    spec = NetworkSpec((2, 2))
    save_checkpoint(Checkpoint(spec, np.zeros(6)), tmp_path / "c.json")
    text = (tmp_path / "c.json").read_text().replace('"params":[0.0', '"params":[1.0', 1)
    (tmp_path / "c.json").write_text(text)
    with pytest.raises(IncompatibleCheckpointError):
        load_checkpoint(tmp_path / "c.json")
