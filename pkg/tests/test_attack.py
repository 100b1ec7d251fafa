import numpy as np
import pytest

from fooloc.attack import (
    AttackConfig,
    Perturbation,
    apply_perturbation,
    attack_objective,
    check_demodulation,
    default_ltf,
    expand_weights,
    optimize_perturbation,
    perturb_transmission,
)
from fooloc.channel import AmplitudeSample, estimate_csi, synth_environment
from fooloc.errors import ContractError
from fooloc.models import LocalizationModel, TrainConfig, train_localizer
from fooloc.tensorcore import tanh_reparam

BOUNDS = (0.0, 9.0, 0.0, 9.0)
CENTER = (4.5, 4.5)


def center_model(n=2, k=8):
    """Zeroed head: predicts the area center for every input."""
    m = LocalizationModel.initialize("dnn_a", n, k, BOUNDS, seed=0)
    m.theta[-2][:] = 0.0
    m.theta[-1][:] = 0.0
    m._inference = None
    return m


def test_expand_weights_repeats_rows():
    out = expand_weights([0.9, 1.1], 2)
    np.testing.assert_array_equal(out, [[0.9, 1.1], [0.9, 1.1]])


def test_expand_weights_identity():
    np.testing.assert_array_equal(expand_weights(np.ones(4), 3), np.ones((3, 4)))


def test_expand_weights_single_antenna():
    np.testing.assert_array_equal(expand_weights([1.2, 0.8], 1), [[1.2, 0.8]])


def test_apply_perturbation_identity():
    x = np.arange(6, dtype=float).reshape(2, 3) + 1
    np.testing.assert_array_equal(apply_perturbation(np.ones(3), x), x)


def test_apply_perturbation_uniform_scale():
    x = np.arange(6, dtype=float).reshape(2, 3) + 1
    np.testing.assert_allclose(apply_perturbation(np.full(3, 1.1), x), 1.1 * x)


def test_apply_perturbation_hand_oracle():
    out = apply_perturbation([1.1, 0.9], [[2.0, 4.0], [6.0, 8.0]])
    np.testing.assert_allclose(out, [[2.2, 3.6], [6.6, 7.2]])


def test_apply_perturbation_equals_expanded_hadamard():
    rng = np.random.default_rng(0)
    gamma = rng.uniform(0.85, 1.15, 8)
    x = rng.uniform(0.1, 2.0, (3, 8))
    np.testing.assert_allclose(apply_perturbation(gamma, x), expand_weights(gamma, 3) * x)


def test_apply_perturbation_length_mismatch():
    with pytest.raises(ContractError):
        apply_perturbation(np.ones(5), np.ones((2, 4)))


def test_apply_perturbation_amplitude_sample():
    s = AmplitudeSample(np.ones((2, 3)), "up", "b01")
    out = apply_perturbation([2.0, 1.0, 0.5], s)
    assert isinstance(out, AmplitudeSample) and out.spot_id == "b01"
    np.testing.assert_array_equal(out.amps, [[2.0, 1.0, 0.5]] * 2)


def test_perturbation_invariants():
    xi = np.array([0.3, -0.5, 0.0])
    p = Perturbation(xi, 0.15, (1.0, 1.0), (2.0, 2.0), omega=0)
    np.testing.assert_allclose(p.gamma, tanh_reparam(xi, 0.15))
    assert np.all(p.gamma > 0.85) and np.all(p.gamma < 1.15)
    with pytest.raises(ContractError):
        Perturbation(xi, 0.15, (1.0, 1.0), None, omega=0)
    with pytest.raises(ContractError):
        Perturbation(xi, 0.15, (1.0, 1.0), (2.0, 2.0), omega=1)
    with pytest.raises(ContractError):
        Perturbation(xi, 0.15, (1.0, 1.0), (1.0, 1.0), omega=0)


def test_objective_reduces_to_smoothness_when_hinge_inactive():
    # every perturbed prediction is already within d_max of the target, so
    # the optimizer attends to nothing and only the smoothness term remains
    rng = np.random.default_rng(1)
    model = center_model()
    xi = rng.normal(0, 0.4, 8)
    pert = Perturbation(xi, 0.15, (1.0, 1.0), CENTER, omega=0)
    cfg = AttackConfig(d_max=0.5, beta=0.7)
    batch = rng.uniform(0.5, 1.5, (5, 2, 8))
    loss = attack_objective(pert, model, batch, cfg)
    gamma = tanh_reparam(xi, 0.15)
    expected = 0.7 * np.linalg.norm(np.diff(gamma))
    assert loss == pytest.approx(expected, rel=1e-12)


def test_objective_constant_gamma_drops_smoothness():
    model = center_model()
    pert = Perturbation(np.full(8, 0.37), 0.15, CENTER, None, omega=1)
    cfg = AttackConfig(d_min=3.0, beta=5.0)
    batch = np.random.default_rng(2).uniform(0.5, 1.5, (4, 2, 8))
    # prediction sits exactly at p, so the hinge is d_min and beta contributes 0
    assert attack_objective(pert, model, batch, cfg) == pytest.approx(3.0, abs=1e-9)


def test_objective_untargeted_hand_value():
    model = center_model()
    pert = Perturbation(np.zeros(8), 0.15, CENTER, None, omega=1)
    cfg = AttackConfig(d_min=3.0, beta=0.0)
    batch = np.random.default_rng(3).uniform(0.5, 1.5, (1, 2, 8))
    assert attack_objective(pert, model, batch, cfg) == pytest.approx(3.0, abs=1e-9)


def test_optimize_zero_iterations_returns_feasible_init():
    model = center_model()
    batch = np.random.default_rng(4).uniform(0.5, 1.5, (6, 2, 8))
    cfg = AttackConfig(d_min=1.0, iterations=0, seed=11)
    pert = optimize_perturbation(model, batch, CENTER, None, 1, cfg)
    rng = np.random.default_rng(11)
    np.testing.assert_array_equal(pert.xi, rng.normal(0.0, 0.1, 8))
    assert np.all(pert.gamma > 0.85) and np.all(pert.gamma < 1.15)


def test_optimize_smoothness_dominates_at_large_beta():
    model = center_model()
    batch = np.random.default_rng(5).uniform(0.5, 1.5, (8, 2, 8))
    cfg = AttackConfig(d_min=1.0, beta=50.0, eta=0.02, iterations=300, seed=3)
    pert = optimize_perturbation(model, batch, CENTER, None, 1, cfg)
    assert np.ptp(pert.gamma) < 0.01


def test_optimize_feasible_at_every_iterate_and_best_non_increasing():
    model = center_model()
    batch = np.random.default_rng(6).uniform(0.5, 1.5, (10, 2, 8))
    cfg = AttackConfig(d_min=2.0, beta=1.0, eta=0.1, iterations=60, seed=8)
    pert, history = optimize_perturbation(model, batch, CENTER, None, 1, cfg, trace=True)
    assert len(history) == 61
    best = np.inf
    for rec in history:
        assert np.all(rec["gamma"] > 0.85) and np.all(rec["gamma"] < 1.15)
        best = min(best, rec["objective"])
    assert best == pytest.approx(min(r["objective"] for r in history))


def test_optimize_deterministic_per_seed():
    model = center_model()
    batch = np.random.default_rng(7).uniform(0.5, 1.5, (10, 2, 8))
    cfg = AttackConfig(d_min=1.0, iterations=20, seed=21)
    a = optimize_perturbation(model, batch, CENTER, None, 1, cfg)
    b = optimize_perturbation(model, batch, CENTER, None, 1, cfg)
    np.testing.assert_array_equal(a.xi, b.xi)


def test_untargeted_attack_moves_predictions_on_trained_model():
    # small trained model: post-attack displacement from p must exceed pre-attack
    rng = np.random.default_rng(9)
    spots = [(2.0, 2.0), (2.0, 7.0), (7.0, 2.0), (7.0, 7.0)]
    xs, ys = [], []
    for s in spots:
        base = rng.uniform(0.5, 1.5, (2, 12))
        xs.append(np.abs(base + rng.normal(0, 0.02, (40, 2, 12))))
        ys.append(np.tile(s, (40, 1)))
    x, y = np.concatenate(xs), np.concatenate(ys)
    model = train_localizer("dnn_a", (x, y), TrainConfig(epochs=12, batch_size=16,
                                                         learning_rate=0.05, seed=2), BOUNDS)
    p = spots[0]
    downlink = x[:40] * (1 + rng.normal(0, 0.03, (40, 2, 12)))
    uplink = x[:40]
    cfg = AttackConfig(d_min=2.0, beta=1.0, eta=0.1, iterations=150, seed=5)
    pert = optimize_perturbation(model, downlink, p, None, 1, cfg)
    before = np.linalg.norm(model.forward_batch(uplink) - p, axis=1).mean()
    after = np.linalg.norm(model.forward_batch(apply_perturbation(pert.gamma, uplink)) - p, axis=1).mean()
    assert after > before


def test_perturb_transmission_identity():
    s = default_ltf(4)
    u = np.array([1 + 1j, -1 + 1j, -1 - 1j, 1 - 1j])
    s_t, u_t = perturb_transmission(np.ones(4), s, u)
    np.testing.assert_array_equal(s_t, s)
    np.testing.assert_array_equal(u_t, u)


def test_perturbed_ltf_recovers_weights_on_flat_channel():
    # flat channel h=1: the estimated CSI is exactly gamma
    gamma = np.array([1.1, 0.9, 1.05, 0.97])
    s = default_ltf(4)
    s_t, _ = perturb_transmission(gamma, s, s)
    est = estimate_csi(s_t[None, :], s)
    np.testing.assert_allclose(est.complex_h[0], gamma, atol=1e-12)


def test_perturbed_power_sum_oracle():
    rng = np.random.default_rng(10)
    gamma = rng.uniform(0.85, 1.15, 6)
    s = rng.normal(size=6) + 1j * rng.normal(size=6)
    s_t, _ = perturb_transmission(gamma, s, s)
    assert np.sum(np.abs(s_t) ** 2) == pytest.approx(np.sum(gamma**2 * np.abs(s) ** 2), rel=1e-12)


def test_demodulation_exact_without_noise():
    env = synth_environment((1.0, 2.0), (5.0, 5.0), rng_seed=1, noise_sigma=0.0,
                            k_subcarriers=16)
    rng = np.random.default_rng(0)
    gamma = tanh_reparam(rng.normal(0, 1.0, 16), 0.15)
    payload = np.exp(1j * rng.uniform(0, 2 * np.pi, 16))
    recovered, err = check_demodulation(env, gamma, payload, rng)
    assert err < 1e-9
    np.testing.assert_allclose(recovered, np.tile(payload, (2, 1)), atol=1e-9)


def test_demodulation_identity_weights_exact():
    env = synth_environment((1.0, 2.0), (5.0, 5.0), rng_seed=2, noise_sigma=0.0,
                            k_subcarriers=8)
    payload = np.exp(1j * np.linspace(0, 3, 8))
    _, err = check_demodulation(env, np.ones(8), payload, np.random.default_rng(1))
    assert err < 1e-12


def test_demodulation_error_independent_of_gamma_under_noise():
    # paired Monte-Carlo: error grows with noise but matches for identity
    # weights vs a strongly shaped feasible gamma
    env = synth_environment((1.0, 2.0), (5.0, 5.0), rng_seed=3, noise_sigma=0.01,
                            k_subcarriers=16)
    payload = np.exp(1j * np.linspace(0, 5, 16))
    gamma = tanh_reparam(np.linspace(-3, 3, 16), 0.15)
    errs_id, errs_gm = [], []
    for trial in range(1000):
        errs_id.append(check_demodulation(env, np.ones(16), payload,
                                          np.random.default_rng((trial, 0)))[1])
        errs_gm.append(check_demodulation(env, gamma, payload,
                                          np.random.default_rng((trial, 0)))[1])
    assert np.mean(errs_id) > 1e-4  # noise does hurt recovery
    np.testing.assert_allclose(np.mean(errs_gm), np.mean(errs_id), rtol=0.05)


def test_attack_config_validation():
    with pytest.raises(ContractError):
        AttackConfig(delta_max=1.5).validate()
    with pytest.raises(ContractError):
        AttackConfig(d_max=None).validate(omega=0)
    with pytest.raises(ContractError):
        AttackConfig(d_min=None).validate(omega=1)
    AttackConfig(d_max=0.75, d_min=2.0).validate(omega=0)
