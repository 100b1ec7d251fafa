"""Multiplicative, repetitive adversarial perturbations and their optimizer.

The attacker scales each transmitted subcarrier by a real weight gamma_k, so
the victim AP's channel estimate (and therefore the amplitude fingerprint) is
scaled column-wise by the same weights on every receive antenna: the
perturbation is multiplicative and repeats across antennas. Feasible weights
live strictly inside (1 - delta_max, 1 + delta_max), guaranteed by the tanh
reparameterization, and the optimizer minimizes a hinged distance objective:

- targeted (omega=0): mean over the batch of [D(f(Xhat), q) - d_max]+
- untargeted (omega=1): mean over the batch of [d_min - D(f(Xhat), p)]+

plus beta * ||adjacent differences of gamma||_2 for smoothness. Samples whose
hinge is already inactive contribute exactly zero gradient, so optimization
attends only to the samples still outside the goal region.

Weights are optimized on downlink measurements (what an attacker can observe)
and deployed against the uplink ones the victim model consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import AmplitudeSample, SpotEnvironment, channel_response, estimate_csi
from .errors import ContractError
from .models import LocalizationModel
from .tensorcore import Graph, sgd_step, tanh_reparam

XI_INIT_SIGMA = 0.1  # random init keeps gamma near 1 (imperceptible start)


@dataclass
class AttackConfig:
    """Hyperparameters of one perturbation optimization run."""

    d_max: float | None = None  # meters, targeted goal radius
    d_min: float | None = None  # meters, untargeted exclusion radius
    delta_max: float = 0.15
    beta: float = 1.0
    eta: float = 0.1
    iterations: int = 500
    batch_size: int = 32
    seed: int = 0

    def validate(self, omega=None):
        if not (0.0 < self.delta_max < 1.0):
            raise ContractError(f"delta_max must lie in (0, 1), got {self.delta_max}")
        if self.beta < 0 or self.eta < 0:
            raise ContractError("beta and eta must be >= 0")
        if self.iterations < 0 or self.batch_size < 1:
            raise ContractError("iterations must be >= 0 and batch_size >= 1")
        if omega == 0 and (self.d_max is None or self.d_max < 0):
            raise ContractError("targeted attacks need d_max >= 0")
        if omega == 1 and (self.d_min is None or self.d_min < 0):
            raise ContractError("untargeted attacks need d_min >= 0")


@dataclass
class Perturbation:
    """Optimized weights: unconstrained xi plus the induced feasible gamma."""

    xi: np.ndarray
    delta_max: float
    genuine_spot: tuple
    target_spot: tuple | None
    omega: int
    gamma: np.ndarray = field(init=False)

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=np.float64).reshape(-1)
        self.gamma = tanh_reparam(self.xi, self.delta_max)
        if self.omega not in (0, 1):
            raise ContractError(f"omega must be 0 or 1, got {self.omega}")
        if self.omega == 0:
            if self.target_spot is None:
                raise ContractError("targeted perturbations need a target spot")
            if np.allclose(self.target_spot, self.genuine_spot):
                raise ContractError("target spot must differ from the genuine spot")
        elif self.target_spot is not None:
            raise ContractError("untargeted perturbations must not carry a target spot")

    def to_record(self, spot_id=None, target_spot_id=None, config=None, seed=None):
        """JSON-ready persistence record."""
        return {
            "spot_id": spot_id,
            "target_spot_id": target_spot_id,
            "omega": self.omega,
            "delta_max": self.delta_max,
            "gamma": [float(v) for v in self.gamma],
            "xi": [float(v) for v in self.xi],
            "config": config,
            "seed": seed,
        }


def expand_weights(gamma, n_antennas: int) -> np.ndarray:
    """Repeat the per-subcarrier weights over every receive antenna row."""
    if n_antennas < 1:
        raise ContractError("n_antennas must be >= 1")
    return np.tile(np.asarray(gamma, dtype=np.float64).reshape(1, -1), (n_antennas, 1))


def apply_perturbation(gamma, x):
    """Scale amplitudes column-wise: Xhat[n, k] = gamma_k * X[n, k].

    Accepts an AmplitudeSample, an (N, K) array, or a batched (B, N, K) array.
    """
    gamma = np.asarray(gamma, dtype=np.float64).reshape(-1)
    if isinstance(x, AmplitudeSample):
        if x.amps.shape[-1] != gamma.shape[0]:
            raise ContractError(f"gamma length {gamma.shape[0]} does not match K={x.amps.shape[-1]}")
        return AmplitudeSample(x.amps * gamma, x.link, x.spot_id)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != gamma.shape[0]:
        raise ContractError(f"gamma length {gamma.shape[0]} does not match K={x.shape[-1]}")
    return x * gamma


def _build_objective(model: LocalizationModel, batch_shape, omega, p, q, cfg: AttackConfig):
    """Graph computing the hinged objective from xi; returns node handles."""
    g = Graph()
    xi = g.leaf(np.zeros(batch_shape[-1]), parameter=True)
    x = g.leaf(np.zeros(batch_shape))
    gamma = g.tanh_reparam(xi, cfg.delta_max)
    xhat = g.mul(x, g.reshape(gamma, (1, 1, batch_shape[-1])))
    pred, _ = model.build_graph(g, xhat, trainable=False)
    if omega == 0:
        anchor, offset, sign = q, cfg.d_max, +1.0
    else:
        anchor, offset, sign = p, cfg.d_min, -1.0
    dist = g.l2norm(g.sub(pred, g.constant(np.asarray(anchor, dtype=np.float64))), axis=-1)
    margin = g.mul(g.constant(sign), g.sub(dist, g.constant(offset)))
    data_term = g.mean(g.hinge(margin))
    smooth = g.l2norm(g.adjacent_diff(gamma))
    loss = g.add(data_term, g.mul(g.constant(cfg.beta), smooth))
    return g, xi, x, gamma, loss


def _as_batch(samples) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        batch = samples
    else:
        batch = np.stack([s.amps if isinstance(s, AmplitudeSample) else np.asarray(s)
                          for s in samples])
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3:
        raise ContractError("expected a batch of (N, K) amplitude samples")
    return batch


def attack_objective(perturbation: Perturbation, model: LocalizationModel,
                     batch, cfg: AttackConfig) -> float:
    """Evaluate the unified objective for a fixed perturbation on one batch.

    The inactive branch of the objective is zero by the omega selector, so
    only the active hinge term and the smoothness penalty are computed.
    """
    omega = perturbation.omega
    cfg.validate(omega)
    batch = _as_batch(batch)
    if batch.shape[0] == 0:
        raise ContractError("batch must be nonempty")
    g, xi, x, _, loss = _build_objective(
        model, batch.shape, omega, perturbation.genuine_spot, perturbation.target_spot, cfg)
    g.set_value(xi, perturbation.xi)
    g.set_value(x, batch)
    return g.evaluate(loss).item()


def optimize_perturbation(model: LocalizationModel, downlink_set, p, q, omega,
                          cfg: AttackConfig, trace=False):
    """Search feasible weights that fool `model` on samples from spot `p`.

    Runs minibatch SGD on the unconstrained parameters xi, rebuilding
    gamma = tanh(xi) * delta_max + 1 every step, and returns the perturbation
    whose minibatch objective was lowest over the run (the final iterate is
    also a candidate). Deterministic for a fixed ``cfg.seed``.

    With ``trace=True`` also returns a list of per-iteration records
    (objective, gamma) for diagnostics.
    """
    cfg.validate(omega)
    if omega == 0 and q is None:
        raise ContractError("targeted attacks need a target spot q")
    if omega == 1 and q is not None:
        raise ContractError("untargeted attacks must not pass a target spot")
    samples = _as_batch(downlink_set)
    n_total, n_antennas, k = samples.shape
    if n_total == 0:
        raise ContractError("downlink sample set is empty")
    if (n_antennas, k) != (model.n_antennas, model.k_subcarriers):
        raise ContractError("sample dims do not match the victim model")

    rng = np.random.default_rng(cfg.seed)
    xi_value = rng.normal(0.0, XI_INIT_SIGMA, k)
    batch_size = min(cfg.batch_size, n_total)

    g, xi, x, gamma, loss = _build_objective(model, (batch_size, n_antennas, k), omega, p, q, cfg)
    g.set_value(xi, xi_value)

    history = []
    best_obj = np.inf
    best_xi = xi_value.copy()
    for step in range(cfg.iterations + 1):
        idx = rng.choice(n_total, size=batch_size, replace=False)
        g.set_value(x, samples[idx])
        obj = g.evaluate(loss).item()
        if trace:
            history.append({"iteration": step, "objective": obj,
                            "gamma": g.value(gamma).copy()})
        if obj < best_obj:
            best_obj = obj
            best_xi = g.value(xi).copy()
        if step == cfg.iterations:
            break
        grads = g.backward(loss)
        sgd_step(g, grads, cfg.eta)

    result = Perturbation(xi=best_xi, delta_max=cfg.delta_max,
                          genuine_spot=tuple(np.asarray(p, dtype=float)),
                          target_spot=None if q is None else tuple(np.asarray(q, dtype=float)),
                          omega=omega)
    return (result, history) if trace else result


def perturb_transmission(gamma, ltf, payload):
    """Scale the training sequence and the payload by the same weights."""
    gamma = np.asarray(gamma, dtype=np.float64).reshape(-1)
    if np.any(gamma <= 0):
        raise ContractError("transmission weights must be strictly positive")
    ltf = np.asarray(ltf, dtype=np.complex128).reshape(-1)
    payload = np.asarray(payload, dtype=np.complex128).reshape(-1)
    if not (len(gamma) == len(ltf) == len(payload)):
        raise ContractError("gamma, ltf and payload must share length K")
    return gamma * ltf, gamma * payload


def default_ltf(k_subcarriers: int) -> np.ndarray:
    """Deterministic BPSK-style training sequence (alternating +1/-1)."""
    signs = np.where(np.arange(k_subcarriers) % 2 == 0, 1.0, -1.0)
    return signs.astype(np.complex128)


def check_demodulation(env: SpotEnvironment, gamma, payload, rng):
    """Verify payload recovery is unharmed by a multiplicative perturbation.

    Simulates a perturbed training transmission and a perturbed payload
    transmission through the environment (each with its own channel noise
    draw), estimates the channel from the training symbols, and equalizes the
    payload with that estimate. The perturbation cancels between the two, so
    the residual error comes from channel noise alone.

    Returns (recovered payload per antenna (N, K), max relative error).
    """
    gamma = np.asarray(gamma, dtype=np.float64).reshape(-1)
    if np.any(gamma <= 0):
        raise ContractError("perturbation weights must be strictly positive")
    payload = np.asarray(payload, dtype=np.complex128).reshape(-1)
    k = env.k_subcarriers
    if len(gamma) != k or len(payload) != k:
        raise ContractError(f"gamma and payload must have length K={k}")

    ltf = default_ltf(k)
    s_t, u_t = perturb_transmission(gamma, ltf, payload)
    h_ltf = np.stack([channel_response(env, n, rng) for n in range(env.n_antennas)])
    h_pay = np.stack([channel_response(env, n, rng) for n in range(env.n_antennas)])
    y_ltf = h_ltf * s_t[None, :]
    y_pay = h_pay * u_t[None, :]
    estimated = estimate_csi(y_ltf, ltf).complex_h
    recovered = y_pay / estimated
    max_rel_error = float(np.max(np.abs(recovered - payload[None, :]) / np.abs(payload[None, :])))
    return recovered, max_rel_error
