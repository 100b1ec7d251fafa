"""Evaluation metrics: localization error, attack success rate, PSR."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .channel import AmplitudeSample
from .errors import ContractError

PSR_FLOOR_DB = -120.0  # reporting sentinel for a numerically zero perturbation


def localization_error(pred, truth) -> float:
    """Euclidean distance between a predicted and a true 2D location."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    return float(np.linalg.norm(pred - truth))


def percentile(values, q) -> float:
    """Nearest-rank percentile: the ceil(q/100 * n)-th smallest value."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ContractError("percentile of an empty list is undefined")
    if not (0 < q <= 100):
        raise ContractError(f"q must lie in (0, 100], got {q}")
    ordered = np.sort(values)
    rank = max(1, math.ceil(q / 100.0 * values.size))
    return float(ordered[rank - 1])


@dataclass
class AttackOutcome:
    """Everything needed to score one attack at one genuine spot."""

    predictions: np.ndarray  # (M, 2) locations from perturbed uplink samples
    genuine_spot: tuple
    target_spot: tuple | None = None
    d_max: float | None = None
    d_min: float | None = None
    perturbed: np.ndarray | None = None  # (M, N, K) amplitudes
    original: np.ndarray | None = None

    def __post_init__(self):
        self.predictions = np.asarray(self.predictions, dtype=np.float64)
        if self.predictions.ndim != 2 or self.predictions.shape[0] == 0:
            raise ContractError("predictions must be a nonempty (M, 2) array")
        if self.perturbed is not None and self.original is not None:
            a, b = np.asarray(self.perturbed), np.asarray(self.original)
            if a.shape != b.shape:
                raise ContractError("perturbed/original amplitude lists must pair up")


def attack_success_rate(outcome: AttackOutcome, omega: int) -> float:
    """Fraction of predictions satisfying the attack goal; boundary counts.

    Targeted (omega=0): inside the ball of radius d_max around the target.
    Untargeted (omega=1): at distance >= d_min from the genuine spot.
    """
    if omega == 0:
        if outcome.target_spot is None or outcome.d_max is None:
            raise ContractError("targeted ASR needs target_spot and d_max")
        d = np.linalg.norm(outcome.predictions - np.asarray(outcome.target_spot), axis=1)
        return float(np.mean(d <= outcome.d_max))
    if omega == 1:
        if outcome.d_min is None:
            raise ContractError("untargeted ASR needs d_min")
        d = np.linalg.norm(outcome.predictions - np.asarray(outcome.genuine_spot), axis=1)
        return float(np.mean(d >= outcome.d_min))
    raise ContractError(f"omega must be 0 or 1, got {omega}")


def perturbation_to_signal_ratio(perturbed, original) -> float:
    """20 * log10(||Xhat - X||_2 / ||X||_2) over the full N x K matrix, in dB.

    Identical inputs return -inf (reported downstream as "< -120 dB").
    """
    xhat = perturbed.amps if isinstance(perturbed, AmplitudeSample) else np.asarray(perturbed)
    x = original.amps if isinstance(original, AmplitudeSample) else np.asarray(original)
    if xhat.shape != x.shape:
        raise ContractError("perturbed and original samples must share a shape")
    ref = np.linalg.norm(x)
    if ref == 0:
        raise ContractError("original sample must be nonzero")
    num = np.linalg.norm(xhat - x)
    if num == 0:
        return -math.inf
    return float(20.0 * np.log10(num / ref))


def psr_batch(perturbed_batch, original_batch) -> np.ndarray:
    """Per-sample PSR values for paired (M, N, K) amplitude batches."""
    perturbed_batch = np.asarray(perturbed_batch, dtype=np.float64)
    original_batch = np.asarray(original_batch, dtype=np.float64)
    if perturbed_batch.shape != original_batch.shape:
        raise ContractError("batches must pair up")
    return np.array([perturbation_to_signal_ratio(a, b)
                     for a, b in zip(perturbed_batch, original_batch)])


def aggregate_psr(values, mode: str = "db") -> float:
    """Average PSRs over a spot's samples.

    ``db`` averages the decibel values directly; ``linear`` averages the
    power ratios and converts back.
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ContractError("cannot aggregate an empty PSR list")
    if mode == "db":
        return float(np.mean(values))
    if mode == "linear":
        return float(10.0 * np.log10(np.mean(10.0 ** (values / 10.0))))
    raise ContractError(f"unknown PSR aggregation mode {mode!r}")


def format_psr_db(value) -> str:
    """Human-readable PSR with the reporting floor applied."""
    if value is None or not np.isfinite(value) or value < PSR_FLOOR_DB:
        return "< -120 dB"
    return f"{value:.2f} dB"
