"""Synthetic multipath Wi-Fi channels and CSI estimation.

A channel between a single-antenna client and an N-antenna AP is a sum of
paths: one direct path plus a handful of reflections, each with an
attenuation and a propagation delay. The per-subcarrier frequency response is

    h_k = sum_paths  alpha * exp(2j * pi * tau * f_k)  +  n_k

with n_k complex Gaussian measurement noise. Uplink and downlink measurements
at the same spot share the path geometry; the downlink additionally carries a
small multiplicative per-antenna reciprocity mismatch and, optionally, a
discrete AGC gain. Amplitude features |h| are what the localization models
consume.

Datasets persist as JSON lines, one measurement per record, with a header
record carrying provenance. Readers ignore unknown fields.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

SPEED_OF_LIGHT = 3.0e8  # m/s
DEFAULT_CENTER_FREQUENCY = 2.412e9  # Hz, 2.4 GHz band
DEFAULT_SUBCARRIER_SPACING = 312.5e3  # Hz
DEFAULT_PHASE_REFERENCE = 1.0e8  # Hz, see phase_frequencies()
MAX_INDOOR_DELAY = 1e-6  # s

_MAX_RESAMPLE = 100


def subcarrier_frequencies(k_subcarriers, center=DEFAULT_CENTER_FREQUENCY,
                           spacing=DEFAULT_SUBCARRIER_SPACING):
    """K subcarrier frequencies symmetric about the channel center."""
    if k_subcarriers < 2:
        raise ContractError("need at least 2 subcarriers")
    idx = np.arange(k_subcarriers, dtype=np.float64) - (k_subcarriers - 1) / 2.0
    return center + idx * spacing


@dataclass(frozen=True)
class PathComponent:
    """One propagation path: a nonnegative gain and a delay in seconds."""

    attenuation: float
    delay: float

    def __post_init__(self):
        if not (np.isfinite(self.attenuation) and self.attenuation >= 0):
            raise ContractError(f"attenuation must be finite and >= 0, got {self.attenuation}")
        if not (0.0 <= self.delay < MAX_INDOOR_DELAY):
            raise ContractError(f"delay must lie in [0, 1us) for indoor scale, got {self.delay}")


@dataclass(frozen=True)
class SpotEnvironment:
    """Immutable propagation environment for one client spot.

    ``paths[n]`` lists the path components seen by AP antenna n, the direct
    path first. The direct path dominates every reflection in gain.
    """

    location: tuple
    paths: tuple  # N tuples of PathComponent, direct path first
    subcarrier_frequencies: np.ndarray
    noise_sigma: float = 0.0
    reciprocity_sigma: float = 0.0
    agc_gains: tuple = ()
    phase_reference: float = DEFAULT_PHASE_REFERENCE
    # per-measurement environmental dynamics applied to reflected paths
    # (people moving etc.); the same draw hits a reflector on every antenna
    path_delay_jitter: float = 0.0  # seconds, std
    path_gain_jitter: float = 0.0  # relative, std

    def __post_init__(self):
        if len(self.paths) < 1:
            raise ContractError("need at least one antenna")
        if len(self.subcarrier_frequencies) < 2:
            raise ContractError("need at least 2 subcarriers")
        if self.noise_sigma < 0 or self.reciprocity_sigma < 0:
            raise ContractError("noise and reciprocity sigmas must be >= 0")
        for ant in self.paths:
            if len(ant) < 1:
                raise ContractError("each antenna needs a direct path")
            direct = ant[0].attenuation
            if any(p.attenuation > direct for p in ant[1:]):
                raise ContractError("direct path must dominate every reflection")

    @property
    def n_antennas(self):
        return len(self.paths)

    @property
    def k_subcarriers(self):
        return len(self.subcarrier_frequencies)


@dataclass
class CsiMeasurement:
    """One estimated channel matrix (N antennas x K subcarriers)."""

    complex_h: np.ndarray
    link: str  # "up" | "down"
    spot_id: str | None = None
    gain_applied: float = 1.0

    def __post_init__(self):
        self.complex_h = np.asarray(self.complex_h, dtype=np.complex128)
        if self.complex_h.ndim != 2:
            raise ContractError("complex_h must be N x K")
        if not np.all(np.isfinite(self.complex_h)):
            raise ContractError("channel entries must be finite")
        if self.link not in ("up", "down"):
            raise ContractError(f"link must be 'up' or 'down', got {self.link!r}")


@dataclass
class AmplitudeSample:
    """Nonnegative CSI amplitudes |H|, the model input features."""

    amps: np.ndarray
    link: str
    spot_id: str | None = None

    def __post_init__(self):
        self.amps = np.asarray(self.amps, dtype=np.float64)
        if self.amps.ndim != 2:
            raise ContractError("amps must be N x K")
        if not np.all(np.isfinite(self.amps)) or np.any(self.amps < 0):
            raise ContractError("amplitudes must be finite and >= 0")


def synth_reflectors(room_bounds, count_range, rng_seed, keep_clear=()):
    """Draw a reproducible set of scatter points for one room.

    Returns a list of ((x, y), reflection_coefficient) pairs. A fixed
    reflector set shared by every spot in a room is what makes nearby spots
    produce similar fingerprints.
    """
    rng = np.random.default_rng(rng_seed)
    lo, hi = int(count_range[0]), int(count_range[1])
    count = int(rng.integers(lo, hi + 1))
    reflectors = []
    while len(reflectors) < count:
        point = (rng.uniform(room_bounds[0], room_bounds[1]),
                 rng.uniform(room_bounds[2], room_bounds[3]))
        if any(np.linalg.norm(np.subtract(point, c)) < 0.3 for c in keep_clear):
            continue
        reflectors.append((point, rng.uniform(0.25, 0.75)))
    return reflectors


def synth_environment(location, ap_location, rng_seed, *,
                      reflector_range=(3, 5),
                      reflectors=None,
                      k_subcarriers=56,
                      n_antennas=2,
                      noise_sigma=0.0,
                      reciprocity_sigma=0.0,
                      agc_gains=(),
                      center_frequency=DEFAULT_CENTER_FREQUENCY,
                      subcarrier_spacing=DEFAULT_SUBCARRIER_SPACING,
                      phase_reference=DEFAULT_PHASE_REFERENCE,
                      path_delay_jitter=0.0,
                      path_gain_jitter=0.0,
                      room_bounds=None) -> SpotEnvironment:
    """Build a reproducible environment for one client spot.

    The direct path per antenna has delay distance/c and attenuation 1/distance.
    Each reflected path goes through a scatter point; its length exceeds the
    direct distance and it carries a reflection loss below 1, so it never
    outweighs the direct path. Antennas sit half a wavelength apart, which
    offsets the per-antenna delays slightly.

    Pass ``reflectors`` (see :func:`synth_reflectors`) to share one scatter
    geometry across many spots of the same room; otherwise a private set is
    drawn from ``rng_seed``.
    """
    location = np.asarray(location, dtype=np.float64)
    ap_location = np.asarray(ap_location, dtype=np.float64)
    if k_subcarriers < 2 or n_antennas < 1:
        raise ContractError("k_subcarriers >= 2 and n_antennas >= 1 required")
    if np.allclose(location, ap_location):
        raise ContractError("client and AP locations must be distinct")

    wavelength = SPEED_OF_LIGHT / center_frequency
    antenna_positions = [ap_location + np.array([0.0, n * wavelength / 2]) for n in range(n_antennas)]

    if reflectors is None:
        if room_bounds is None:
            lo = np.minimum(location, ap_location) - 3.0
            hi = np.maximum(location, ap_location) + 3.0
            room_bounds = (lo[0], hi[0], lo[1], hi[1])
        reflectors = synth_reflectors(room_bounds, reflector_range, rng_seed,
                                      keep_clear=(location, ap_location))

    paths = []
    for ant in antenna_positions:
        direct_dist = np.linalg.norm(location - ant)
        components = [PathComponent(1.0 / direct_dist, direct_dist / SPEED_OF_LIGHT)]
        for point, coeff in reflectors:
            leg = max(np.linalg.norm(location - np.asarray(point)), 1e-6)
            dist = leg + np.linalg.norm(np.asarray(point) - ant)
            components.append(PathComponent(coeff / dist, dist / SPEED_OF_LIGHT))
        paths.append(tuple(components))

    return SpotEnvironment(
        location=tuple(float(v) for v in location),
        paths=tuple(paths),
        subcarrier_frequencies=subcarrier_frequencies(k_subcarriers, center_frequency, subcarrier_spacing),
        noise_sigma=float(noise_sigma),
        reciprocity_sigma=float(reciprocity_sigma),
        agc_gains=tuple(float(g) for g in agc_gains),
        phase_reference=float(phase_reference),
        path_delay_jitter=float(path_delay_jitter),
        path_gain_jitter=float(path_gain_jitter),
    )


def phase_frequencies(env: SpotEnvironment) -> np.ndarray:
    """Frequencies driving the per-path phase ramps.

    Only relative subcarrier spacing shapes the across-band ripple pattern,
    so the ramps run over band offsets anchored at ``phase_reference`` rather
    than at the RF carrier. The anchor sets the spatial correlation length of
    amplitude fingerprints: carrier-accurate phases would decorrelate within
    centimeters (classic small-scale fading), while the default 100 MHz
    anchor keeps fingerprints of spots within a grid cell similar and spots a
    few cells apart distinct, the regime a spot-grid methodology relies on.
    """
    offsets = env.subcarrier_frequencies - env.subcarrier_frequencies[0]
    return offsets + env.phase_reference


def _sum_paths(components, f):
    h = np.zeros(len(f), dtype=np.complex128)
    for attenuation, delay in components:
        h += attenuation * np.exp(2j * np.pi * delay * f)
    return h


def _noise(env, rng, k):
    if rng is None:
        raise ContractError("an rng is required when noise_sigma > 0")
    scale = env.noise_sigma / np.sqrt(2.0)
    return rng.normal(0.0, scale, k) + 1j * rng.normal(0.0, scale, k)


def channel_response(env: SpotEnvironment, antenna: int, rng=None) -> np.ndarray:
    """Per-subcarrier frequency response of one antenna, with fresh noise.

    Sum over paths of attenuation * exp(2j*pi*delay*f) at the phase-ramp
    frequencies, plus complex Gaussian noise of total std ``noise_sigma``.
    Deterministic when ``noise_sigma`` is zero.
    """
    if not (0 <= antenna < env.n_antennas):
        raise ContractError(f"antenna index {antenna} out of range (N={env.n_antennas})")
    f = phase_frequencies(env)
    h = _sum_paths([(p.attenuation, p.delay) for p in env.paths[antenna]], f)
    if env.noise_sigma > 0:
        h += _noise(env, rng, len(f))
    return h


def estimate_csi(received: np.ndarray, ltf: np.ndarray, *, link="up",
                 spot_id=None, gain_applied=1.0) -> CsiMeasurement:
    """Estimate the channel from received training symbols: H[n,k] = Y[n,k] / s_k."""
    received = np.asarray(received, dtype=np.complex128)
    ltf = np.asarray(ltf, dtype=np.complex128).reshape(-1)
    if np.any(ltf == 0):
        raise ContractError("LTF symbols must be nonzero")
    if received.ndim != 2 or received.shape[1] != ltf.shape[0]:
        raise ContractError(f"received shape {received.shape} does not match LTF length {ltf.shape[0]}")
    return CsiMeasurement(received / ltf[None, :], link=link, spot_id=spot_id,
                          gain_applied=gain_applied)


def _jittered_components(env, rng):
    """Per-measurement path lists with environmental dynamics applied.

    One jitter draw per reflected path index, shared across antennas (the
    same moving obstacle perturbs a reflection however it is received).
    """
    n_refl = len(env.paths[0]) - 1
    if any(len(ant) - 1 != n_refl for ant in env.paths):
        raise ContractError("path jitter requires the same reflector count on every antenna")
    d_delay = rng.normal(0.0, env.path_delay_jitter, n_refl) if env.path_delay_jitter > 0 else np.zeros(n_refl)
    d_gain = rng.normal(0.0, env.path_gain_jitter, n_refl) if env.path_gain_jitter > 0 else np.zeros(n_refl)
    per_antenna = []
    for ant in env.paths:
        comps = [(ant[0].attenuation, ant[0].delay)]
        for l, p in enumerate(ant[1:]):
            gain = max(p.attenuation * (1.0 + d_gain[l]), 0.0)
            delay = min(max(p.delay + d_delay[l], 0.0), MAX_INDOOR_DELAY * 0.999)
            comps.append((gain, delay))
        per_antenna.append(comps)
    return per_antenna


def _draw_measurement(env, rng, link, spot_id):
    f = phase_frequencies(env)
    dynamic = env.path_delay_jitter > 0 or env.path_gain_jitter > 0
    for _ in range(_MAX_RESAMPLE):
        if dynamic:
            per_antenna = _jittered_components(env, rng)
            h = np.stack([_sum_paths(comps, f) for comps in per_antenna])
            if env.noise_sigma > 0:
                h = h + np.stack([_noise(env, rng, len(f)) for _ in range(env.n_antennas)])
        else:
            h = np.stack([channel_response(env, n, rng) for n in range(env.n_antennas)])
        if link == "down" and env.reciprocity_sigma > 0:
            h = h * (1.0 + rng.normal(0.0, env.reciprocity_sigma, (env.n_antennas, 1)))
        gain = 1.0
        if env.agc_gains:
            gain = float(env.agc_gains[rng.integers(len(env.agc_gains))])
            h = h * gain
        if not np.any(h == 0):  # probability-zero event: reject and resample
            return CsiMeasurement(h, link=link, spot_id=spot_id, gain_applied=gain)
    raise ContractError("could not draw a zero-free channel measurement")


def sample_link_pair(env: SpotEnvironment, count_up: int, count_down: int, rng,
                     spot_id=None):
    """Draw paired uplink and downlink measurements from one environment.

    Both links share the path geometry; downlink rows additionally pick up a
    multiplicative (1 + eps) reciprocity mismatch per antenna per measurement.
    """
    ups = [_draw_measurement(env, rng, "up", spot_id) for _ in range(count_up)]
    downs = [_draw_measurement(env, rng, "down", spot_id) for _ in range(count_down)]
    return ups, downs


def amplitude_features(measurement: CsiMeasurement) -> AmplitudeSample:
    """Elementwise modulus of a CSI measurement."""
    return AmplitudeSample(np.abs(measurement.complex_h), measurement.link,
                           measurement.spot_id)


# -- dataset persistence (JSON lines) ----------------------------------------


@dataclass
class DatasetRecord:
    """One persisted measurement: amplitudes plus the spot it came from."""

    spot_id: str
    location: tuple
    link: str
    amps: np.ndarray
    complex_h: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def save_dataset(path, records, header=None, include_complex=False):
    """Write a dataset file: one header record, then one record per line."""
    with open(path, "w", encoding="utf-8") as fh:
        head = {"kind": "fooloc-dataset"}
        head.update(header or {})
        fh.write(json.dumps(head, sort_keys=True) + "\n")
        for rec in records:
            amps = np.asarray(rec.amps, dtype=np.float64)
            row = {
                "spot_id": rec.spot_id,
                "location": [float(rec.location[0]), float(rec.location[1])],
                "link": rec.link,
                "n": int(amps.shape[0]),
                "k": int(amps.shape[1]),
                "amps": amps.tolist(),
            }
            if include_complex and rec.complex_h is not None:
                c = np.asarray(rec.complex_h)
                row["complex"] = np.stack([c.real, c.imag], axis=-1).tolist()
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_dataset(path):
    """Read a dataset file; returns (header, records). Unknown fields are kept
    in ``extra`` and records without amplitude payloads are skipped."""
    header = {}
    records = []
    known = {"spot_id", "location", "link", "n", "k", "amps", "complex"}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            if "amps" not in row:
                if row.get("kind") == "fooloc-dataset":
                    header = row
                continue
            amps = np.asarray(row["amps"], dtype=np.float64)
            complex_h = None
            if "complex" in row:
                c = np.asarray(row["complex"], dtype=np.float64)
                complex_h = c[..., 0] + 1j * c[..., 1]
            records.append(DatasetRecord(
                spot_id=row["spot_id"],
                location=tuple(row["location"]),
                link=row["link"],
                amps=amps,
                complex_h=complex_h,
                extra={k: v for k, v in row.items() if k not in known},
            ))
    return header, records
