"""Synthetic Wi-Fi channels and CSI fingerprints.

Walks through the physical layer of the simulator: a multipath environment
for one client spot, per-subcarrier channel responses, LTF-based channel
estimation, and the uplink/downlink similarity that makes the attack
possible in the first place.
"""

import numpy as np

from fooloc import (
    amplitude_features,
    channel_response,
    estimate_csi,
    sample_link_pair,
    synth_environment,
)

rng = np.random.default_rng(0)

# A client 5 m from the AP, with reflections from the room's scatterers.
env = synth_environment(
    location=(2.0, 3.0), ap_location=(6.0, 6.0), rng_seed=42,
    reflector_range=(8, 12), k_subcarriers=56, n_antennas=2,
    noise_sigma=0.002, reciprocity_sigma=0.05,
)
print(f"environment: {env.n_antennas} antennas, {env.k_subcarriers} subcarriers, "
      f"{len(env.paths[0]) - 1} reflected paths")
direct = env.paths[0][0]
print(f"direct path: delay {direct.delay * 1e9:.2f} ns, gain {direct.attenuation:.3f} "
      f"(distance 5 m -> 16.67 ns)")

# One channel draw per antenna; the amplitude pattern across subcarriers is
# the location fingerprint.
h0 = channel_response(env, 0, rng)
h1 = channel_response(env, 1, rng)
print("\nantenna 0 |h| head:", np.round(np.abs(h0[:6]), 4))
print("antenna 1 |h| head:", np.round(np.abs(h1[:6]), 4))

# The AP never sees h directly: it estimates it from known training symbols.
ltf = np.where(np.arange(56) % 2 == 0, 1.0, -1.0).astype(complex)
received = np.stack([h0, h1]) * ltf[None, :]
estimated = estimate_csi(received, ltf)
print("estimation error vs true channel:",
      float(np.max(np.abs(estimated.complex_h - np.stack([h0, h1])))))

# Uplink and downlink share the propagation geometry. The attacker can only
# observe the downlink, but it is a faithful stand-in for the uplink.
ups, downs = sample_link_pair(env, count_up=50, count_down=50, rng=rng, spot_id="demo")
cors = []
for u, d in zip(ups, downs):
    for n in range(env.n_antennas):
        cors.append(np.corrcoef(np.abs(u.complex_h[n]), np.abs(d.complex_h[n]))[0, 1])
print(f"\nuplink/downlink amplitude correlation over 50 pairs: "
      f"mean {np.mean(cors):.4f} (min {np.min(cors):.4f})")

sample = amplitude_features(ups[0])
print(f"model input: amplitude sample {sample.amps.shape}, link={sample.link!r}, "
      f"all finite and nonnegative: {np.all(np.isfinite(sample.amps)) and np.all(sample.amps >= 0)}")
