"""Victim localization networks and their training loop.

Two regression architectures map an N x K CSI amplitude sample to a 2D
location in meters:

- ``dnn_a``: per-antenna min-max normalization, flatten, then six fully
  connected layers fc1024/fc512/fc1024/fc512/fc1024/fc2 where layers 1, 3, 5
  have no activation, layers 2 and 4 use ReLU, and the head is a sigmoid.
- ``dnn_b``: normalization, three 1x1 convolutions (channel mixing across
  antennas with the subcarrier axis as the spatial dimension:
  conv256/conv128/conv128, all ReLU), flatten, then fc512/fc256/fc2 with a
  sigmoid head.

The sigmoid pair is rescaled affinely to the model's area bounds, so
predictions always land inside the service area. Training minimizes the mean
squared Euclidean error with plain SGD and keeps the parameters that achieve
the best validation median error.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass

import numpy as np

from .channel import AmplitudeSample
from .errors import ContractError
from .tensorcore import Graph, sgd_step

ARCHITECTURES = ("dnn_a", "dnn_b")

# (kind, width) per layer; activations are fixed by the architecture
_FC_A = ((1024, None), (512, "relu"), (1024, None), (512, "relu"), (1024, None), (2, "sigmoid"))
_CONV_B = ((256, "relu"), (128, "relu"), (128, "relu"))
_FC_B = ((512, "relu"), (256, "relu"), (2, "sigmoid"))


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    validation_fraction: float = 0.2

    def validate(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ContractError("epochs, batch_size and learning_rate must be positive")
        if not (0.0 < self.validation_fraction < 1.0):
            raise ContractError("validation_fraction must lie in (0, 1)")


def normalize_input(x) -> np.ndarray:
    """Min-max rescale each antenna row to [0, 1]; constant rows map to 0.5."""
    x = np.asarray(x, dtype=np.float64)
    lo = x.min(axis=-1, keepdims=True)
    hi = x.max(axis=-1, keepdims=True)
    span = hi - lo
    flat = span == 0.0
    return np.where(flat, 0.5, (x - lo) / np.where(flat, 1.0, span))


def _layer_shapes(arch, n_antennas, k_subcarriers):
    """Weight/bias shapes in declared layer order."""
    shapes = []
    if arch == "dnn_a":
        fan_in = n_antennas * k_subcarriers
        for width, _ in _FC_A:
            shapes += [(fan_in, width), (width,)]
            fan_in = width
    elif arch == "dnn_b":
        chans = n_antennas
        for width, _ in _CONV_B:
            shapes += [(width, chans), (width, 1)]
            chans = width
        fan_in = chans * k_subcarriers
        for width, _ in _FC_B:
            shapes += [(fan_in, width), (width,)]
            fan_in = width
    else:
        raise ContractError(f"unknown architecture {arch!r}")
    return shapes


def _gain(activation):
    # variance-preserving init: He gain before ReLU, unit gain elsewhere
    # (the no-activation layers would otherwise double variance per layer)
    return 2.0 if activation == "relu" else 1.0


def _init_theta(arch, n_antennas, k_subcarriers, rng):
    theta = []

    def fc(fan_in, layers):
        for width, act in layers:
            theta.append(rng.normal(0.0, np.sqrt(_gain(act) / fan_in), (fan_in, width)))
            theta.append(np.zeros(width))
            fan_in = width

    if arch == "dnn_a":
        fc(n_antennas * k_subcarriers, _FC_A)
    else:
        chans = n_antennas
        for width, act in _CONV_B:
            theta.append(rng.normal(0.0, np.sqrt(_gain(act) / chans), (width, chans)))
            theta.append(np.zeros((width, 1)))
            chans = width
        fc(chans * k_subcarriers, _FC_B)
    return theta


class LocalizationModel:
    """A trained (or freshly initialized) localization network.

    Immutable once trained; safe to share across readers. ``theta`` holds
    weight and bias arrays in declared layer order.
    """

    def __init__(self, arch, n_antennas, k_subcarriers, area_bounds, theta, seed=0):
        if arch not in ARCHITECTURES:
            raise ContractError(f"unknown architecture {arch!r}")
        self.arch = arch
        self.n_antennas = int(n_antennas)
        self.k_subcarriers = int(k_subcarriers)
        self.area_bounds = tuple(float(v) for v in area_bounds)  # x_min, x_max, y_min, y_max
        if len(self.area_bounds) != 4:
            raise ContractError("area_bounds must be (x_min, x_max, y_min, y_max)")
        expected = _layer_shapes(arch, n_antennas, k_subcarriers)
        got = [tuple(t.shape) for t in theta]
        if got != expected:
            raise ContractError(f"theta shapes {got} do not match {arch} layout {expected}")
        self.theta = [np.asarray(t, dtype=np.float64) for t in theta]
        self.seed = seed
        self._inference = None
        self._lock = threading.Lock()  # the cached inference graph is mutable

    @classmethod
    def initialize(cls, arch, n_antennas, k_subcarriers, area_bounds, seed=0):
        rng = np.random.default_rng(seed)
        theta = _init_theta(arch, n_antennas, k_subcarriers, rng)
        return cls(arch, n_antennas, k_subcarriers, area_bounds, theta, seed=seed)

    # -- graph construction -------------------------------------------------

    def build_graph(self, g: Graph, x_node: int, trainable: bool = False):
        """Append this network's forward pass to `g`.

        `x_node` must hold raw amplitudes of shape (batch, N, K); the returned
        node evaluates to (batch, 2) locations in meters. Returns
        (prediction_node, weight_node_ids).
        """
        weights = [g.leaf(t, parameter=trainable) for t in self.theta]
        h = g.minmax_norm(x_node)
        wi = 0
        if self.arch == "dnn_a":
            h = g.reshape(h, (-1, self.n_antennas * self.k_subcarriers))
            layers = _FC_A
        else:
            # channel mixing over antennas: fold batch and subcarriers into
            # one axis so each 1x1 convolution is a single matmul
            h = g.reshape(g.transpose(h, (1, 0, 2)), (self.n_antennas, -1))
            for width, act in _CONV_B:
                h = g.add(g.matmul(weights[wi], h), weights[wi + 1])
                h = g.relu(h)
                wi += 2
            out_chans = _CONV_B[-1][0]
            h = g.transpose(g.reshape(h, (out_chans, -1, self.k_subcarriers)), (1, 0, 2))
            h = g.reshape(h, (-1, out_chans * self.k_subcarriers))
            layers = _FC_B
        for width, act in layers:
            h = g.add(g.matmul(h, weights[wi]), weights[wi + 1])
            if act == "relu":
                h = g.relu(h)
            elif act == "sigmoid":
                h = g.sigmoid(h)
            wi += 2
        # affine rescale of the sigmoid pair into the service area
        x_min, x_max, y_min, y_max = self.area_bounds
        span = g.constant([x_max - x_min, y_max - y_min])
        origin = g.constant([x_min, y_min])
        pred = g.add(g.mul(h, span), origin)
        return pred, weights

    def _inference_graph(self):
        if self._inference is None:
            g = Graph()
            x = g.leaf(np.zeros((1, self.n_antennas, self.k_subcarriers)))
            pred, _ = self.build_graph(g, x, trainable=False)
            self._inference = (g, x, pred)
        return self._inference

    def forward_batch(self, amps) -> np.ndarray:
        """Predict locations for a (batch, N, K) array of raw amplitudes."""
        amps = np.asarray(amps, dtype=np.float64)
        if amps.ndim == 2:
            amps = amps[None]
        if amps.shape[1:] != (self.n_antennas, self.k_subcarriers):
            raise ContractError(
                f"input shape {amps.shape[1:]} does not match model ({self.n_antennas}, {self.k_subcarriers})"
            )
        if amps.shape[0] == 0:
            return np.zeros((0, 2))
        with self._lock:
            g, x, pred = self._inference_graph()
            g.set_value(x, amps)
            return g.evaluate(pred).copy()

    def predict(self, sample) -> np.ndarray:
        amps = sample.amps if isinstance(sample, AmplitudeSample) else sample
        return self.forward_batch(np.asarray(amps)[None])[0]

    # -- persistence ---------------------------------------------------------

    def save(self, path, extra_header=None):
        """Single-file container: JSON header line, then raw little-endian f64."""
        header = {
            "format": "fooloc-model-v1",
            "arch": self.arch,
            "n_antennas": self.n_antennas,
            "k_subcarriers": self.k_subcarriers,
            "area_bounds": list(self.area_bounds),
            "seed": self.seed,
            "shapes": [list(t.shape) for t in self.theta],
        }
        header.update(extra_header or {})
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            for t in self.theta:
                fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode("utf-8"))
            blob = fh.read()
        theta = []
        offset = 0
        for shape in header["shapes"]:
            n = int(np.prod(shape))
            theta.append(np.frombuffer(blob, dtype="<f8", count=n, offset=offset)
                         .reshape(shape).astype(np.float64))
            offset += n * 8
        model = cls(header["arch"], header["n_antennas"], header["k_subcarriers"],
                    header["area_bounds"], theta, seed=header.get("seed", 0))
        model.header = header
        return model


def _dataset_arrays(dataset):
    """Accept (X, y) arrays or a list of (AmplitudeSample, location) pairs."""
    if isinstance(dataset, tuple) and len(dataset) == 2:
        x, y = dataset
        return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    xs, ys = [], []
    for sample, loc in dataset:
        xs.append(sample.amps if isinstance(sample, AmplitudeSample) else np.asarray(sample))
        ys.append(loc)
    return np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)


def train_localizer(arch, dataset, cfg: TrainConfig, area_bounds) -> LocalizationModel:
    """Train one localization network on uplink amplitude samples.

    Minimizes mean squared Euclidean error between predicted and true
    locations; returns the parameters with the best validation median error.
    Deterministic for a fixed ``cfg.seed``.
    """
    cfg.validate()
    x, y = _dataset_arrays(dataset)
    if x.size == 0:
        raise ContractError("training dataset is empty")
    if len(np.unique(y, axis=0)) < 2:
        raise ContractError("need at least 2 distinct training spots")
    x_min, x_max, y_min, y_max = area_bounds
    if (np.any(y[:, 0] < x_min) or np.any(y[:, 0] > x_max)
            or np.any(y[:, 1] < y_min) or np.any(y[:, 1] > y_max)):
        raise ContractError("labels must lie inside area_bounds")

    n_samples, n_antennas, k_subcarriers = x.shape
    rng = np.random.default_rng(cfg.seed)
    model = LocalizationModel.initialize(arch, n_antennas, k_subcarriers, area_bounds, seed=cfg.seed)

    perm = rng.permutation(n_samples)
    n_val = min(max(1, round(n_samples * cfg.validation_fraction)), n_samples - 1)
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    g = Graph()
    x_node = g.leaf(x[:1])
    pred, weights = model.build_graph(g, x_node, trainable=True)
    label = g.leaf(y[:1])
    # squared Euclidean error on span-normalized coordinates: a constant
    # positive rescale of the meters-domain objective (same minimizer) that
    # keeps plain-SGD steps well conditioned for any area size
    inv_span = g.constant([1.0 / (x_max - x_min), 1.0 / (y_max - y_min)])
    diff = g.mul(g.sub(pred, label), inv_span)
    loss = g.mul(g.constant(2.0), g.mean(g.mul(diff, diff)))

    def validation_median_le():
        les = []
        for start in range(0, len(val_idx), 512):
            idx = val_idx[start:start + 512]
            g.set_value(x_node, x[idx])
            p = g.evaluate(pred)
            les.append(np.linalg.norm(p - y[idx], axis=1))
        return float(np.median(np.concatenate(les)))

    best_le = np.inf
    best_theta = [w.copy() for w in model.theta]
    for _ in range(cfg.epochs):
        order = rng.permutation(train_idx)
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            g.set_value(x_node, x[idx])
            g.set_value(label, y[idx])
            loss_val = g.evaluate(loss)
            if not np.isfinite(loss_val):
                raise ContractError("training diverged (non-finite loss); lower the learning rate")
            grads = g.backward(loss)
            sgd_step(g, grads, cfg.learning_rate)
        le = validation_median_le()
        if le < best_le:
            best_le = le
            best_theta = [g.value(w).copy() for w in weights]

    trained = LocalizationModel(arch, n_antennas, k_subcarriers, area_bounds, best_theta, seed=cfg.seed)
    trained.validation_median_le = best_le
    return trained


# -- module-level spec surface -------------------------------------------------


def model_forward(model: LocalizationModel, sample) -> np.ndarray:
    """Predict the 2D location (meters) for one amplitude sample."""
    return model.predict(sample)


def predict_batch(model: LocalizationModel, samples) -> list:
    """Order-preserving batch version of :func:`model_forward`."""
    if len(samples) == 0:
        return []
    amps = np.stack([s.amps if isinstance(s, AmplitudeSample) else np.asarray(s) for s in samples])
    return list(model.forward_batch(amps))
