"""Feed-forward regression of conditional expectations with a positive output head.

The network is ``z -> zeta(z) + mu`` (plain head) or ``z -> zeta(z)^+ + mu``
(positive head), with ``h`` hidden layers of width ``u``. Training follows a
two-phase scheme per pricing step: descent without the ReLU head for the first
half of the epochs, a closed-form least-squares refit of the output layer, then
descent with the ReLU head, keeping the best full-sample parameters. Steps are
trained backward in time, each warm-started from its successor.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .rng import RandomStream

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class ConfigurationError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


# activation name -> (f, f')
def _tanh(x):
    return np.tanh(x)


def _dtanh(x, y):
    return 1.0 - y * y


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _dsigmoid(x, y):
    return y * (1.0 - y)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _dsoftplus(x, y):
    return _sigmoid(x)


def _relu(x):
    return np.maximum(x, 0.0)


def _drelu(x, y):
    return (x > 0).astype(x.dtype)


ACTIVATIONS = {
    "tanh": (_tanh, _dtanh),
    "sigmoid": (_sigmoid, _dsigmoid),
    "softplus": (_softplus, _dsoftplus),
    "relu": (_relu, _drelu),
}


@dataclass
class NetworkParams:
    weights: list  # W[l] has shape (fan_out, fan_in)
    biases: list
    mu: float = 0.0
    positive_head: bool = False
    activation: str = "tanh"

    def copy(self) -> "NetworkParams":
        return NetworkParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                             float(self.mu), self.positive_head, self.activation)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases)) + 1

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for pair in zip(self.weights, self.biases) for p in pair]
                              + [np.array([self.mu])])

    def with_flat(self, theta: np.ndarray) -> "NetworkParams":
        out = self.copy()
        pos = 0
        for lst in zip(out.weights, out.biases):
            for p in lst:
                p[...] = theta[pos: pos + p.size].reshape(p.shape)
                pos += p.size
        out.mu = float(theta[pos])
        return out


def init_network(input_dim: int, hidden_layers: int, width: int, stream: RandomStream,
                 activation: str = "tanh", mu: float = 0.0) -> NetworkParams:
    """Glorot-normal weights, zero biases."""
    if activation not in ACTIVATIONS:
        raise ConfigurationError(f"unknown activation {activation!r}")
    sizes = [input_dim] + [width] * hidden_layers + [1]
    weights, biases = [], []
    for li, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        std = np.sqrt(2.0 / (fan_in + fan_out))
        weights.append(std * stream.split(li).normals(fan_in * fan_out).reshape(fan_out, fan_in))
        biases.append(np.zeros(fan_out))
    return NetworkParams(weights, biases, float(mu), False, activation)


def _hidden(net: NetworkParams, z: np.ndarray):
    """Pre- and post-activations of every hidden layer."""
    act = ACTIVATIONS[net.activation][0]
    pre, post = [], [z]
    a = z
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        x = a @ W.T + b
        a = act(x)
        pre.append(x)
        post.append(a)
    return pre, post


def raw_output(net: NetworkParams, z: np.ndarray) -> np.ndarray:
    _, post = _hidden(net, z)
    return post[-1] @ net.weights[-1][0] + net.biases[-1][0]


def forward(net: NetworkParams, z: np.ndarray, positive: bool | None = None,
            chunk: int = 1 << 16) -> np.ndarray:
    z = np.asarray(z)
    if z.ndim != 2 or z.shape[1] != net.input_dim:
        raise ValueError(f"expected features of shape (n, {net.input_dim}), got {z.shape}")
    pos = net.positive_head if positive is None else positive
    out = np.empty(len(z), dtype=z.dtype)
    for s in range(0, len(z), chunk):
        f = raw_output(net, z[s: s + chunk])
        out[s: s + chunk] = (np.maximum(f, 0.0) if pos else f) + net.mu
    return out


def loss(net: NetworkParams, z: np.ndarray, y: np.ndarray, positive: bool,
         chunk: int = 1 << 16) -> float:
    total = 0.0
    for s in range(0, len(z), chunk):
        r = forward(net, z[s: s + chunk], positive) - y[s: s + chunk]
        total += float(np.dot(r, r))
    return total / len(z)


def loss_and_grad(net: NetworkParams, z: np.ndarray, y: np.ndarray, positive: bool):
    """Mean squared error and its gradient (dW list, db list, dmu)."""
    dact = ACTIVATIONS[net.activation][1]
    pre, post = _hidden(net, z)
    f = post[-1] @ net.weights[-1][0] + net.biases[-1][0]
    pred = (np.maximum(f, 0.0) if positive else f) + net.mu
    r = pred - y
    m = len(y)
    g = (2.0 / m) * r
    dmu = float(g.sum())
    if positive:
        g = g * (f > 0)
    L = len(net.weights)
    dW, db = [None] * L, [None] * L
    dW[-1] = (g @ post[-1])[None, :]
    db[-1] = np.array([g.sum()])
    delta = g[:, None] * net.weights[-1]
    for li in range(L - 2, -1, -1):
        delta = delta * dact(pre[li], post[li + 1])
        dW[li] = delta.T @ post[li]
        db[li] = delta.sum(axis=0)
        if li > 0:
            delta = delta @ net.weights[li]
    return float(np.dot(r, r)) / m, dW, db, dmu


def make_batches(M: int, N: int, n_batches: int) -> list[np.ndarray]:
    """Contiguous blocks of the row-major flat index ``k * N + l``."""
    total = M * N
    if n_batches < 1 or total % n_batches:
        raise ConfigurationError(f"n_batches={n_batches} must divide M*N={total}")
    size = total // n_batches
    return [np.arange(b * size, (b + 1) * size) for b in range(n_batches)]


def refit_output_layer(net: NetworkParams, z: np.ndarray, y: np.ndarray,
                       ridge: float = 1e-8, chunk: int = 1 << 16) -> NetworkParams:
    """Least-squares refit of the last layer on the hidden features (plain head)."""
    u = net.weights[-1].shape[1]
    A = np.zeros((u + 1, u + 1))
    c = np.zeros(u + 1)
    for s in range(0, len(z), chunk):
        _, post = _hidden(net, z[s: s + chunk])
        H = np.concatenate([post[-1], np.ones((len(post[-1]), 1))], axis=1)
        A += H.T @ H
        c += H.T @ (y[s: s + chunk] - net.mu)
    lam = ridge * np.trace(A) / (u + 1)
    sol = np.linalg.solve(A + lam * np.eye(u + 1), c)
    out = net.copy()
    out.weights[-1] = sol[:u][None, :].astype(net.weights[-1].dtype)
    out.biases[-1] = sol[u:].astype(net.biases[-1].dtype)
    return out


@dataclass
class TrainConfig:
    epochs: int = 8
    n_batches: int = 32
    learning_rate: float = 1e-2
    optimizer: str = "adam"
    hidden_layers: int = 2
    width: int = 64
    activation: str = "tanh"
    seed: int = 0
    ridge: float = 1e-8
    dtype: str = "float64"

    def __post_init__(self):
        if self.epochs < 2:
            raise ConfigurationError("at least two epochs are needed for the head switch")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError("optimizer must be 'adam' or 'sgd'")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainReport:
    epoch_losses: list = field(default_factory=list)   # full-sample loss with positive head
    best_loss: float = float("inf")
    best_epoch: int = -1
    seconds: float = 0.0
    qr_trace: list = field(default_factory=list)        # (epoch, Q, R) when requested
    label_scale: float = 1.0                             # losses are in units of label_scale^2


class _Adam:
    def __init__(self, shapes, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        out = []
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            out.append((p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False))
        return out


def _sgd_step(net, grads, lr):
    dW, db, dmu = grads
    net.weights = [w - lr * g for w, g in zip(net.weights, dW)]
    net.biases = [b - lr * g for b, g in zip(net.biases, db)]
    net.mu = net.mu - lr * dmu


def train_base(z: np.ndarray, y: np.ndarray, batches, config: TrainConfig, init: NetworkParams,
               qr_pair=None) -> tuple[NetworkParams, TrainReport]:
    """Train one pricing step; returns the best parameters seen at epoch ends.

    ``qr_pair`` optionally holds ``(z1, y1, z2, y2)``: two conditionally
    independent replicas per outer path, used to record the loss-variance
    decomposition at every epoch end.
    """
    from .planner import estimate_qr

    t0 = time.perf_counter()
    net = init.copy()
    net.positive_head = False
    half = config.epochs // 2
    report = TrainReport()
    best = net.copy()
    adam = None
    if config.optimizer == "adam":
        shapes = [w.shape for w in net.weights] + [b.shape for b in net.biases] + [()]
        adam = _Adam(shapes, config.learning_rate)
    pos = False
    for epoch in range(1, config.epochs + 1):
        for idx in batches:
            zb, yb = z[idx[0]: idx[-1] + 1], y[idx[0]: idx[-1] + 1]
            val, dW, db, dmu = loss_and_grad(net, zb, yb, pos)
            if not np.isfinite(val):
                raise TrainingDiverged(
                    f"non-finite batch loss at epoch {epoch}; lower the learning rate "
                    f"(currently {config.learning_rate})")
            if adam is not None:
                L = len(net.weights)
                new = adam.step(net.weights + net.biases + [np.array(net.mu)],
                                dW + db + [np.array(dmu)])
                net.weights, net.biases, net.mu = new[:L], new[L:2 * L], float(new[-1])
            else:
                _sgd_step(net, (dW, db, dmu), config.learning_rate)
            # keep the NN+ contract: with mu >= 0 every positive-head output is >= 0
            net.mu = max(net.mu, 0.0)
        if epoch == half:
            # the head clips at mu: move a positive offset into the refitted output
            # bias so that the positive head floors predictions at zero, not at mu
            net.mu = min(net.mu, 0.0)
            net = refit_output_layer(net, z, y, config.ridge)
            pos = True
        full = loss(net, z, y, positive=True)
        if not np.isfinite(full):
            raise TrainingDiverged(f"non-finite full-sample loss at epoch {epoch}")
        report.epoch_losses.append(full)
        if full < report.best_loss:
            report.best_loss, report.best_epoch = full, epoch
            best = net.copy()
        if qr_pair is not None:
            z1, y1, z2, y2 = qr_pair
            g1 = (forward(net, z1, positive=pos) - y1) ** 2
            g2 = (forward(net, z2, positive=pos) - y2) ** 2
            qr = estimate_qr(g1, g2)
            report.qr_trace.append((epoch, qr.Q, qr.R))
    best.positive_head = True
    report.seconds = time.perf_counter() - t0
    return best, report


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, z: np.ndarray, n_passthrough: int = 0) -> "Standardizer":
        mean = z.mean(axis=0)
        scale = z.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        mean[:n_passthrough] = 0.0
        scale[:n_passthrough] = 1.0
        return cls(mean, scale)

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return (z - self.mean) / self.scale


@dataclass
class TrainedModelSequence:
    """Per-step networks ``nets[i]`` and standardizers for steps ``1..n``."""

    nets: dict
    scalers: dict
    config: TrainConfig
    reports: dict = field(default_factory=dict)

    @property
    def steps(self):
        return sorted(self.nets)

    def predict(self, i: int, z: np.ndarray) -> np.ndarray:
        net = self.nets[i]
        zs = self.scalers[i](z).astype(net.weights[0].dtype)
        return forward(net, zs).astype(np.float64)

    def save(self, path):
        arrays = {}
        meta = {"version": FORMAT_VERSION, "config": asdict(self.config),
                "config_hash": self.config.digest(), "steps": {}}
        for i in self.steps:
            net = self.nets[i]
            meta["steps"][str(i)] = {"mu": net.mu, "activation": net.activation,
                                     "positive_head": net.positive_head,
                                     "n_layers": len(net.weights)}
            for li, (w, b) in enumerate(zip(net.weights, net.biases)):
                arrays[f"s{i}_W{li}"] = w
                arrays[f"s{i}_b{li}"] = b
            arrays[f"s{i}_mean"] = self.scalers[i].mean
            arrays[f"s{i}_scale"] = self.scalers[i].scale
        arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "TrainedModelSequence":
        with np.load(path) as zf:
            meta = json.loads(zf["meta"].tobytes().decode())
            if meta.get("version") != FORMAT_VERSION:
                raise ValueError(f"unsupported model file version {meta.get('version')}")
            nets, scalers = {}, {}
            for key, m in meta["steps"].items():
                i = int(key)
                L = m["n_layers"]
                nets[i] = NetworkParams([zf[f"s{i}_W{li}"] for li in range(L)],
                                        [zf[f"s{i}_b{li}"] for li in range(L)],
                                        m["mu"], m["positive_head"], m["activation"])
                scalers[i] = Standardizer(zf[f"s{i}_mean"], zf[f"s{i}_scale"])
        return cls(nets, scalers, TrainConfig(**meta["config"]))


def _label_scale(y) -> float:
    y = np.asarray(y, dtype=np.float64)
    s = float(y.std())
    if not s > 0:
        s = float(abs(y.mean()))
    return s if s > 0 and np.isfinite(s) else 1.0


def rescale_output(net: NetworkParams, s: float) -> NetworkParams:
    """Network predicting ``s`` times the output of ``net`` (``s > 0``, exact for both heads)."""
    out = net.copy()
    out.weights[-1] = (out.weights[-1] * s).astype(out.weights[-1].dtype)
    out.biases[-1] = (out.biases[-1] * s).astype(out.biases[-1].dtype)
    out.mu = float(out.mu * s)
    return out


def backward_learn(label_source, steps, config: TrainConfig, M: int, N: int,
                   n_passthrough: int = 0, qr_source=None, on_step=None) -> TrainedModelSequence:
    """Train steps from last to first, warm-starting each from its successor.

    ``label_source(i)`` returns ``(features, labels)`` for step ``i`` in
    row-major ``(k, l)`` order. The first ``n_passthrough`` feature columns
    (default indicators) are not standardized. ``qr_source(i)``, if given,
    returns the twin-replica tuple passed to :func:`train_base`.
    """
    dtype = np.dtype(config.dtype)
    batches = make_batches(M, N, config.n_batches)
    steps = sorted(steps, reverse=True)
    stream = RandomStream(config.seed).split(1)
    nets, scalers, reports = {}, {}, {}
    prev = None
    for i in steps:
        z, y = label_source(i)
        # each step trains on labels of unit scale; a positive rescaling of the
        # output layer converts the warm start exactly between scales
        y_scale = _label_scale(y)
        scaler = Standardizer.fit(z, n_passthrough)
        zs = scaler(z).astype(dtype)
        ys = (np.asarray(y, dtype=np.float64) / y_scale).astype(dtype)
        if prev is None:
            init = init_network(z.shape[1], config.hidden_layers, config.width, stream,
                                config.activation, mu=float(np.mean(ys)))
            init.weights = [w.astype(dtype) for w in init.weights]
            init.biases = [b.astype(dtype) for b in init.biases]
        else:
            init = rescale_output(prev, 1.0 / y_scale)
        qr_pair = None
        if qr_source is not None:
            z1, y1, z2, y2 = qr_source(i)
            qr_pair = (scaler(z1).astype(dtype), (y1 / y_scale).astype(dtype),
                       scaler(z2).astype(dtype), (y2 / y_scale).astype(dtype))
        best, rep = train_base(zs, ys, batches, config, init, qr_pair)
        rep.label_scale = y_scale
        log.info("step %d: best loss %.6g at epoch %d (%.1fs)", i, rep.best_loss * y_scale ** 2,
                 rep.best_epoch, rep.seconds)
        prev = rescale_output(best, y_scale)
        nets[i], scalers[i], reports[i] = prev, scaler, rep
        if on_step is not None:
            on_step(i, prev, rep)
    return TrainedModelSequence(nets, scalers, config, reports)
