"""Dense feedforward networks with explicit backpropagation.

Kept deliberately small: ReLU hidden layers, a linear or softmax head,
squared-error and KL distillation losses with hand-derived gradients, SGD
and Adam, a central-difference gradient checker, and an npz checkpoint
container. Everything operates on plain numpy arrays.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-8
CHECKPOINT_VERSION = 1


class MlpNet:
    """Fully connected net. sizes = (d_in, h1, ..., d_out).

    head='linear' returns raw outputs (q-values); head='softmax' returns
    row-stochastic probabilities. Weights start Glorot-uniform, biases zero.
    """

    def __init__(self, sizes, head="linear", seed=0, dtype=np.float32,
                 _init=True):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if head not in ("linear", "softmax"):
            raise ValueError(f"unknown head {head!r}")
        self.sizes = tuple(int(s) for s in sizes)
        self.head = head
        self.dtype = np.dtype(dtype)
        self.weights = []
        self.biases = []
        if _init:
            rng = np.random.default_rng(seed)
            for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
                limit = np.sqrt(6.0 / (n_in + n_out))
                self.weights.append(
                    rng.uniform(-limit, limit, (n_in, n_out)).astype(self.dtype))
                self.biases.append(np.zeros(n_out, dtype=self.dtype))

    @classmethod
    def from_arrays(cls, sizes, head, weights, biases, dtype):
        net = cls(sizes, head=head, dtype=dtype, _init=False)
        net.weights = [np.array(w, dtype=net.dtype) for w in weights]
        net.biases = [np.array(b, dtype=net.dtype) for b in biases]
        return net

    def clone(self) -> "MlpNet":
        return MlpNet.from_arrays(self.sizes, self.head, self.weights,
                                  self.biases, self.dtype)

    def params(self) -> list[np.ndarray]:
        """Interleaved [W0, b0, W1, b1, ...]; the live arrays, not copies."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, _ = self.forward_cached(x)
        return out

    def forward_cached(self, x):
        """Returns (output, cache). The cache feeds backward()."""
        x = np.asarray(x, dtype=self.dtype)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        acts = [x]
        pres = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pres.append(z)
            h = np.maximum(z, 0.0) if i < last else z
            acts.append(h)
        out = softmax(h) if self.head == "softmax" else h
        if squeeze:
            out = out[0]
        cache = (acts, pres)
        return out, cache

    def backward(self, cache, d_last: np.ndarray) -> list[np.ndarray]:
        """Gradients for all parameters given dLoss/d(final linear output).

        For a softmax head, d_last is the gradient with respect to the
        logits (the loss functions fold the softmax jacobian in themselves).
        Returns [dW0, db0, ...] matching params().
        """
        acts, pres = cache
        grads = [None] * (2 * len(self.weights))
        delta = np.asarray(d_last, dtype=self.dtype)
        for i in range(len(self.weights) - 1, -1, -1):
            grads[2 * i] = acts[i].T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (pres[i - 1] > 0)
        return grads


def softmax(z: np.ndarray) -> np.ndarray:
    """Row softmax, stabilized by max subtraction so huge logits stay finite."""
    z = np.asarray(z)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# --- losses ------------------------------------------------------------------

def q_loss_and_grad(net: MlpNet, states, actions, targets):
    """Mean squared error on the taken actions' values.

    loss = mean_i (target_i - q(s_i, a_i))^2. Gradient flows only through
    the selected outputs.
    """
    if net.head != "linear":
        raise ValueError("value loss expects a linear head")
    out, cache = net.forward_cached(states)
    actions = np.asarray(actions)
    targets = np.asarray(targets, dtype=net.dtype)
    rows = np.arange(out.shape[0])
    diff = out[rows, actions] - targets
    loss = float(np.mean(diff * diff))
    d_out = np.zeros_like(out)
    d_out[rows, actions] = (2.0 / out.shape[0]) * diff
    return loss, net.backward(cache, d_out)


def pi_loss_and_grad(net: MlpNet, states, target_probs):
    """Mean KL(target || predicted) over the batch.

    Probabilities inside the log are floored at PROB_FLOOR to keep the loss
    finite; the gradient is the exact softmax-KL gradient (p - t) / B of the
    unfloored objective.
    """
    if net.head != "softmax":
        raise ValueError("distillation loss expects a softmax head")
    probs, cache = net.forward_cached(states)
    t = np.asarray(target_probs, dtype=net.dtype)
    if np.min(probs) < PROB_FLOOR and logger.isEnabledFor(logging.DEBUG):
        logger.debug("probability floor active (min prob %.3g)", float(np.min(probs)))
    log_p = np.log(np.maximum(probs, PROB_FLOOR))
    t_log_t = np.zeros_like(t)
    mask = t > 0
    t_log_t[mask] = t[mask] * np.log(t[mask])
    loss = float(np.mean((t_log_t - t * log_p).sum(axis=1)))
    d_logits = (probs - t) / probs.shape[0]
    return loss, net.backward(cache, d_logits)


# --- optimizers ---------------------------------------------------------------

@dataclass
class OptimizerState:
    """SGD or Adam with bias-corrected moments; state mirrors the param list."""

    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def optimizer_step(opt: OptimizerState, params: list[np.ndarray],
                   grads: list[np.ndarray]) -> None:
    """One in-place update of params."""
    if len(params) != len(grads):
        raise ValueError("params/grads mismatch")
    if opt.kind == "sgd":
        for p, g in zip(params, grads):
            p -= (opt.lr * g).astype(p.dtype, copy=False)
        return
    if not opt.m:
        opt.m = [np.zeros_like(p) for p in params]
        opt.v = [np.zeros_like(p) for p in params]
    opt.t += 1
    b1t = 1.0 - opt.beta1 ** opt.t
    b2t = 1.0 - opt.beta2 ** opt.t
    for p, g, m, v in zip(params, grads, opt.m, opt.v):
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p -= (opt.lr * (m / b1t) / (np.sqrt(v / b2t) + opt.eps)).astype(
            p.dtype, copy=False)


# --- gradient checking ---------------------------------------------------------

def finite_diff_check(net: MlpNet, loss_fn, perturbation: float = 1e-5,
                      max_entries: int = 200, seed: int = 0) -> float:
    """Worst relative error between analytic and central-difference gradients.

    loss_fn maps the net to (loss, grads). Nets with more parameters than
    max_entries per array are spot-checked on a random subsample (at least
    max_entries entries each). Run this on a float64 net; single precision
    drowns the difference quotient.
    """
    if not 1e-6 <= perturbation <= 1e-4:
        raise ValueError("perturbation outside the trustworthy window")
    rng = np.random.default_rng(seed)
    _, grads = loss_fn(net)
    worst = 0.0
    for p, g in zip(net.params(), grads):
        flat_p = p.reshape(-1)
        flat_g = np.asarray(g).reshape(-1)
        n = flat_p.size
        idx = np.arange(n) if n <= max_entries else rng.choice(
            n, size=max_entries, replace=False)
        for i in idx:
            saved = flat_p[i]
            flat_p[i] = saved + perturbation
            lo_plus, _ = loss_fn(net)
            flat_p[i] = saved - perturbation
            lo_minus, _ = loss_fn(net)
            flat_p[i] = saved
            numeric = (lo_plus - lo_minus) / (2.0 * perturbation)
            rel = abs(flat_g[i] - numeric) / (abs(flat_g[i]) + abs(numeric) + 1e-12)
            worst = max(worst, rel)
    return worst


# --- checkpoint container -------------------------------------------------------

def net_arrays(net: MlpNet, prefix: str) -> dict:
    """Flatten a net into npz-ready keyed arrays (copies, so the snapshot
    survives further in-place training of the source)."""
    out = {
        f"{prefix}.sizes": np.array(net.sizes, dtype=np.int64),
        f"{prefix}.head": np.array(net.head),
        f"{prefix}.dtype": np.array(net.dtype.str),
    }
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        out[f"{prefix}.w{i}"] = w.copy()
        out[f"{prefix}.b{i}"] = b.copy()
    return out


def net_from_arrays(data: dict, prefix: str) -> MlpNet:
    sizes = data[f"{prefix}.sizes"].tolist()
    head = str(data[f"{prefix}.head"])
    dtype = np.dtype(str(data[f"{prefix}.dtype"]))
    n_layers = len(sizes) - 1
    weights = [data[f"{prefix}.w{i}"] for i in range(n_layers)]
    biases = [data[f"{prefix}.b{i}"] for i in range(n_layers)]
    return MlpNet.from_arrays(sizes, head, weights, biases, dtype)


def optimizer_arrays(opt: OptimizerState, prefix: str) -> dict:
    out = {
        f"{prefix}.meta": np.array([opt.lr, opt.beta1, opt.beta2, opt.eps,
                                    float(opt.t)]),
        f"{prefix}.kind": np.array(opt.kind),
    }
    for i, (m, v) in enumerate(zip(opt.m, opt.v)):
        out[f"{prefix}.m{i}"] = m.copy()
        out[f"{prefix}.v{i}"] = v.copy()
    return out


def optimizer_from_arrays(data: dict, prefix: str) -> OptimizerState:
    lr, beta1, beta2, eps, t = data[f"{prefix}.meta"]
    opt = OptimizerState(kind=str(data[f"{prefix}.kind"]), lr=float(lr),
                         beta1=float(beta1), beta2=float(beta2),
                         eps=float(eps), t=int(t))
    i = 0
    while f"{prefix}.m{i}" in data:
        opt.m.append(data[f"{prefix}.m{i}"].copy())
        opt.v.append(data[f"{prefix}.v{i}"].copy())
        i += 1
    return opt


def save_checkpoint(path, payload: dict) -> None:
    """Write a versioned npz container. Values must be arrays or array-like."""
    payload = dict(payload)
    payload["container_version"] = np.array(CHECKPOINT_VERSION, dtype=np.int64)
    np.savez_compressed(path, **payload)


def load_checkpoint(path) -> dict:
    with np.load(path, allow_pickle=False) as data:
        out = {k: data[k] for k in data.files}
    version = int(out.pop("container_version", -1))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    return out


def save_net(path, net: MlpNet, optimizer: OptimizerState | None = None) -> None:
    payload = net_arrays(net, "net")
    if optimizer is not None:
        payload.update(optimizer_arrays(optimizer, "opt"))
    save_checkpoint(path, payload)


def load_net(path) -> tuple[MlpNet, OptimizerState | None]:
    data = load_checkpoint(path)
    net = net_from_arrays(data, "net")
    opt = optimizer_from_arrays(data, "opt") if "opt.kind" in data else None
    return net, opt
