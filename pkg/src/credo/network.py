"""Feed-forward perceptrons trained with Adam on tape-built objectives.

The same per-sample graph builder serves two evaluation strategies: the
training loop binds data as matrix columns into a reusable buffer, while
the public loss constructors unroll a batch with data baked in as
constants so the result is a single differentiable root suitable for
finite-difference checks.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

CHECKPOINT_FORMAT = "credo-perceptron-v1"


class TrainingDivergedError(RuntimeError):
    """Raised when the objective stops being finite during training."""


@dataclass(frozen=True)
class Architecture:
    """Shape, activation, and task of a multilayer perceptron."""

    n_inputs: int
    hidden: tuple[int, ...]
    n_outputs: int
    task: str = "regression"
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.n_inputs < 1 or self.n_outputs < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("all layer widths must be positive")
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "classification" and self.n_outputs < 2:
            raise ValueError("classification needs at least two output logits")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.n_inputs, *self.hidden, self.n_outputs)

    @property
    def n_params(self) -> int:
        w = self.widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))

    def param_views(self, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Split a flat parameter vector into per-layer (W, b) views."""
        views = []
        w = self.widths
        off = 0
        for i in range(len(w) - 1):
            fan_in, fan_out = w[i], w[i + 1]
            W = flat[off : off + fan_in * fan_out].reshape(fan_in, fan_out)
            off += fan_in * fan_out
            b = flat[off : off + fan_out]
            off += fan_out
            views.append((W, b))
        return views


@dataclass
class TrainingConfig:
    epochs: int
    batch_size: int
    learning_rate: float
    lambda_reg: float = 0.0
    lambda_warmup: int = 0
    weight_decay: float = 0.0
    dropout: float = 0.0
    ema_decay: float = 0.0
    lr_schedule: str = "constant"
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.lambda_reg < 0.0 or self.weight_decay < 0.0:
            raise ValueError("penalty weights must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lambda_warmup < 0:
            raise ValueError("lambda_warmup must be non-negative")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")


class Perceptron:
    """Fully connected network (relu or tanh) with linear output heads."""

    def __init__(self, arch: Architecture, seed: int = 0):
        self.arch = arch
        self.seed = int(seed)
        self.params = glorot_init(arch, self.seed)

    def forward(self, X: np.ndarray) -> np.ndarray:
        """Logits (classification) or raw outputs (regression); no dropout."""
        A = np.atleast_2d(np.asarray(X, dtype=np.float64))
        views = self.arch.param_views(self.params)
        act = np.tanh if self.arch.activation == "tanh" else lambda z: np.maximum(z, 0.0)
        for W, b in views[:-1]:
            A = act(A @ W + b)
        W, b = views[-1]
        out = A @ W + b
        return out[0] if np.asarray(X).ndim == 1 else out

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = np.atleast_2d(self.forward(X))
        if self.arch.task == "classification":
            return np.argmax(out, axis=1)
        return out[:, 0]


def glorot_init(arch: Architecture, seed: int) -> np.ndarray:
    """Uniform(-s, s) weights with s = sqrt(6 / (fan_in + fan_out)).

    Biases are uniform in [0, 1/sqrt(fan_in)]: small positive biases keep
    relu units alive at the start, where zero or signed biases leave some
    units permanently dead on single-signed input ranges.
    """
    rng = np.random.default_rng(seed)
    flat = np.zeros(arch.n_params)
    for W, b in arch.param_views(flat):
        fan_in, fan_out = W.shape
        s = np.sqrt(6.0 / (fan_in + fan_out))
        W[:] = rng.uniform(-s, s, size=W.shape)
        b[:] = rng.uniform(0.0, 1.0, size=b.shape) / np.sqrt(fan_in)
    return flat


# -- tape construction ------------------------------------------------


def make_param_nodes(tape: ad.Tape, arch: Architecture) -> list[ad.Node]:
    """Parameter leaves in flat-vector order (per layer: W row-major, then b)."""
    return [tape.parameter() for _ in range(arch.n_params)]


def build_forward(
    tape: ad.Tape,
    arch: Architecture,
    param_nodes: list[ad.Node],
    x_nodes: list[ad.Node],
    dropout_masks: list[list[ad.Node]] | None = None,
) -> list[ad.Node]:
    """Wire one forward pass; returns the output nodes.

    ``dropout_masks`` holds one mask leaf per hidden unit; mask values are
    bound externally (0 or 1/keep), so the same graph serves every step.
    """
    if len(x_nodes) != arch.n_inputs:
        raise ValueError("input node count does not match the architecture")
    if len(param_nodes) != arch.n_params:
        raise ValueError("parameter node count does not match the architecture")
    widths = arch.widths
    layer = list(x_nodes)
    off = 0
    for li in range(1, len(widths)):
        fan_in, fan_out = widths[li - 1], widths[li]
        hidden = li < len(widths) - 1
        nxt = []
        for j in range(fan_out):
            terms = [layer[i] * param_nodes[off + i * fan_out + j] for i in range(fan_in)]
            pre = tape.sum(terms) + param_nodes[off + fan_in * fan_out + j]
            if hidden:
                act = pre.tanh() if arch.activation == "tanh" else pre.relu()
                if dropout_masks is not None:
                    act = act * dropout_masks[li - 1][j]
                nxt.append(act)
            else:
                nxt.append(pre)
        off += fan_in * fan_out + fan_out
        layer = nxt
    return layer


def build_sample_loss(
    tape: ad.Tape,
    arch: Architecture,
    outputs: list[ad.Node],
    target_nodes: list[ad.Node],
) -> ad.Node:
    """Per-sample loss node: squared error, or cross-entropy from one-hot leaves.

    Classification targets are one-hot leaves so the graph stays static; the
    log-sum-exp is stabilized with a running max chain.
    """
    if arch.task == "regression":
        diffs = [(o - t) for o, t in zip(outputs, target_nodes)]
        return tape.sum([d * d for d in diffs])
    m = outputs[0]
    for o in outputs[1:]:
        m = tape.max(m, o)
    lse = m + tape.log(tape.sum([(o - m).exp() for o in outputs]))
    picked = tape.sum([t * o for t, o in zip(target_nodes, outputs)])
    return lse - picked


# -- public objective constructors -------------------------------------


@dataclass
class TapeObjective:
    """A batch objective as one differentiable tape root.

    Batch data live in ``data_bindings``; only the parameter leaves vary,
    so the value is a pure function of the parameter vector.
    """

    tape: ad.Tape
    root: ad.Node
    param_nodes: list[ad.Node]
    data_bindings: dict = field(default_factory=dict)

    def value(self, theta: np.ndarray) -> float:
        bindings = dict(self.data_bindings)
        bindings.update({p: float(v) for p, v in zip(self.param_nodes, theta)})
        return ad.evaluate(self.tape, bindings, self.root)

    def param_gradient(self, theta: np.ndarray) -> np.ndarray:
        self.value(theta)
        g = ad.gradient(self.tape, self.root, self.param_nodes)
        return g.as_array()


def _target_columns(arch: Architecture, y: np.ndarray) -> np.ndarray:
    """(n, n_targets) float matrix: raw targets, or one-hot rows."""
    y = np.asarray(y)
    if arch.task == "classification":
        labels = y.astype(np.int64)
        if labels.min() < 0 or labels.max() >= arch.n_outputs:
            raise ValueError("class labels out of range for the architecture")
        onehot = np.zeros((labels.shape[0], arch.n_outputs))
        onehot[np.arange(labels.shape[0]), labels] = 1.0
        return onehot
    out = np.atleast_2d(np.asarray(y, dtype=np.float64).T).T
    if out.shape[1] != arch.n_outputs:
        raise ValueError("target width does not match the architecture")
    return out


def erm_loss(model: Perceptron, X: np.ndarray, y: np.ndarray) -> TapeObjective:
    """Mean squared-error or cross-entropy over the batch as a tape root."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    targets = _target_columns(model.arch, y)
    tape = ad.Tape()
    params = make_param_nodes(tape, model.arch)
    per_sample = []
    for j in range(X.shape[0]):
        x_nodes = [tape.constant(v) for v in X[j]]
        t_nodes = [tape.constant(v) for v in targets[j]]
        outputs = build_forward(tape, model.arch, params, x_nodes)
        per_sample.append(build_sample_loss(tape, model.arch, outputs, t_nodes))
    root = tape.sum(per_sample) * (1.0 / X.shape[0])
    return TapeObjective(tape=tape, root=root, param_nodes=params)


# -- numpy-side metrics ------------------------------------------------


def mse(model: Perceptron, X: np.ndarray, y: np.ndarray) -> float:
    pred = np.atleast_2d(model.forward(X))
    targets = _target_columns(model.arch, y)
    return float(np.mean(np.sum((pred - targets) ** 2, axis=1)))


def cross_entropy(model: Perceptron, X: np.ndarray, y: np.ndarray) -> float:
    logits = np.atleast_2d(model.forward(X))
    labels = np.asarray(y, dtype=np.int64)
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(logits - m), axis=1))
    return float(np.mean(lse - logits[np.arange(len(labels)), labels]))


def test_loss(model: Perceptron, X: np.ndarray, y: np.ndarray) -> float:
    if model.arch.task == "classification":
        return cross_entropy(model, X, y)
    return mse(model, X, y)


def accuracy(model: Perceptron, X: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(model.predict(X) == np.asarray(y, dtype=np.int64)))


# -- training ----------------------------------------------------------


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    wall_time_s: float = 0.0

    @property
    def final(self) -> dict:
        return self.history[-1]


class _StepGraph:
    """Per-sample objective graph plus the row indices the loop binds."""

    def __init__(self, model: Perceptron, config: TrainingConfig, penalty):
        arch = model.arch
        tape = ad.Tape()
        self.tape = tape
        self.params = make_param_nodes(tape, arch)
        x_nodes = [tape.input(f"x{i}") for i in range(arch.n_inputs)]
        t_nodes = [tape.input(f"t{i}") for i in range(arch.n_outputs)]
        masks = None
        if config.dropout > 0.0:
            masks = [[tape.input(f"m{li}_{j}") for j in range(w)] for li, w in enumerate(arch.hidden)]
        outputs = build_forward(tape, arch, self.params, x_nodes, dropout_masks=masks)
        loss = build_sample_loss(tape, arch, outputs, t_nodes)

        self.penalty_graph = None
        self.lam_row = None
        root = loss
        if penalty is not None and config.lambda_reg > 0.0:
            self.penalty_graph = penalty.build_sample(tape, arch, self.params)
            lam = tape.input("lam")
            self.lam_row = np.array([lam.index], dtype=np.int64)
            root = loss + lam * self.penalty_graph.node

        self.loss_node = loss
        self.root = root
        self.x_rows = np.array([n.index for n in x_nodes], dtype=np.int64)
        self.t_rows = np.array([n.index for n in t_nodes], dtype=np.int64)
        self.mask_rows = (
            np.array([n.index for row in masks for n in row], dtype=np.int64) if masks else None
        )
        self.param_rows = np.array([n.index for n in self.params], dtype=np.int64)
        self.seed_rows = np.array([root.index], dtype=np.int64)
        self._buffers: dict[int, ad.ColumnBatch] = {}

    def buffer(self, width: int) -> ad.ColumnBatch:
        buf = self._buffers.get(width)
        if buf is None:
            buf = ad.ColumnBatch(self.tape, width)
            self._buffers[width] = buf
        return buf


def train(
    model: Perceptron,
    train_data: tuple[np.ndarray, np.ndarray],
    config: TrainingConfig,
    penalty=None,
) -> TrainResult:
    """Minibatch Adam on mean(loss) + lambda * mean(penalty); mutates ``model``.

    The penalty object (when given) contributes a per-sample subgraph that
    shares the parameter leaves but never sees dropout masks.  When
    ``lambda_warmup`` is set, the penalty weight climbs linearly from zero
    to ``lambda_reg`` over that many epochs, which keeps the early large
    gradients of an unsatisfied penalty from collapsing hidden units
    before the fit has settled.  When ``ema_decay`` is set, the returned
    parameters are a per-step exponential moving average, which damps the
    steady-state oscillation that minibatch noise and the hinge penalty
    induce at a fixed learning rate.  The cosine ``lr_schedule`` anneals
    the step size to zero over the run; the hinge penalty is nonsmooth,
    so a constant step orbits its minimum instead of settling.
    """
    X, y = train_data
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    targets = _target_columns(model.arch, y)
    n = X.shape[0]
    rng = np.random.default_rng(config.seed)

    graph = _StepGraph(model, config, penalty)
    theta = model.params
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    keep = 1.0 - config.dropout
    ema = theta.copy() if config.ema_decay > 0.0 else None
    step = 0
    result = TrainResult()
    started = time.perf_counter()

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_obj = 0.0
        epoch_loss = 0.0
        epoch_pen = 0.0
        if config.lambda_warmup > 0:
            lam = config.lambda_reg * min(1.0, epoch / config.lambda_warmup)
        else:
            lam = config.lambda_reg
        if config.lr_schedule == "cosine":
            lr = config.learning_rate * 0.5 * (1.0 + np.cos(np.pi * epoch / config.epochs))
        else:
            lr = config.learning_rate
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            width = len(idx)
            buf = graph.buffer(width)
            buf.bind(graph.param_rows, theta.reshape(-1, 1))
            buf.bind(graph.x_rows, X[idx].T)
            buf.bind(graph.t_rows, targets[idx].T)
            if graph.mask_rows is not None:
                mask = (rng.random((graph.mask_rows.size, width)) < keep) / keep
                buf.bind(graph.mask_rows, mask)
            if graph.penalty_graph is not None:
                rows, mat = graph.penalty_graph.batch_bindings(X[idx])
                buf.bind(rows, mat)
                buf.bind(graph.lam_row, np.full((1, width), lam))
            buf.forward()
            batch_obj = buf.values[graph.root.index, :]
            obj_mean = float(batch_obj.mean())
            if not np.isfinite(obj_mean):
                raise TrainingDivergedError(
                    f"non-finite objective at epoch {epoch}, batch starting {lo}"
                )
            epoch_obj += obj_mean * width
            epoch_loss += float(buf.values[graph.loss_node.index, :].sum())
            if graph.penalty_graph is not None:
                epoch_pen += float(buf.values[graph.penalty_graph.node.index, :].sum())

            adj = buf.backward(graph.seed_rows, 1.0 / width)
            grad = adj[graph.param_rows, :].sum(axis=1)
            if config.weight_decay > 0.0:
                grad += config.weight_decay * theta
            step += 1
            m = config.adam_beta1 * m + (1.0 - config.adam_beta1) * grad
            v = config.adam_beta2 * v + (1.0 - config.adam_beta2) * grad * grad
            m_hat = m / (1.0 - config.adam_beta1**step)
            v_hat = v / (1.0 - config.adam_beta2**step)
            theta -= lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
            if ema is not None:
                ema += (1.0 - config.ema_decay) * (theta - ema)

        result.history.append(
            {
                "epoch": epoch,
                "objective": epoch_obj / n,
                "erm": epoch_loss / n,
                "penalty": epoch_pen / n,
            }
        )
    if ema is not None:
        theta[:] = ema
    result.wall_time_s = time.perf_counter() - started
    return result


# -- checkpoints -------------------------------------------------------


def save_checkpoint(model: Perceptron, path) -> None:
    """JSON checkpoint; parameters stored as hex floats for exact round-trips."""
    blob = {
        "format": CHECKPOINT_FORMAT,
        "architecture": {
            "n_inputs": model.arch.n_inputs,
            "hidden": list(model.arch.hidden),
            "n_outputs": model.arch.n_outputs,
            "task": model.arch.task,
            "activation": model.arch.activation,
        },
        "seed": model.seed,
        "params": [float(p).hex() for p in model.params],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(blob, fh, indent=1)
        fh.write("\n")


def load_checkpoint(path) -> Perceptron:
    with open(path, encoding="utf-8") as fh:
        blob = json.load(fh)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format: {blob.get('format')!r}")
    a = blob["architecture"]
    arch = Architecture(
        a["n_inputs"], tuple(a["hidden"]), a["n_outputs"], a["task"],
        activation=a.get("activation", "relu"),
    )
    model = Perceptron(arch, seed=blob["seed"])
    params = np.array([float.fromhex(h) for h in blob["params"]])
    if params.shape != model.params.shape:
        raise ValueError("checkpoint parameter count does not match architecture")
    model.params = params
    return model
