"""Small classifiers, Adam with decoupled weight decay, and checkpoint files."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ShapeError
from .tensor import DTYPE, Tape

ARCHITECTURES = ("small-conv", "small-mlp")
LABEL_SUM_TOL = 1e-9
PREDICT_CHUNK = 500


@dataclass
class ModelParams:
    arch: str
    params: dict  # name -> float64 array, insertion order is the canonical order
    input_shape: tuple
    n_classes: int
    seed: int = 0

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.params.items()},
                           tuple(self.input_shape), self.n_classes, self.seed)


def param_shapes(arch, input_shape, n_classes):
    """Ordered (name, shape) list for an architecture."""
    H, W, C = input_shape
    if arch == "small-conv":
        return [
            ("conv1_w", (3, 3, C, 16)), ("conv1_b", (16,)),
            ("conv2_w", (3, 3, 16, 32)), ("conv2_b", (32,)),
            ("fc1_w", ((H // 4) * (W // 4) * 32, 128)), ("fc1_b", (128,)),
            ("fc2_w", (128, n_classes)), ("fc2_b", (n_classes,)),
        ]
    if arch == "small-mlp":
        return [
            ("fc1_w", (H * W * C, 256)), ("fc1_b", (256,)),
            ("fc2_w", (256, 256)), ("fc2_b", (256,)),
            ("fc3_w", (256, n_classes)), ("fc3_b", (n_classes,)),
        ]
    raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")


def init_params(arch, input_shape, n_classes, seed=0) -> ModelParams:
    """He-uniform weights, zero biases."""
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    input_shape = tuple(int(d) for d in input_shape)
    if arch == "small-conv" and (input_shape[0] % 4 or input_shape[1] % 4):
        raise ShapeError("small-conv", input_shape, detail="height and width must be multiples of 4")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(arch, input_shape, n_classes):
        if name.endswith("_b"):
            params[name] = np.zeros(shape, dtype=DTYPE)
        else:
            fan_in = int(np.prod(shape[:-1]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(arch, params, input_shape, int(n_classes), int(seed))


def _build(tape, arch, pv, x):
    f = tape.apply
    B = x.shape[0]
    if arch == "small-conv":
        h = f("relu", f("add_bias", f("conv2d", x, pv["conv1_w"]), pv["conv1_b"]))
        h = f("maxpool2", h)
        h = f("relu", f("add_bias", f("conv2d", h, pv["conv2_w"]), pv["conv2_b"]))
        h = f("maxpool2", h)
        h = f("reshape", h, shape=(B, -1))
        h = f("relu", f("add_bias", f("matmul", h, pv["fc1_w"]), pv["fc1_b"]))
        return f("add_bias", f("matmul", h, pv["fc2_w"]), pv["fc2_b"])
    h = f("reshape", x, shape=(B, -1))
    h = f("relu", f("add_bias", f("matmul", h, pv["fc1_w"]), pv["fc1_b"]))
    h = f("relu", f("add_bias", f("matmul", h, pv["fc2_w"]), pv["fc2_b"]))
    return f("add_bias", f("matmul", h, pv["fc3_w"]), pv["fc3_b"])


def _check_batch(model, batch):
    batch = np.asarray(batch, dtype=DTYPE)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != tuple(model.input_shape):
        raise ShapeError("predict", batch.shape, ("B",) + tuple(model.input_shape))
    return batch


def _check_labels(labels, model, n):
    labels = np.asarray(labels, dtype=DTYPE)
    if labels.shape != (n, model.n_classes):
        raise ShapeError("labels", labels.shape, (n, model.n_classes))
    sums = labels.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > LABEL_SUM_TOL) or np.any(labels < 0):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise ValueError(f"label row {bad} is not a probability vector (sum={sums[bad]!r})")
    return labels


def forward_graph(model: ModelParams, batch, wrt="params"):
    """Record a forward pass; returns (tape, param vars, input var, logits var).

    ``wrt`` picks which leaves get gradients: "params", "input" or "both".
    """
    tape = Tape()
    pv = {k: tape.leaf(v, requires_grad=wrt != "input") for k, v in model.params.items()}
    x = tape.leaf(batch, requires_grad=wrt != "params")
    return tape, pv, x, _build(tape, model.arch, pv, x)


def predict(model: ModelParams, batch) -> np.ndarray:
    batch = _check_batch(model, batch)
    out = []
    for i in range(0, len(batch), PREDICT_CHUNK):
        _, _, _, logits = forward_graph(model, batch[i:i + PREDICT_CHUNK])
        out.append(logits.value)
    if not out:
        return np.zeros((0, model.n_classes), dtype=DTYPE)
    return np.concatenate(out)


def accuracy(model: ModelParams, images, labels):
    """Fraction of correct predictions as (correct, total)."""
    pred = predict(model, images).argmax(axis=1)
    return int((pred == np.asarray(labels)).sum()), len(labels)


def loss_and_grad(model: ModelParams, batch, labels):
    """Mean soft-label cross-entropy and its gradient per parameter."""
    batch = _check_batch(model, batch)
    labels = _check_labels(labels, model, len(batch))
    tape, pv, _, logits = forward_graph(model, batch)
    loss = tape.apply("softmax_ce", logits, labels=labels)
    grads = tape.backward(loss)
    return float(loss.value), {k: grads[v] for k, v in pv.items()}


def input_gradient(model: ModelParams, batch, labels=None, logit_weights=None):
    """Gradient with respect to the input images.

    With ``labels`` the objective is the mean cross-entropy; with
    ``logit_weights`` it is ``sum(logits * logit_weights)``. Returns
    ``(objective, grad, logits)``.
    """
    batch = _check_batch(model, batch)
    tape, _, x, logits = forward_graph(model, batch, wrt="input")
    if labels is not None:
        labels = _check_labels(labels, model, len(batch))
        obj = tape.apply("softmax_ce", logits, labels=labels)
    else:
        obj = tape.apply("dot_const", logits, weights=np.asarray(logit_weights, dtype=DTYPE))
    grads = tape.backward(obj)
    return float(obj.value), grads[x], logits.value


def combined_loss_and_grad(model: ModelParams, parts):
    """Sum of per-part mean cross-entropies, e.g. loss1 + loss2 of one training step.

    ``parts`` is a sequence of (batch, labels); empty parts are skipped.
    Returns ([loss per part], grads).
    """
    tape = Tape()
    pv = {k: tape.leaf(v) for k, v in model.params.items()}
    total = None
    losses = []
    for batch, labels in parts:
        if len(batch) == 0:
            losses.append(0.0)
            continue
        batch = _check_batch(model, batch)
        labels = _check_labels(labels, model, len(batch))
        logits = _build(tape, model.arch, pv, tape.leaf(batch, requires_grad=False))
        loss = tape.apply("softmax_ce", logits, labels=labels)
        losses.append(float(loss.value))
        total = loss if total is None else tape.apply("add", total, loss)
    if total is None:
        return losses, {k: np.zeros_like(v) for k, v in model.params.items()}
    grads = tape.backward(total)
    return losses, {k: grads[v] for k, v in pv.items()}


# --------------------------------------------------------------------------
# optimizer

@dataclass
class OptimState:
    lr: float = 0.002
    weight_decay: float = 1e-4
    decay_epochs: tuple = (10, 20, 25)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    epoch: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def current_lr(self) -> float:
        crossed = sum(1 for e in self.decay_epochs if self.epoch >= e)
        return self.lr / (10 ** crossed)


def adam_step(model: ModelParams, grads: dict, state: OptimState) -> ModelParams:
    """One Adam update with decoupled weight decay; mutates ``state``."""
    state.step += 1
    t = state.step
    lr = state.current_lr()
    b1, b2 = state.beta1, state.beta2
    new = {}
    for name, p in model.params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError("adam_step", p.shape, g.shape)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new[name] = p * (1 - lr * state.weight_decay) - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return ModelParams(model.arch, new, model.input_shape, model.n_classes, model.seed)


# --------------------------------------------------------------------------
# checkpoints: magic, version byte, uint32 LE manifest length, JSON manifest, LE float64 arrays

MAGIC = b"MTLATCKP"
VERSION = 1


def save_checkpoint(model: ModelParams, path) -> None:
    manifest = {
        "architecture": model.arch,
        "input_shape": list(model.input_shape),
        "n_classes": model.n_classes,
        "seed": model.seed,
        "params": [{"name": k, "shape": list(v.shape)} for k, v in model.params.items()],
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([VERSION]))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for v in model.params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    head = len(MAGIC) + 1 + 4
    if len(raw) < head:
        raise CheckpointError(f"{path}: truncated header")
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes {raw[:len(MAGIC)]!r}")
    version = raw[len(MAGIC)]
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    (n,) = struct.unpack("<I", raw[len(MAGIC) + 1:head])
    if len(raw) < head + n:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[head:head + n].decode("utf-8"))
        arch = manifest["architecture"]
        input_shape = tuple(manifest["input_shape"])
        n_classes = int(manifest["n_classes"])
        entries = [(e["name"], tuple(e["shape"])) for e in manifest["params"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest: {exc}") from None
    try:
        expected = [(k, tuple(s)) for k, s in param_shapes(arch, input_shape, n_classes)]
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    if entries != expected:
        raise CheckpointError(f"{path}: shape manifest does not match architecture {arch}")
    offset = head + n
    params = {}
    for name, shape in entries:
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated data for {name}")
        params[name] = np.frombuffer(raw[offset:end], dtype="<f8").astype(DTYPE).reshape(shape)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return ModelParams(arch, params, input_shape, n_classes, int(manifest.get("seed", 0)))
