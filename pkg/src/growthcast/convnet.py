"""Small ConvNet trained from scratch on three-channel voxel patches.

Architecture (valid convolutions, NHWC internally)::

    3x17x17 -> conv3x3(32) -> relu -> maxpool2 -> conv3x3(64) -> relu -> maxpool2
            -> fc(128) -> relu -> dropout(0.5) -> fc(2) -> softmax

The two softmax outputs are the deep features handed to the SVM stage.
Dropout follows the "scale at inference" convention: training zeroes units
without rescaling, inference multiplies activations by the keep probability.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

PARAM_ORDER = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b")
DECAYED = ("conv1_w", "conv2_w", "fc1_w", "fc2_w")
WEIGHT_MAGIC = b"GCNET\x00"
WEIGHT_VERSION = 1


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class NetSpec:
    in_channels: int = 3
    patch: int = 17
    kernel: int = 3
    conv1: int = 32
    conv2: int = 64
    hidden: int = 128
    n_out: int = 2
    dropout: float = 0.5
    input_scale: float = 1.0 / 255.0

    def __post_init__(self):
        if self.n_out != 2:
            raise ValueError("the network must expose exactly two output nodes")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.flat_size < 1:
            raise ValueError(f"patch size {self.patch} too small for the layer stack")

    @property
    def _sizes(self) -> Tuple[int, int, int, int]:
        c1 = self.patch - self.kernel + 1
        p1 = c1 // 2
        c2 = p1 - self.kernel + 1
        p2 = c2 // 2
        return c1, p1, c2, p2

    @property
    def flat_size(self) -> int:
        return self._sizes[3] ** 2 * self.conv2

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        k = self.kernel
        return {
            "conv1_w": (k, k, self.in_channels, self.conv1),
            "conv1_b": (self.conv1,),
            "conv2_w": (k, k, self.conv1, self.conv2),
            "conv2_b": (self.conv2,),
            "fc1_w": (self.flat_size, self.hidden),
            "fc1_b": (self.hidden,),
            "fc2_w": (self.hidden, self.n_out),
            "fc2_b": (self.n_out,),
        }

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).digest()


@dataclass(frozen=True)
class TrainHyper:
    epochs: int = 30
    base_lr: float = 0.001
    lr_step: int = 10
    lr_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch: int = 256
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.epochs, self.batch, self.lr_step) < 1:
            raise ValueError("epochs, batch and lr_step must be positive")
        if not (self.base_lr > 0 and self.lr_factor > 0 and self.momentum >= 0 and self.weight_decay >= 0):
            raise ValueError("invalid optimizer hyperparameters")
        if not 0 < self.val_fraction < 0.5:
            raise ValueError("val_fraction must lie in (0, 0.5)")


@dataclass
class NetWeights:
    params: Dict[str, np.ndarray]
    spec: NetSpec = field(default_factory=NetSpec)
    epoch: int = -1

    def __post_init__(self):
        shapes = self.spec.shapes()
        for name in PARAM_ORDER:
            if name not in self.params or self.params[name].shape != shapes[name]:
                raise ValueError(f"parameter {name} missing or misshapen")
            if not np.all(np.isfinite(self.params[name])):
                raise ValueError(f"parameter {name} is not finite")

    @property
    def dtype(self):
        return self.params["conv1_w"].dtype

    def copy(self) -> "NetWeights":
        return NetWeights({k: v.copy() for k, v in self.params.items()}, self.spec, self.epoch)

    def astype(self, dtype) -> "NetWeights":
        return NetWeights({k: v.astype(dtype) for k, v in self.params.items()}, self.spec, self.epoch)


def init_weights(spec: NetSpec = NetSpec(), rng: Optional[np.random.Generator] = None,
                 dtype=np.float32) -> NetWeights:
    """Gaussian kernels with variance 2 / fan_in, zero biases."""
    rng = np.random.default_rng(0) if rng is None else rng
    params = {}
    for name, shape in spec.shapes().items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[:-1]))
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return NetWeights(params, spec)


# --------------------------------------------------------------------------
# layers


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    win = sliding_window_view(x, (k, k), axis=(1, 2))  # B, H', W', C, k, k
    b, h, w, c = win.shape[:4]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, k * k * c)


def _conv_forward(x, w, b):
    k = w.shape[0]
    cols = _im2col(x, k)
    bsz, h, wd = x.shape[0], x.shape[1] - k + 1, x.shape[2] - k + 1
    out = (cols @ w.reshape(-1, w.shape[-1]) + b).reshape(bsz, h, wd, -1)
    return out, cols


def _conv_backward(dout, cols, x_shape, w, need_dx=True):
    k, cout = w.shape[0], w.shape[-1]
    d2 = dout.reshape(-1, cout)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    bsz, h, wd = dout.shape[:3]
    dcols = (d2 @ w.reshape(-1, cout).T).reshape(bsz, h, wd, k, k, x_shape[-1])
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, i:i + h, j:j + wd, :] += dcols[:, :, :, i, j, :]
    return dx, dw, db


def _pool_forward(x):
    """2x2/2 max pooling; odd trailing rows/columns are dropped."""
    b, h, w, c = x.shape
    hp, wp = h // 2, w // 2
    win = (x[:, :2 * hp, :2 * wp, :].reshape(b, hp, 2, wp, 2, c)
           .transpose(0, 1, 3, 5, 2, 4).reshape(b, hp, wp, c, 4))
    arg = win.argmax(axis=-1)  # first maximum in scan order
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _pool_backward(dout, arg, x_shape):
    b, h, w, c = x_shape
    hp, wp = h // 2, w // 2
    dwin = np.zeros((b, hp, wp, c, 4), dtype=dout.dtype)
    np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=-1)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, :2 * hp, :2 * wp, :] = (dwin.reshape(b, hp, wp, c, 2, 2)
                                  .transpose(0, 1, 4, 2, 5, 3).reshape(b, 2 * hp, 2 * wp, c))
    return dx


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _as_batch(x, spec: NetSpec, dtype) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    expected = (spec.in_channels, spec.patch, spec.patch)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ValueError(f"expected patches of shape (n, {expected}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("patches contain non-finite values")
    return (x.transpose(0, 2, 3, 1) * spec.input_scale).astype(dtype, copy=False)


def _dropout_mask(rng, shape, keep, dtype):
    return (rng.random(shape) < keep).astype(dtype)


def _forward(weights: NetWeights, x, mode: str, rng=None, dropout_mask=None):
    if mode not in ("train", "infer"):
        raise ValueError("mode must be 'train' or 'infer'")
    p, spec = weights.params, weights.spec
    keep = 1.0 - spec.dropout
    a0 = _as_batch(x, spec, weights.dtype)
    z1, cols1 = _conv_forward(a0, p["conv1_w"], p["conv1_b"])
    r1 = np.maximum(z1, 0)
    q1, arg1 = _pool_forward(r1)
    z2, cols2 = _conv_forward(q1, p["conv2_w"], p["conv2_b"])
    r2 = np.maximum(z2, 0)
    q2, arg2 = _pool_forward(r2)
    flat = q2.reshape(len(q2), -1)
    h = np.maximum(flat @ p["fc1_w"] + p["fc1_b"], 0)
    if mode == "train" and spec.dropout > 0:
        if dropout_mask is None:
            if rng is None:
                raise ValueError("training-mode forward needs an rng for dropout")
            dropout_mask = _dropout_mask(rng, h.shape, keep, h.dtype)
        hd = h * dropout_mask
    else:
        dropout_mask = None
        hd = h * keep if spec.dropout > 0 else h
    logits = hd @ p["fc2_w"] + p["fc2_b"]
    cache = dict(a0=a0, z1=z1, cols1=cols1, r1=r1, arg1=arg1, q1=q1, z2=z2, cols2=cols2,
                 r2=r2, arg2=arg2, q2=q2, flat=flat, h=h, hd=hd, mask=dropout_mask, mode=mode)
    return logits, cache


def logits(weights: NetWeights, x, mode: str = "infer", rng=None, dropout_mask=None) -> np.ndarray:
    return _forward(weights, x, mode, rng, dropout_mask)[0]


def forward(weights: NetWeights, x, mode: str = "infer", rng=None, dropout_mask=None) -> np.ndarray:
    """Softmax probabilities, shape ``(n, 2)`` (or ``(2,)`` for a single patch)."""
    single = np.ndim(x) == 3
    probs = _softmax(_forward(weights, x, mode, rng, dropout_mask)[0])
    return probs[0] if single else probs


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    eps = np.finfo(probs.dtype).tiny
    return float(-np.mean(np.log(np.maximum(probs[np.arange(len(labels)), labels], eps))))


def loss_and_grad(weights: NetWeights, x, labels, weight_decay: float = 0.0, mode: str = "train",
                  rng=None, dropout_mask=None) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean cross-entropy plus ``weight_decay / 2 * ||W||^2`` over kernels, and its gradient."""
    labels = np.asarray(labels, dtype=np.int64)
    p, spec = weights.params, weights.spec
    z, c = _forward(weights, x, mode, rng, dropout_mask)
    n = len(labels)
    if n == 0 or n != len(z):
        raise ValueError("labels must match a non-empty batch")
    probs = _softmax(z)
    loss = cross_entropy(probs, labels)
    if weight_decay:
        loss += 0.5 * weight_decay * sum(float(np.sum(p[k].astype(np.float64) ** 2)) for k in DECAYED)
    if not np.isfinite(loss):
        raise TrainingDiverged("non-finite loss")

    g = {}
    dz = probs.copy()
    dz[np.arange(n), labels] -= 1.0
    dz /= n
    g["fc2_w"] = c["hd"].T @ dz
    g["fc2_b"] = dz.sum(axis=0)
    dhd = dz @ p["fc2_w"].T
    if c["mask"] is not None:
        dh = dhd * c["mask"]
    elif spec.dropout > 0:
        dh = dhd * (1.0 - spec.dropout)
    else:
        dh = dhd
    dh = dh * (c["h"] > 0)
    g["fc1_w"] = c["flat"].T @ dh
    g["fc1_b"] = dh.sum(axis=0)
    dflat = dh @ p["fc1_w"].T
    dq2 = dflat.reshape(c["q2"].shape)
    dr2 = _pool_backward(dq2, c["arg2"], c["r2"].shape)
    dz2 = dr2 * (c["z2"] > 0)
    dq1, g["conv2_w"], g["conv2_b"] = _conv_backward(dz2, c["cols2"], c["q1"].shape, p["conv2_w"])
    dr1 = _pool_backward(dq1, c["arg1"], c["r1"].shape)
    dz1 = dr1 * (c["z1"] > 0)
    _, g["conv1_w"], g["conv1_b"] = _conv_backward(dz1, c["cols1"], c["a0"].shape, p["conv1_w"],
                                                   need_dx=False)
    if weight_decay:
        for k in DECAYED:
            g[k] = g[k] + weight_decay * p[k]
    return loss, {k: g[k].astype(p[k].dtype, copy=False) for k in PARAM_ORDER}


def backward(weights: NetWeights, batch, labels, weight_decay: float = 0.0, **kw) -> Dict[str, np.ndarray]:
    return loss_and_grad(weights, batch, labels, weight_decay, **kw)[1]


def predict_proba(weights: NetWeights, x, batch: int = 1024) -> np.ndarray:
    """Inference-mode probabilities for many patches, evaluated in fixed-size chunks."""
    x = np.asarray(x)
    out = [forward(weights, x[i:i + batch]) for i in range(0, len(x), batch)]
    return np.concatenate(out) if out else np.zeros((0, 2), dtype=weights.dtype)


def deep_features(weights: NetWeights, patch) -> np.ndarray:
    """The two output-node probabilities in inference mode."""
    return forward(weights, patch, mode="infer")


# --------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_acc: float


@dataclass
class TrainHistory:
    records: List[EpochRecord] = field(default_factory=list)
    initial_train_loss: float = float("nan")
    initial_val_loss: float = float("nan")
    best_epoch: int = -1
    n_train: int = 0
    n_val: int = 0

    @property
    def val_losses(self) -> List[float]:
        return [r.val_loss for r in self.records]


def learning_rate(epoch: int, hyper: TrainHyper) -> float:
    return hyper.base_lr * hyper.lr_factor ** (epoch // hyper.lr_step)


def stratified_split(labels: np.ndarray, fraction: float, rng) -> Tuple[np.ndarray, np.ndarray]:
    train, val = [], []
    for cls in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        n_val = max(1, int(round(fraction * idx.size)))
        val.append(idx[:n_val])
        train.append(idx[n_val:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def evaluate(weights: NetWeights, x, labels, batch: int = 1024) -> Tuple[float, float]:
    probs = predict_proba(weights, x, batch)
    labels = np.asarray(labels, dtype=np.int64)
    return cross_entropy(probs, labels), float(np.mean(probs.argmax(axis=1) == labels))


def train(x, labels, hyper: TrainHyper = TrainHyper(), spec: NetSpec = NetSpec(),
          rng: Optional[np.random.Generator] = None) -> Tuple[NetWeights, TrainHistory]:
    """SGD with momentum and weight decay; returns the lowest-validation-loss epoch snapshot."""
    x = np.asarray(x, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(x) < 2 * hyper.batch:
        raise ValueError(f"need at least {2 * hyper.batch} samples, got {len(x)}")
    if set(np.unique(labels)) != {0, 1}:
        raise ValueError("both classes must be present")
    rng = np.random.default_rng(hyper.seed) if rng is None else rng
    tr, va = stratified_split(labels, hyper.val_fraction, rng)
    weights = init_weights(spec, rng)
    velocity = {k: np.zeros_like(v) for k, v in weights.params.items()}
    hist = TrainHistory(n_train=len(tr), n_val=len(va))
    hist.initial_train_loss, _ = evaluate(weights, x[tr], labels[tr])
    hist.initial_val_loss, _ = evaluate(weights, x[va], labels[va])
    best, best_loss = None, np.inf

    for epoch in range(hyper.epochs):
        lr = learning_rate(epoch, hyper)
        order = rng.permutation(tr)
        total = 0.0
        for start in range(0, len(order), hyper.batch):
            idx = np.sort(order[start:start + hyper.batch])
            try:
                loss, grads = loss_and_grad(weights, x[idx], labels[idx], hyper.weight_decay,
                                            mode="train", rng=rng)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"{exc} at epoch {epoch}, batch offset {start}, lr {lr:g}") from None
            total += loss * len(idx)
            for k, grad in grads.items():
                v = velocity[k]
                v *= hyper.momentum
                v += lr * grad
                weights.params[k] -= v
        val_loss, val_acc = evaluate(weights, x[va], labels[va])
        if not np.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        rec = EpochRecord(epoch, lr, total / len(tr), val_loss, val_acc)
        hist.records.append(rec)
        log.debug("epoch %d lr %.0e train %.4f val %.4f acc %.4f", epoch, lr, rec.train_loss,
                  val_loss, val_acc)
        if val_loss < best_loss:
            best_loss = val_loss
            best = weights.copy()
            best.epoch = epoch
    hist.best_epoch = best.epoch
    return best, hist


# --------------------------------------------------------------------------
# weight file: magic, version, spec digest, epoch, tensors (name, shape, <f4 payload)


def save_weights(weights: NetWeights, path) -> str:
    """Write the versioned weight container; returns its sha256."""
    buf = bytearray(WEIGHT_MAGIC)
    buf += struct.pack("<H", WEIGHT_VERSION)
    spec_json = json.dumps(asdict(weights.spec), sort_keys=True).encode()
    buf += struct.pack("<I", len(spec_json)) + spec_json
    buf += weights.spec.digest()
    buf += struct.pack("<iH", weights.epoch, len(PARAM_ORDER))
    for name in PARAM_ORDER:
        arr = np.ascontiguousarray(weights.params[name], dtype="<f4")
        nb = name.encode()
        buf += struct.pack("<B", len(nb)) + nb + struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()
    data = bytes(buf)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_weights(path) -> NetWeights:
    try:
        return _parse_weights(Path(path).read_bytes(), path)
    except struct.error as exc:
        raise ValueError(f"{path}: truncated weight file ({exc})") from None


def _parse_weights(data: bytes, path) -> NetWeights:
    if not data.startswith(WEIGHT_MAGIC):
        raise ValueError(f"{path}: not a weight file")
    off = len(WEIGHT_MAGIC)
    (version,) = struct.unpack_from("<H", data, off)
    off += 2
    if version != WEIGHT_VERSION:
        raise ValueError(f"{path}: unsupported weight file version {version}")
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    spec = NetSpec(**json.loads(data[off:off + n]))
    off += n
    if data[off:off + 32] != spec.digest():
        raise ValueError(f"{path}: spec digest mismatch")
    off += 32
    epoch, count = struct.unpack_from("<iH", data, off)
    off += 6
    params = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<B", data, off)
        off += 1
        name = data[off:off + ln].decode()
        off += ln
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) * 4
        params[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=off).reshape(shape).astype(np.float32)
        off += size
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in weight file")
    return NetWeights(params, spec, epoch)
