"""Toy completion model, toy classifier, their training loops and weight files.

Both networks share a PointNet-style encoder: a per-point MLP followed by a max
over points, which makes the global feature invariant to point order. The
completion decoder is a fully connected MLP emitting ``n_out`` points.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import EmptyDataset, InvalidParam, ShapeMismatch, VersionMismatch
from .geometry import as_points

logger = logging.getLogger(__name__)

WEIGHT_MAGIC = b"PCAW"
WEIGHT_VERSION = 1


def _init_layer(rng, fan_in, fan_out):
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
    return ad.Tensor(w, requires_grad=True), ad.Tensor(np.zeros(fan_out), requires_grad=True)


def _mlp(x, layers, final_relu):
    for i, (w, b) in enumerate(layers):
        x = ad.add(ad.matmul(x, w), b)
        if final_relu or i < len(layers) - 1:
            x = ad.relu(x)
    return x


def _as_input(cloud):
    if isinstance(cloud, ad.Tensor):
        x = cloud
    else:
        x = ad.Tensor(as_points(cloud) if not isinstance(cloud, np.ndarray) else cloud)
    if x.ndim not in (2, 3) or x.shape[-1] != 3 or x.shape[-2] < 1:
        raise ShapeMismatch(f"expected (m, 3) or (B, m, 3) points, got {x.shape}")
    return x


class _Network:
    kind = "network"

    def __init__(self, widths, seed):
        self.widths = dict(widths)
        self.seed = int(seed)
        self.trained = False
        self.layers = {}

    def parameters(self):
        return [t for name in sorted(self.layers) for t in self.layers[name]]

    def named_arrays(self):
        out = []
        for name in sorted(self.layers):
            w, b = self.layers[name]
            out.append((f"{name}.weight", w.values))
            out.append((f"{name}.bias", b.values))
        return out

    def _enc_layers(self):
        return [self.layers[k] for k in sorted(self.layers) if k.startswith("enc")]

    def encode(self, cloud):
        """Global feature of a cloud; shape (F,) or (B, F) for batched input."""
        x = _as_input(cloud)
        return ad.max_over_points(_mlp(x, self._enc_layers(), final_relu=True))

    def descriptor(self):
        return {"kind": self.kind, "widths": self.widths, "seed": self.seed, "trained": self.trained}


class CompletionModel(_Network):
    """``complete(x) = decode(encode(x))`` with a shared-MLP encoder and FC decoder."""

    kind = "completion"

    def __init__(self, n_out=1024, enc_hidden=64, feat=128, dec_hidden=256, seed=0):
        super().__init__(
            {"n_out": n_out, "enc_hidden": enc_hidden, "feat": feat, "dec_hidden": dec_hidden},
            seed,
        )
        rng = np.random.default_rng(seed)
        self.n_out = n_out
        self.layers = {
            "enc0": _init_layer(rng, 3, enc_hidden),
            "enc1": _init_layer(rng, enc_hidden, feat),
            "dec0": _init_layer(rng, feat, dec_hidden),
            "dec1": _init_layer(rng, dec_hidden, 3 * n_out),
        }
        # start the decoder near a small random cloud instead of the origin
        self.layers["dec1"][0].values *= 0.1
        self.layers["dec1"][1].values[:] = rng.uniform(-0.5, 0.5, size=3 * n_out)

    def decode(self, feature):
        h = _mlp(feature, [self.layers["dec0"], self.layers["dec1"]], final_relu=False)
        lead = feature.shape[:-1]
        return ad.reshape(h, (*lead, self.n_out, 3))

    def complete(self, cloud):
        return self.decode(self.encode(cloud))

    def __call__(self, cloud):
        return self.complete(cloud)

    def predict(self, cloud) -> np.ndarray:
        """Completion as a plain (n_out, 3) array, without recording a graph."""
        with ad.no_grad():
            return self.complete(cloud).values


class Classifier(_Network):
    kind = "classifier"

    def __init__(self, n_classes=4, enc_hidden=64, feat=128, head_hidden=64, seed=0, class_names=None):
        super().__init__(
            {"n_classes": n_classes, "enc_hidden": enc_hidden, "feat": feat, "head_hidden": head_hidden},
            seed,
        )
        rng = np.random.default_rng(seed)
        self.n_classes = n_classes
        self.class_names = list(class_names) if class_names else [str(i) for i in range(n_classes)]
        self.layers = {
            "enc0": _init_layer(rng, 3, enc_hidden),
            "enc1": _init_layer(rng, enc_hidden, feat),
            "head0": _init_layer(rng, feat, head_hidden),
            "head1": _init_layer(rng, head_hidden, n_classes),
        }

    def logits(self, cloud):
        return _mlp(self.encode(cloud), [self.layers["head0"], self.layers["head1"]], final_relu=False)

    __call__ = logits

    def predict(self, cloud) -> int:
        with ad.no_grad():
            return int(np.argmax(self.logits(cloud).values, axis=-1))

    def predict_name(self, cloud) -> str:
        return self.class_names[self.predict(cloud)]

    def descriptor(self):
        d = super().descriptor()
        d["class_names"] = self.class_names
        return d


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise InvalidParam(f"invalid training config {self}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1 and self.adam_eps > 0):
            raise InvalidParam(f"invalid Adam parameters {self}")


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1 - self.beta1) * p.grad
            v *= self.beta2
            v += (1 - self.beta2) * p.grad**2
            p.values -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    history: list = field(default_factory=list)

    def to_csv(self):
        lines = ["epoch,loss"] + [f"{i},{v!r}" for i, v in enumerate(self.history)]
        return "\n".join(lines) + "\n"


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[s : s + batch_size] for s in range(0, n, batch_size)]


def train_completion(model: CompletionModel, inputs, targets, cfg: TrainConfig, log_every=10) -> TrainResult:
    """Fit the completion model with batched CD_P loss and Adam.

    ``inputs`` is (N, m, 3) partial clouds, ``targets`` (N, n, 3) complete
    clouds. The recorded history holds the mean training loss per epoch.
    """
    cfg.validate()
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.shape[0] == 0:
        raise EmptyDataset("no training samples")
    if x.shape[0] != y.shape[0]:
        raise ShapeMismatch("inputs and targets differ in length")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    result = TrainResult()
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in _batches(x.shape[0], cfg.batch_size, rng):
            opt.zero_grad()
            out = model.complete(ad.Tensor(x[idx]))
            loss = ad.differentiable_chamfer(out, ad.Tensor(y[idx]))
            ad.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        result.history.append(total / x.shape[0])
        if log_every and epoch % log_every == 0:
            logger.info("completion epoch %d loss %.5f", epoch, result.history[-1])
    if cfg.epochs > 0:
        model.trained = True
    return result


def train_classifier(model: Classifier, inputs, labels, cfg: TrainConfig, log_every=10) -> TrainResult:
    """Fit the classifier with softmax cross-entropy and Adam.

    ``inputs`` may mix cloud sizes; clouds are grouped into same-size batches.
    """
    cfg.validate()
    if len(inputs) == 0:
        raise EmptyDataset("no training samples")
    groups = {}
    for i, c in enumerate(inputs):
        groups.setdefault(np.asarray(c).shape[0], []).append(i)
    labels = np.asarray(labels, dtype=np.intp)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    result = TrainResult()
    for epoch in range(cfg.epochs):
        batches = []
        for size in sorted(groups):
            ids = np.asarray(groups[size])
            batches.extend(ids[b] for b in _batches(len(ids), cfg.batch_size, rng))
        total = 0.0
        for bi in rng.permutation(len(batches)):
            idx = batches[bi]
            opt.zero_grad()
            xb = ad.Tensor(np.stack([np.asarray(inputs[i]) for i in idx]))
            loss = batch_cross_entropy(model.logits(xb), labels[idx])
            ad.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        result.history.append(total / len(inputs))
        if log_every and epoch % log_every == 0:
            logger.info("classifier epoch %d loss %.5f", epoch, result.history[-1])
    if cfg.epochs > 0:
        model.trained = True
    return result


def batch_cross_entropy(logits, labels):
    """Mean cross-entropy of (B, C) logits against integer labels."""
    onehot = np.zeros(logits.shape)
    onehot[np.arange(logits.shape[0]), labels] = 1.0
    return ad.mul(ad.sum(ad.mul(ad.log_softmax(logits), onehot)), -1.0 / logits.shape[0])


def accuracy(model: Classifier, clouds, labels) -> float:
    preds = [model.predict(c) for c in clouds]
    return float(np.mean(np.asarray(preds) == np.asarray(labels)))


# --------------------------------------------------------------------------
# weight files
#
# layout (little endian):
#   4 bytes  magic "PCAW"
#   uint32   format version
#   uint32   header length H
#   H bytes  UTF-8 JSON: {"descriptor": {...}, "arrays": [[name, [shape...]], ...]}
#   float64 payload of every array in header order, C order


def save_weights(model, path):
    arrays = model.named_arrays()
    header = json.dumps(
        {"descriptor": model.descriptor(), "arrays": [[n, list(a.shape)] for n, a in arrays]},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<II", WEIGHT_VERSION, len(header)))
        fh.write(header)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_weights(path):
    """Rebuild a CompletionModel or Classifier from a weight file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != WEIGHT_MAGIC:
        raise VersionMismatch(f"{path}: not a pointca weight file")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != WEIGHT_VERSION:
        raise VersionMismatch(f"{path}: weight format version {version}, expected {WEIGHT_VERSION}")
    header = json.loads(raw[12 : 12 + hlen].decode())
    desc = header["descriptor"]
    if desc["kind"] == "completion":
        model = CompletionModel(seed=desc["seed"], **desc["widths"])
    elif desc["kind"] == "classifier":
        model = Classifier(seed=desc["seed"], class_names=desc.get("class_names"), **desc["widths"])
    else:
        raise VersionMismatch(f"{path}: unknown model kind {desc['kind']!r}")
    offset = 12 + hlen
    params = dict(model.named_arrays())
    for name, shape in header["arrays"]:
        count = int(np.prod(shape))
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        if name not in params or params[name].shape != tuple(shape):
            raise VersionMismatch(f"{path}: unexpected array {name} {shape}")
        params[name][...] = data
        offset += 8 * count
    if offset != len(raw):
        raise VersionMismatch(f"{path}: trailing or missing bytes")
    model.trained = bool(desc.get("trained", False))
    return model
