"""Multitask classification + reconstruction network and its trainer.

A 9 x 9 x B patch runs through a small residual encoder to a 64-d latent,
which feeds both a softmax classifier and a five-layer transposed-conv
decoder that rebuilds the patch (1 -> 1 -> 3 -> 5 -> 7 -> 9 spatially).
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import (BatchNormState, Parameter, ShapeError, Tape, Tensor,
                       adadelta_step, backward)
from .dataio import FormatError, SampleSet

PATCH = 9
LATENT = 64
STEM_CHANNELS = 64
DECODER_CHANNELS = (128, 96, 64, 48)

WEIGHT_MAGIC = b"MDLW"
WEIGHT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class LossWeights:
    lambda_c: float = 0.5
    lambda_r: float = 0.5

    def __post_init__(self):
        if self.lambda_c < 0 or self.lambda_r < 0 or \
                self.lambda_c + self.lambda_r <= 0:
            raise ValueError("loss weights must be nonnegative with a "
                             "positive sum")


@dataclass
class TrainConfig:
    nos: int = 20
    batch_size: int = 32
    phase1_epochs: int = 170
    phase2_epochs: int = 30
    lr_phase1: float = 1.0
    lr_phase2: float = 0.1
    patience: int = 5
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.phase1_epochs < 1 or self.phase2_epochs < 1:
            raise ValueError("epoch counts must be >= 1")


@dataclass
class TrainReport:
    total: list[float] = field(default_factory=list)
    classification: list[float] = field(default_factory=list)
    reconstruction: list[float] = field(default_factory=list)
    epochs_phase1: int = 0
    epochs_phase2: int = 0
    wall_seconds: float = 0.0


class Mdl4owNet:
    """Parameters and batch-norm state of the encoder/classifier/decoder."""

    def __init__(self, bands, num_classes, seed):
        self.bands = bands
        self.num_classes = num_classes
        self.seed = seed
        self.params: dict[str, Parameter] = {}
        self.bn: dict[str, BatchNormState] = {}

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def _glorot(rng, shape, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape).astype(np.float32)


def build_network(bands, num_classes, seed) -> Mdl4owNet:
    """Initialize the full architecture from a seeded PRNG.

    Encoder: stem conv 3x3 (B->64) + two identity-skip residual units at
    64 channels, batch norm and ReLU throughout, global average pooling.
    Classifier: dense 64->C. Decoder: transposed convs 64->128 (k=1) then
    128->96->64->48->B (k=3), batch norm + ReLU between all but the last.
    """
    if bands < 1:
        raise ValueError("bands must be >= 1")
    if num_classes < 2:
        raise ValueError("need at least two classes")
    net = Mdl4owNet(bands, num_classes, seed)
    rng = np.random.default_rng(seed)

    def conv(name, k, cin, cout):
        net.params[f"{name}.kernel"] = Parameter(
            _glorot(rng, (k, k, cin, cout), k * k * cin, k * k * cout))
        net.params[f"{name}.bias"] = Parameter(np.zeros(cout, np.float32))

    def tconv(name, k, cin, cout):
        # transposed-conv kernels are stored [k, k, Cout, Cin]
        net.params[f"{name}.kernel"] = Parameter(
            _glorot(rng, (k, k, cout, cin), k * k * cin, k * k * cout))
        net.params[f"{name}.bias"] = Parameter(np.zeros(cout, np.float32))

    def bn(name, channels):
        net.params[f"{name}.gamma"] = Parameter(np.ones(channels, np.float32))
        net.params[f"{name}.beta"] = Parameter(np.zeros(channels, np.float32))
        net.bn[name] = BatchNormState(channels)

    conv("stem", 3, bands, STEM_CHANNELS)
    bn("stem.bn", STEM_CHANNELS)
    for unit in ("res1", "res2"):
        conv(f"{unit}.conv1", 3, STEM_CHANNELS, STEM_CHANNELS)
        bn(f"{unit}.bn1", STEM_CHANNELS)
        conv(f"{unit}.conv2", 3, STEM_CHANNELS, STEM_CHANNELS)
        bn(f"{unit}.bn2", STEM_CHANNELS)
    net.params["cls.weight"] = Parameter(
        _glorot(rng, (LATENT, num_classes), LATENT, num_classes))
    net.params["cls.bias"] = Parameter(np.zeros(num_classes, np.float32))
    widths = (LATENT,) + DECODER_CHANNELS + (bands,)
    for i in range(5):
        k = 1 if i == 0 else 3
        tconv(f"dec{i + 1}", k, widths[i], widths[i + 1])
        if i < 4:
            bn(f"dec{i + 1}.bn", widths[i + 1])
    return net


def _forward_graph(net, x: Tensor, mode, tape):
    """Wire the Fig-2 style graph; returns (probs, recon, latent) Tensors."""
    p = net.params

    def conv_bn_relu(t, conv_name, bn_name):
        t = ad.conv2d(t, p[f"{conv_name}.kernel"], p[f"{conv_name}.bias"],
                      "same", tape)
        t = ad.batch_norm(t, p[f"{bn_name}.gamma"], p[f"{bn_name}.beta"],
                          net.bn[bn_name], mode, tape)
        return ad.relu(t, tape)

    t = conv_bn_relu(x, "stem", "stem.bn")
    for unit in ("res1", "res2"):
        skip = t
        t = conv_bn_relu(t, f"{unit}.conv1", f"{unit}.bn1")
        t = ad.conv2d(t, p[f"{unit}.conv2.kernel"], p[f"{unit}.conv2.bias"],
                      "same", tape)
        t = ad.batch_norm(t, p[f"{unit}.bn2.gamma"], p[f"{unit}.bn2.beta"],
                          net.bn[f"{unit}.bn2"], mode, tape)
        t = ad.relu(ad.add(t, skip, tape), tape)
    latent = ad.global_avg_pool(t, tape)

    logits = ad.dense(latent, p["cls.weight"], p["cls.bias"], tape)
    probs = ad.softmax(logits, tape)

    d = ad.reshape(latent, (latent.data.shape[0], 1, 1, LATENT), tape)
    for i in range(1, 5):
        d = ad.conv2d_transpose(d, p[f"dec{i}.kernel"], p[f"dec{i}.bias"], tape)
        d = ad.batch_norm(d, p[f"dec{i}.bn.gamma"], p[f"dec{i}.bn.beta"],
                          net.bn[f"dec{i}.bn"], mode, tape)
        d = ad.relu(d, tape)
    recon = ad.conv2d_transpose(d, p["dec5.kernel"], p["dec5.bias"], tape)
    return probs, recon, latent


def _check_batch(net, batch):
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim == 3:
        batch = batch[np.newaxis]
    if batch.ndim != 4 or batch.shape[1:] != (PATCH, PATCH, net.bands):
        raise ShapeError(
            f"expected patches of shape {(PATCH, PATCH, net.bands)}, "
            f"got {batch.shape}")
    return batch


def forward(net, batch, mode="infer"):
    """Run a batch of patches; returns (probs, reconstructions, latents)."""
    batch = _check_batch(net, batch)
    probs, recon, latent = _forward_graph(net, Tensor(batch), mode, None)
    return probs.data, recon.data, latent.data


def total_loss(probs, labels, patches, reconstructions, weights: LossWeights,
               tape=None):
    """lambda_c * mean cross-entropy + lambda_r * mean L1, as a Tensor."""
    pt = probs if isinstance(probs, Tensor) else Tensor(probs)
    xt = patches if isinstance(patches, Tensor) else Tensor(patches)
    rt = reconstructions if isinstance(reconstructions, Tensor) \
        else Tensor(reconstructions)
    labels = np.asarray(labels)
    if labels.ndim == 2:
        onehot = labels.astype(np.float32)
    else:
        c = pt.data.shape[-1]
        onehot = np.eye(c, dtype=np.float32)[labels - 1]
    ce = ad.cross_entropy(pt, Tensor(onehot), tape)
    if ce.data.ndim > 0:
        ce = ad.mean_vec(ce, tape)
    l1 = ad.mean_vec(ad.l1_per_instance(xt, rt, tape), tape) \
        if xt.data.ndim == 4 else ad.l1_loss(xt, rt, tape)
    return ad.weighted_sum(weights.lambda_c, ce, weights.lambda_r, l1, tape)


def train(net, samples: SampleSet, config: TrainConfig):
    """Two-phase AdaDelta training with per-phase early stopping.

    Phase 1 runs at learning-rate multiplier lr_phase1 for at most
    phase1_epochs; a phase ends early once the best epoch-mean total loss
    has not improved for `patience` consecutive epochs. Phase 2 repeats at
    lr_phase2. Batch order is a pure function of config.seed.
    """
    if len(samples) == 0:
        raise ValueError("empty sample set")
    t0 = time.perf_counter()
    x_all = samples.patches
    y_all = samples.labels
    onehot_all = np.eye(net.num_classes, dtype=np.float32)[y_all - 1]
    m = len(samples)
    rng = np.random.default_rng(config.seed)
    report = TrainReport()
    params = net.parameters()
    w = config.loss_weights

    for phase, (max_epochs, lr) in enumerate(
            [(config.phase1_epochs, config.lr_phase1),
             (config.phase2_epochs, config.lr_phase2)], start=1):
        best = np.inf
        bad = 0
        epochs_run = 0
        for _ in range(max_epochs):
            order = rng.permutation(m)
            tot_sum = ce_sum = l1_sum = 0.0
            for start in range(0, m, config.batch_size):
                idx = order[start:start + config.batch_size]
                xb = Tensor(np.ascontiguousarray(x_all[idx]))
                tape = Tape()
                probs, recon, _ = _forward_graph(net, xb, "train", tape)
                ce = ad.mean_vec(ad.cross_entropy(
                    probs, Tensor(onehot_all[idx]), tape), tape)
                l1 = ad.mean_vec(ad.l1_per_instance(xb, recon, tape), tape)
                loss = ad.weighted_sum(w.lambda_c, ce, w.lambda_r, l1, tape)
                if not np.isfinite(loss.data):
                    raise TrainingDivergedError(
                        f"non-finite loss in phase {phase}")
                net.zero_grad()
                backward(tape, loss)
                adadelta_step(params, lr=lr)
                k = len(idx)
                tot_sum += float(loss.data) * k
                ce_sum += float(ce.data) * k
                l1_sum += float(l1.data) * k
            epochs_run += 1
            epoch_loss = tot_sum / m
            report.total.append(epoch_loss)
            report.classification.append(ce_sum / m)
            report.reconstruction.append(l1_sum / m)
            if epoch_loss < best:
                best = epoch_loss
                bad = 0
            else:
                bad += 1
                if bad >= config.patience:
                    break
        if phase == 1:
            report.epochs_phase1 = epochs_run
        else:
            report.epochs_phase2 = epochs_run
    report.wall_seconds = time.perf_counter() - t0
    return net, report


def _infer_chunks(net, patches, chunk=256):
    batch = _check_batch(net, patches)
    for start in range(0, len(batch), chunk):
        yield batch[start:start + chunk]


def reconstruction_errors(net, patches):
    """Per-instance mean-absolute reconstruction loss, infer mode."""
    out = []
    for xb in _infer_chunks(net, patches):
        _, recon, _ = forward(net, xb, "infer")
        d = np.abs(xb - recon).reshape(len(xb), -1)
        out.append(d.mean(axis=1))
    return np.concatenate(out)


def predict_closed(net, patches):
    """Argmax class per instance (1-based, ties to the lowest index)."""
    labels, probs = [], []
    for xb in _infer_chunks(net, patches):
        p, _, _ = forward(net, xb, "infer")
        labels.append(p.argmax(axis=1) + 1)
        probs.append(p)
    return np.concatenate(labels), np.concatenate(probs)


def infer_outputs(net, patches):
    """One shared forward pass: (closed labels, probs, reconstruction v)."""
    labels, probs, losses = [], [], []
    for xb in _infer_chunks(net, patches):
        p, recon, _ = forward(net, xb, "infer")
        labels.append(p.argmax(axis=1) + 1)
        probs.append(p)
        losses.append(np.abs(xb - recon).reshape(len(xb), -1).mean(axis=1))
    return np.concatenate(labels), np.concatenate(probs), np.concatenate(losses)


def _state_entries(net):
    entries = [(name, p.value.data) for name, p in net.params.items()]
    for name, st in net.bn.items():
        rm = st.running_mean if st.running_mean is not None \
            else np.zeros(0, np.float32)
        rv = st.running_var if st.running_var is not None \
            else np.zeros(0, np.float32)
        entries.append((f"{name}.running_mean", rm))
        entries.append((f"{name}.running_var", rv))
        entries.append((f"{name}.updates", np.asarray([st.count], np.float32)))
    return entries


def _write_entry(f, name, arr):
    enc = name.encode("utf-8")
    f.write(struct.pack("<H", len(enc)))
    f.write(enc)
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    f.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(arr.astype("<f4").tobytes())


def _read_exact(f, n, what):
    raw = f.read(n)
    if len(raw) != n:
        raise FormatError(f"truncated weight file while reading {what}")
    return raw


def _read_entry(f):
    nlen = struct.unpack("<H", _read_exact(f, 2, "name length"))[0]
    name = _read_exact(f, nlen, "name").decode("utf-8")
    rank = struct.unpack("<B", _read_exact(f, 1, "rank"))[0]
    dims = [struct.unpack("<I", _read_exact(f, 4, "dims"))[0]
            for _ in range(rank)]
    count = int(np.prod(dims)) if dims else 1
    raw = _read_exact(f, count * 4, f"tensor {name}")
    return name, np.frombuffer(raw, dtype="<f4").reshape(dims).copy()


def save_weights(net, path):
    """Write all parameters, BN statistics, and metadata; bitwise stable."""
    entries = _state_entries(net)
    with open(path, "wb") as f:
        f.write(WEIGHT_MAGIC)
        f.write(struct.pack("<H", WEIGHT_VERSION))
        f.write(struct.pack("<H", len(entries)))
        for name, arr in entries:
            _write_entry(f, name, arr)
        _write_entry(f, "__meta__", np.asarray(
            [net.bands, net.num_classes, net.seed], np.float32))


def load_weights(path) -> Mdl4owNet:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != WEIGHT_MAGIC:
            raise FormatError(f"bad weight-file magic {magic!r}")
        version = struct.unpack("<H", _read_exact(f, 2, "version"))[0]
        if version != WEIGHT_VERSION:
            raise FormatError(f"unsupported weight-file version {version}")
        count = struct.unpack("<H", _read_exact(f, 2, "tensor count"))[0]
        loaded = dict(_read_entry(f) for _ in range(count))
        meta_name, meta = _read_entry(f)
        if meta_name != "__meta__" or meta.shape != (3,):
            raise FormatError("missing metadata record")
    bands, num_classes, seed = (int(v) for v in meta)
    net = build_network(bands, num_classes, seed)
    expected = dict(_state_entries(net))
    if set(loaded) != set(expected):
        raise FormatError("weight file tensors do not match the architecture")
    for name, arr in loaded.items():
        if name.endswith(".running_mean") or name.endswith(".running_var"):
            st = net.bn[name.rsplit(".", 1)[0]]
            if arr.size:
                if name.endswith("mean"):
                    st.running_mean = arr
                else:
                    st.running_var = arr
        elif name.endswith(".updates"):
            net.bn[name.rsplit(".", 1)[0]].count = int(arr[0])
        else:
            p = net.params[name]
            if p.value.data.shape != arr.shape:
                raise FormatError(
                    f"tensor {name} has shape {arr.shape}, "
                    f"expected {p.value.data.shape}")
            p.value.data = arr
    return net
