"""Per-channel evidential subnetwork: a small slice-wise CNN with a softplus
evidence head, trained with Adam and a step-decay learning-rate schedule.

Convolutions are implemented with im2col in numpy and backpropagated by hand.
Internally activations are channels-last, ``(B, H, W, C)``; evidence returned
to callers has the class axis first, ``(N, H, W)`` per slice.  Computation
runs in the parameters' dtype (float32 while training, float64 for gradient
checks); the loss itself is always evaluated in float64.
"""
from __future__ import annotations

import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .evidential import EvidenceField, beliefs
from .losses import LossBreakdown, LossConfig, loss_and_gradient, softplus
from .volume import DimensionError, LabelMap, Volume, VolumeIOError, one_hot

logger = logging.getLogger(__name__)

CHANNEL_NAMES = ("fa", "md", "e1", "e2", "e3")
CHECKPOINT_MAGIC = b"EPRM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class SubnetConfig:
    num_classes: int = 6
    hidden: tuple[int, ...] = (16, 16)
    kernel: int = 3
    input_channels: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")
        if self.num_classes < 2 or self.input_channels < 1 or min(self.hidden, default=1) < 1:
            raise ValueError("invalid layer sizes")

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return self.hidden + (self.num_classes,)


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 0.01
    lr_decay_factor: float = 0.95
    decay_every_epochs: int = 5
    epochs: int = 60
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if min(self.initial_lr, self.decay_every_epochs, self.epochs, self.batch_size) <= 0:
            raise ValueError("learning rate, epochs and batch size must be positive")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must lie in (0, 1]")


@dataclass
class SubnetParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "SubnetParams":
        return SubnetParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def astype(self, dtype) -> "SubnetParams":
        return SubnetParams(
            [w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases]
        )


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: SubnetParams) -> "AdamState":
        arrs = params.arrays()
        return cls([np.zeros(a.shape) for a in arrs], [np.zeros(a.shape) for a in arrs], 0)


@dataclass
class TrainingRecord:
    train: list[LossBreakdown] = field(default_factory=list)
    val: list[LossBreakdown] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def to_text(self) -> str:
        """One line per epoch; wall-clock time is left out so reruns diff cleanly."""
        lines = ["# epoch lr train_dice train_rce train_kl train_edl train_total"
                 " val_dice val_rce val_kl val_edl val_total"]
        for i, (lr, tr) in enumerate(zip(self.lr, self.train)):
            vals = [f"{i}", repr(lr)] + [repr(x) for x in tr.as_dict().values()]
            if i < len(self.val):
                vals += [repr(x) for x in self.val[i].as_dict().values()]
            lines.append(" ".join(vals))
        return "\n".join(lines) + "\n"


def init_params(cfg: SubnetConfig) -> SubnetParams:
    """He-uniform weights, zero biases."""
    rng = np.random.default_rng(cfg.seed)
    weights, biases = [], []
    cin = cfg.input_channels
    for cout in cfg.layer_sizes:
        fan_in = cin * cfg.kernel * cfg.kernel
        limit = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=(cout, cin, cfg.kernel, cfg.kernel))
        weights.append(w.astype(np.float32))
        biases.append(np.zeros(cout, dtype=np.float32))
        cin = cout
    return SubnetParams(weights, biases)


def zero_params(cfg: SubnetConfig) -> SubnetParams:
    p = init_params(cfg)
    return SubnetParams([np.zeros_like(w) for w in p.weights], [np.zeros_like(b) for b in p.biases])


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(B, H, W, C) -> (B*H*W, k*k*C) zero-padded patches, channel fastest."""
    b, h, w, c = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    return win.reshape(b * h * w, k * k * c)


def _wmat(w: np.ndarray, dtype) -> np.ndarray:
    """(cout, cin, k, k) -> (k*k*cin, cout) matching the _im2col column order."""
    cout = w.shape[0]
    return w.transpose(2, 3, 1, 0).reshape(-1, cout).astype(dtype)


def _compute_dtype(params: SubnetParams):
    return np.float32 if params.weights[0].dtype == np.float32 else np.float64


def _as_batch(x, dtype) -> np.ndarray:
    x = np.asarray(x, dtype=dtype)
    if x.ndim == 2:
        x = x[None, :, :, None]
    elif x.ndim == 3:
        x = x[..., None]
    else:
        raise ValueError(f"expected (H, W) or (B, H, W) input, got {x.shape}")
    return x


def forward_logits(params: SubnetParams, x, cache: list | None = None) -> np.ndarray:
    """Pre-softplus activations in channels-last layout, shape (B, H, W, N)."""
    dtype = _compute_dtype(params)
    x = _as_batch(x, dtype)
    nlayers = len(params.weights)
    for li, (w, bias) in enumerate(zip(params.weights, params.biases)):
        cout, cin, k, _ = w.shape
        if x.shape[3] != cin:
            raise ValueError(f"layer {li} expects {cin} channels, got {x.shape[3]}")
        if min(x.shape[1:3]) < k // 2 + 1:
            raise ValueError(f"slice {x.shape[1:3]} smaller than the kernel footprint")
        b, h, wd, _ = x.shape
        cols = _im2col(x, k)
        out = (cols @ _wmat(w, dtype) + bias.astype(dtype)).reshape(b, h, wd, cout)
        if cache is not None:
            cache.append((cols, out))
        x = np.maximum(out, 0) if li < nlayers - 1 else out
    return x


def forward(params: SubnetParams, slice_) -> np.ndarray:
    """Evidence for one 2-D slice, shape (N, H, W); or (N, B, H, W) for a batch."""
    x = np.asarray(slice_)
    z = softplus(forward_logits(params, x).astype(np.float64))
    z = np.moveaxis(z, 3, 0)
    return z[:, 0] if x.ndim == 2 else z


def backward(params: SubnetParams, x, target, cfg: LossConfig = LossConfig()):
    """Loss breakdown and parameter gradients for a batch.

    ``target`` is the one-hot truth with class axis first, ``(N, B, H, W)``
    (or ``(N, H, W)`` for a single slice).
    """
    dtype = _compute_dtype(params)
    target = np.asarray(target, dtype=np.float64)
    if target.ndim == 3:
        target = target[:, None]
    cache: list = []
    z = forward_logits(params, x, cache)
    breakdown, gz = loss_and_gradient(np.moveaxis(z, 3, 0).astype(np.float64), target, cfg)
    g = np.moveaxis(gz, 0, 3).astype(dtype)
    nlayers = len(params.weights)
    gw: list = [None] * nlayers
    gb: list = [None] * nlayers
    for li in reversed(range(nlayers)):
        cols, pre = cache[li]
        if li < nlayers - 1:
            g = g * (pre > 0)
        w = params.weights[li]
        cout, cin, k, _ = w.shape
        gflat = g.reshape(-1, cout)
        gw[li] = (gflat.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2).astype(np.float64)
        gb[li] = gflat.sum(axis=0, dtype=np.float64)
        if li > 0:
            # input gradient = correlation of g with the spatially flipped,
            # in/out-swapped kernel
            wflip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            g = (_im2col(g, k) @ _wmat(wflip, dtype)).reshape(g.shape[:3] + (cin,))
    return breakdown, SubnetParams(gw, gb)


def adam_step(params: SubnetParams, grads: SubnetParams, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns (new params, new state)."""
    t = state.t + 1
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1**t)
        vhat = v / (1.0 - beta2**t)
        step = lr * mhat / (np.sqrt(vhat) + eps)
        new_p.append((p.astype(np.float64) - step).astype(p.dtype))
        new_m.append(m)
        new_v.append(v)
    return SubnetParams(new_p[0::2], new_p[1::2]), AdamState(new_m, new_v, t)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.initial_lr * cfg.lr_decay_factor ** (epoch // cfg.decay_every_epochs)


def _channel_index(channel) -> int:
    if isinstance(channel, str):
        try:
            return CHANNEL_NAMES.index(channel.lower())
        except ValueError:
            raise ValueError(f"unknown channel {channel!r}; expected one of {CHANNEL_NAMES}")
    return int(channel)


def _slice_order(n_slices: Sequence[int], rng: np.random.Generator) -> list[tuple[int, int]]:
    """Shuffle slices within each volume, then interleave volumes round-robin."""
    per_vol = [list(rng.permutation(n)) for n in n_slices]
    order = []
    for i in range(max(n_slices)):
        for v, sl in enumerate(per_vol):
            if i < len(sl):
                order.append((v, int(sl[i])))
    return order


def _mean_breakdown(items: list[tuple[LossBreakdown, int]]) -> LossBreakdown:
    total = sum(w for _, w in items)
    vals = {k: sum(b.as_dict()[k] * w for b, w in items) / total
            for k in ("dice", "rce", "kl", "edl", "total")}
    return LossBreakdown(**vals)


def evaluate_loss(params, dataset, channel, loss_cfg: LossConfig, batch_size: int = 8) -> LossBreakdown:
    ch = _channel_index(channel)
    items = []
    for vol, lm in dataset:
        x = vol.data[ch]
        y = one_hot(lm).data
        for s in range(0, x.shape[0], batch_size):
            z = forward_logits(params, x[s:s + batch_size])
            bd = loss_and_gradient(np.moveaxis(z, 3, 0).astype(np.float64), y[:, s:s + batch_size], loss_cfg)[0]
            items.append((bd, z.shape[0]))
    return _mean_breakdown(items)


def train(dataset, channel, cfg: TrainConfig, subnet_cfg: SubnetConfig | None = None,
          val_dataset=None) -> tuple[SubnetParams, TrainingRecord]:
    """Train one subnetwork on channel ``channel`` of 5-channel input volumes."""
    if not dataset:
        raise ValueError("training dataset is empty")
    ch = _channel_index(channel)
    n_classes = dataset[0][1].n_classes
    if subnet_cfg is None:
        subnet_cfg = SubnetConfig(num_classes=n_classes, seed=cfg.seed)
    if subnet_cfg.num_classes != n_classes:
        raise DimensionError("subnet num_classes does not match the label maps")
    for vol, lm in dataset:
        if not 0 <= ch < vol.channels:
            raise ValueError(f"channel {ch} not present in a {vol.channels}-channel volume")
        if vol.spatial_shape != lm.spatial_shape:
            raise DimensionError("volume and label map dims differ")

    xs = [vol.data[ch].astype(np.float64) for vol, _ in dataset]
    ys = [one_hot(lm).data.astype(np.float64) for _, lm in dataset]
    params = init_params(subnet_cfg)
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(cfg.seed)
    record = TrainingRecord()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at_epoch(cfg, epoch)
        order = _slice_order([x.shape[0] for x in xs], rng)
        items = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            xb = np.stack([xs[v][s] for v, s in batch])
            yb = np.stack([ys[v][:, s] for v, s in batch], axis=1)
            bd, grads = backward(params, xb, yb, cfg.loss)
            params, state = adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            items.append((bd, len(batch)))
        record.train.append(_mean_breakdown(items))
        record.lr.append(lr)
        if val_dataset:
            record.val.append(evaluate_loss(params, val_dataset, ch, cfg.loss, cfg.batch_size))
        record.seconds.append(time.perf_counter() - t0)
        logger.debug("channel %d epoch %d lr %.5g loss %.5f", ch, epoch, lr, record.train[-1].total)
    return params, record


@dataclass(frozen=True)
class SubnetPrediction:
    evidence: EvidenceField
    labelmap: LabelMap
    uncertainty: np.ndarray


def predict_subnet(params: SubnetParams, volume: Volume, channel, names=None,
                   batch_size: int = 8) -> SubnetPrediction:
    """Slice-wise forward over every axial slice of ``volume``."""
    ch = _channel_index(channel)
    if not 0 <= ch < volume.channels:
        raise ValueError(f"channel {ch} not present in a {volume.channels}-channel volume")
    if params.weights[0].shape[1] != 1:
        raise ValueError("subnetwork expects single-channel input")
    x = volume.data[ch]
    chunks = [forward(params, x[s:s + batch_size]) for s in range(0, x.shape[0], batch_size)]
    # evidence is stored as float32; derive labels and uncertainty from the
    # stored values so that re-reading the evidence reproduces them exactly
    ev = np.concatenate(chunks, axis=1).astype(np.float32)
    n = ev.shape[0]
    bf = beliefs(ev)
    tag = CHANNEL_NAMES[ch] if ch < len(CHANNEL_NAMES) else f"ch{ch}"
    return SubnetPrediction(
        EvidenceField(ev, tag),
        LabelMap.from_array(bf.labels(), n, names),
        bf.uncertainty,
    )


def _config_echo(scfg: SubnetConfig, channel: int, names: Sequence[str]) -> str:
    lines = [
        f"num_classes = {scfg.num_classes}",
        f"hidden = {' '.join(map(str, scfg.hidden))}",
        f"kernel = {scfg.kernel}",
        f"input_channels = {scfg.input_channels}",
        f"seed = {scfg.seed}",
        f"channel = {channel}",
    ]
    lines += [f"class.{i} = {n}" for i, n in enumerate(names)]
    return "\n".join(lines) + "\n"


def save_checkpoint(path, params: SubnetParams, scfg: SubnetConfig, channel, names: Sequence[str]) -> None:
    """EPRM: magic, u16 version, u32 echo length, key-value config echo, raw f32 weights."""
    echo = _config_echo(scfg, _channel_index(channel), names).encode("utf-8")
    payload = b"".join(a.astype("<f4").tobytes() for a in params.arrays())
    try:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sHI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(echo)))
            fh.write(echo)
            fh.write(payload)
    except OSError as exc:
        raise VolumeIOError(path, exc) from exc


def load_checkpoint(path):
    """Returns (params, subnet config, channel index, class names)."""
    from .config import parse_kv
    from .volume import BadMagicError, FormatError, TruncatedError, VersionError

    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise VolumeIOError(path, exc) from exc
    if raw[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not an EPRM checkpoint")
    if len(raw) < 10:
        raise TruncatedError(f"{path}: header truncated")
    _, version, n_echo = struct.unpack_from("<4sHI", raw)
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    try:
        kv = parse_kv(raw[10:10 + n_echo].decode("utf-8"))
        scfg = SubnetConfig(
            num_classes=int(kv["num_classes"]),
            hidden=tuple(int(h) for h in kv["hidden"].split()),
            kernel=int(kv["kernel"]),
            input_channels=int(kv["input_channels"]),
            seed=int(kv["seed"]),
        )
        names = tuple(kv[f"class.{i}"] for i in range(scfg.num_classes))
    except (KeyError, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: malformed checkpoint header ({exc})") from exc
    template = init_params(scfg)
    off = 10 + n_echo
    arrays = []
    for a in template.arrays():
        nbytes = 4 * a.size
        if len(raw) < off + nbytes:
            raise TruncatedError(f"{path}: weights truncated")
        arrays.append(np.frombuffer(raw, "<f4", a.size, off).reshape(a.shape).astype(np.float32))
        off += nbytes
    return SubnetParams(arrays[0::2], arrays[1::2]), scfg, int(kv["channel"]), names
