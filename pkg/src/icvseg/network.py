"""Three-branch multi-scale patch classifier.

Each branch consumes one patch scale through three strided valid
convolutions (each followed by batch norm and ReLU) and two fully connected
layers (each followed by ReLU and dropout). The three branch features are
concatenated into one final fully connected layer with a two-way softmax:
column 0 is the background probability, column 1 the foreground probability.

Parameter traversal order (used for initialization, gradients, and
checkpoint payloads) is: for each branch in order, conv1 weights, conv1
bias, bn1 gamma, bn1 beta, conv2 ..., conv3 ..., fc1 weights, fc1 bias,
fc2 weights, fc2 bias; then joint weights, joint bias. Batch-norm running
means/variances follow in the same branch/layer order.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError
from .layers import (
    BatchNormParams,
    ConvParams,
    DenseParams,
    batch_norm_backward,
    batch_norm_forward,
    conv2d_backward,
    conv2d_forward,
    conv2d_output_size,
    dense_backward,
    dense_forward,
    dropout,
    dropout_backward,
    one_hot,
    relu,
    relu_backward,
    softmax_cross_entropy,
    softmax_rows,
)
from .optim import AdamState, adam_step

N_CLASSES = 2

__all__ = [
    "N_CLASSES",
    "ConvSpec",
    "BranchSpec",
    "NetworkSpec",
    "default_spec",
    "desk_spec",
    "tiny_spec",
    "validate_spec",
    "BranchParams",
    "ParameterSet",
    "init_params",
    "forward",
    "backward",
    "train_epoch",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class ConvSpec:
    channels: int
    kernel: int
    stride: int


@dataclass(frozen=True)
class BranchSpec:
    patch_size: int
    convs: tuple
    dense_widths: tuple

    def conv_extents(self):
        """Spatial extent after each conv layer, starting from the patch."""
        extents = [self.patch_size]
        for c in self.convs:
            extents.append(conv2d_output_size(extents[-1], c.kernel, c.stride))
        return extents

    def flat_width(self) -> int:
        return self.convs[-1].channels * self.conv_extents()[-1] ** 2


@dataclass(frozen=True)
class NetworkSpec:
    branches: tuple
    dropout_rate: float = 0.5
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5

    @property
    def patch_sizes(self):
        return tuple(b.patch_size for b in self.branches)

    def joint_in_width(self) -> int:
        return sum(b.dense_widths[-1] for b in self.branches)

    def to_dict(self) -> dict:
        return {
            "branches": [
                {
                    "patch_size": b.patch_size,
                    "convs": [[c.channels, c.kernel, c.stride] for c in b.convs],
                    "dense_widths": list(b.dense_widths),
                }
                for b in self.branches
            ],
            "dropout_rate": self.dropout_rate,
            "bn_momentum": self.bn_momentum,
            "bn_epsilon": self.bn_epsilon,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        try:
            branches = tuple(
                BranchSpec(
                    patch_size=int(b["patch_size"]),
                    convs=tuple(ConvSpec(int(c[0]), int(c[1]), int(c[2])) for c in b["convs"]),
                    dense_widths=tuple(int(w) for w in b["dense_widths"]),
                )
                for b in d["branches"]
            )
            return cls(
                branches=branches,
                dropout_rate=float(d["dropout_rate"]),
                bn_momentum=float(d["bn_momentum"]),
                bn_epsilon=float(d["bn_epsilon"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"malformed network spec: {e}") from e


def validate_spec(spec: NetworkSpec) -> None:
    """Reject specs that violate the architecture contract, with a per-layer
    shape trace when a conv chain collapses below 1x1."""
    if len(spec.branches) != 3:
        raise ConfigError(f"spec must have exactly 3 branches, got {len(spec.branches)}")
    sizes = spec.patch_sizes
    if any(s % 2 == 0 or s < 1 for s in sizes):
        raise ConfigError(f"patch sizes must be odd and positive, got {sizes}")
    if not (sizes[0] < sizes[1] < sizes[2]):
        raise ConfigError(f"patch sizes must be strictly increasing, got {sizes}")
    if not 0.0 <= spec.dropout_rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {spec.dropout_rate}")
    for bi, b in enumerate(spec.branches):
        if len(b.convs) != 3:
            raise ConfigError(f"branch {bi} must have exactly 3 conv layers, got {len(b.convs)}")
        if len(b.dense_widths) != 2:
            raise ConfigError(
                f"branch {bi} must have exactly 2 dense layers, got {len(b.dense_widths)}"
            )
        for c in b.convs:
            if c.channels < 1 or c.kernel < 1 or c.stride < 1:
                raise ConfigError(f"branch {bi} has invalid conv layer {c}")
        extents = b.conv_extents()
        if extents[-1] < 1:
            trace = " -> ".join(str(e) for e in extents)
            raise ConfigError(
                f"branch {bi} (patch {b.patch_size}) conv chain collapses below 1x1: "
                f"spatial extents {trace}"
            )
        if any(w < 1 for w in b.dense_widths):
            raise ConfigError(f"branch {bi} has invalid dense widths {b.dense_widths}")


def default_spec() -> NetworkSpec:
    """Full-scale architecture: 51/101/151 patches, conv channels 24/32/48
    with 5x5 kernels at stride 2, branch dense widths 256 and 64."""
    convs = (ConvSpec(24, 5, 2), ConvSpec(32, 5, 2), ConvSpec(48, 5, 2))
    return NetworkSpec(
        branches=(
            BranchSpec(51, convs, (256, 64)),
            BranchSpec(101, convs, (256, 64)),
            BranchSpec(151, convs, (256, 64)),
        )
    )


def desk_spec() -> NetworkSpec:
    """Desk-scale profile for 128x128 in-plane slices: 25/51/75 patches with
    reduced channel counts, sized to train and segment within minutes."""
    return NetworkSpec(
        branches=(
            BranchSpec(25, (ConvSpec(12, 3, 2), ConvSpec(16, 3, 2), ConvSpec(24, 3, 2)), (64, 32)),
            BranchSpec(51, (ConvSpec(12, 5, 2), ConvSpec(16, 5, 2), ConvSpec(24, 5, 2)), (64, 32)),
            BranchSpec(75, (ConvSpec(12, 5, 2), ConvSpec(16, 5, 2), ConvSpec(24, 5, 2)), (64, 32)),
        ),
        dropout_rate=0.25,
    )


def tiny_spec() -> NetworkSpec:
    """Minimal legal architecture (11/15/19 patches) for gradient checks."""
    return NetworkSpec(
        branches=(
            BranchSpec(11, (ConvSpec(2, 3, 1), ConvSpec(3, 3, 2), ConvSpec(3, 3, 2)), (6, 4)),
            BranchSpec(15, (ConvSpec(2, 3, 2), ConvSpec(3, 3, 2), ConvSpec(3, 3, 1)), (6, 4)),
            BranchSpec(19, (ConvSpec(2, 3, 2), ConvSpec(3, 3, 2), ConvSpec(3, 3, 2)), (6, 4)),
        ),
        dropout_rate=0.0,
    )


@dataclass
class BranchParams:
    convs: list
    bns: list
    denses: list


@dataclass
class ParameterSet:
    branches: list
    joint: DenseParams

    def trainable_arrays(self):
        out = []
        for b in self.branches:
            for conv, bn in zip(b.convs, b.bns):
                out += [conv.weights, conv.bias, bn.gamma, bn.beta]
            for d in b.denses:
                out += [d.weights, d.bias]
        out += [self.joint.weights, self.joint.bias]
        return out

    def trainable_names(self):
        names = []
        for bi, b in enumerate(self.branches):
            for li in range(len(b.convs)):
                names += [f"branch{bi}.conv{li + 1}.weights", f"branch{bi}.conv{li + 1}.bias",
                          f"branch{bi}.bn{li + 1}.gamma", f"branch{bi}.bn{li + 1}.beta"]
            for li in range(len(b.denses)):
                names += [f"branch{bi}.fc{li + 1}.weights", f"branch{bi}.fc{li + 1}.bias"]
        names += ["joint.weights", "joint.bias"]
        return names

    def bn_params(self):
        return [bn for b in self.branches for bn in b.bns]

    def running_stat_arrays(self):
        out = []
        for bn in self.bn_params():
            out += [bn.running_mean, bn.running_var]
        return out

    def running_stat_names(self):
        names = []
        for bi, b in enumerate(self.branches):
            for li in range(len(b.bns)):
                names += [f"branch{bi}.bn{li + 1}.running_mean",
                          f"branch{bi}.bn{li + 1}.running_var"]
        return names

    def parameter_count(self) -> int:
        return sum(a.size for a in self.trainable_arrays())

    @property
    def dtype(self):
        return self.joint.weights.dtype


def init_params(spec: NetworkSpec, seed: int, dtype=np.float32) -> ParameterSet:
    """He-initialized weights (scaled by layer fan-in), zero biases, unit
    batch-norm scale. Deterministic for a given seed."""
    validate_spec(spec)
    rng = np.random.default_rng(seed)

    def he(shape, fan_in):
        return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)

    branches = []
    for b in spec.branches:
        convs, bns = [], []
        in_ch = 1
        for c in b.convs:
            convs.append(ConvParams(
                weights=he((c.channels, in_ch, c.kernel, c.kernel), in_ch * c.kernel ** 2),
                bias=np.zeros(c.channels, dtype=dtype),
            ))
            bns.append(BatchNormParams(
                gamma=np.ones(c.channels, dtype=dtype),
                beta=np.zeros(c.channels, dtype=dtype),
                running_mean=np.zeros(c.channels, dtype=dtype),
                running_var=np.ones(c.channels, dtype=dtype),
            ))
            in_ch = c.channels
        denses = []
        width = b.flat_width()
        for w in b.dense_widths:
            denses.append(DenseParams(weights=he((w, width), width),
                                      bias=np.zeros(w, dtype=dtype)))
            width = w
        branches.append(BranchParams(convs=convs, bns=bns, denses=denses))
    joint_in = spec.joint_in_width()
    joint = DenseParams(weights=he((N_CLASSES, joint_in), joint_in),
                        bias=np.zeros(N_CLASSES, dtype=dtype))
    return ParameterSet(branches=branches, joint=joint)


def check_params_match(spec: NetworkSpec, params: ParameterSet) -> None:
    """Reject a spec/params pair whose array shapes disagree."""
    validate_spec(spec)
    if len(params.branches) != len(spec.branches):
        raise ConfigError("parameter set and spec disagree on branch count")
    for bi, (bs, bp) in enumerate(zip(spec.branches, params.branches)):
        in_ch = 1
        for li, cs in enumerate(bs.convs):
            want = (cs.channels, in_ch, cs.kernel, cs.kernel)
            got = tuple(bp.convs[li].weights.shape)
            if got != want:
                raise ConfigError(
                    f"branch {bi} conv{li + 1} weights shape {got} does not match spec {want}"
                )
            in_ch = cs.channels
        width = bs.flat_width()
        for li, w in enumerate(bs.dense_widths):
            got = tuple(bp.denses[li].weights.shape)
            if got != (w, width):
                raise ConfigError(
                    f"branch {bi} fc{li + 1} weights shape {got} does not match spec {(w, width)}"
                )
            width = w
    want = (N_CLASSES, spec.joint_in_width())
    if tuple(params.joint.weights.shape) != want:
        raise ConfigError(
            f"joint weights shape {tuple(params.joint.weights.shape)} does not match spec {want}"
        )


@dataclass
class _BranchCache:
    convs: list
    bns: list
    conv_relus: list
    conv_out_shape: tuple
    fcs: list
    fc_relus: list
    drops: list


@dataclass
class NetCache:
    branches: list
    joint: object
    logits: np.ndarray
    widths: list


def forward(params: ParameterSet, spec: NetworkSpec, patches: Sequence[np.ndarray],
            mode: str = "infer", rng: Optional[np.random.Generator] = None,
            with_cache: bool = False):
    """Classify a batch of patch triples.

    ``patches`` holds three arrays ``[N, s_i, s_i]`` ordered small to large.
    Returns ``[N, 2]`` class probabilities (rows sum to 1); with
    ``with_cache=True`` also returns the cache needed by :func:`backward`.
    """
    if mode not in ("train", "infer"):
        raise ConfigError(f"unknown mode {mode!r}")
    if len(patches) != 3:
        raise ShapeError(f"expected 3 patch scales, got {len(patches)}")
    dtype = params.dtype
    n = patches[0].shape[0]
    for bi, (p, b) in enumerate(zip(patches, spec.branches)):
        if p.ndim != 3 or p.shape[0] != n or p.shape[1:] != (b.patch_size, b.patch_size):
            raise ShapeError(
                f"branch {bi} expects [N, {b.patch_size}, {b.patch_size}] patches, "
                f"got shape {tuple(p.shape)}"
            )
    if n < 1:
        raise ShapeError("empty batch")
    if mode == "train" and spec.dropout_rate > 0 and rng is None:
        raise ConfigError("train-mode forward with dropout needs an rng")

    feats = []
    branch_caches = []
    for bi, (b, bp) in enumerate(zip(spec.branches, params.branches)):
        x = np.ascontiguousarray(patches[bi], dtype=dtype)[:, None]
        conv_caches, bn_caches, relu_masks = [], [], []
        for cs, cp, bn in zip(b.convs, bp.convs, bp.bns):
            x, cc = conv2d_forward(x, cp, cs.stride)
            x, bc = batch_norm_forward(x, bn, mode, spec.bn_momentum, spec.bn_epsilon)
            x, rm = relu(x)
            conv_caches.append(cc)
            bn_caches.append(bc)
            relu_masks.append(rm)
        conv_out_shape = x.shape
        x = x.reshape(n, -1)
        fc_caches, fc_masks, drop_caches = [], [], []
        for dp in bp.denses:
            x, fc = dense_forward(x, dp)
            x, rm = relu(x)
            x, dc = dropout(x, spec.dropout_rate, mode, rng)
            fc_caches.append(fc)
            fc_masks.append(rm)
            drop_caches.append(dc)
        feats.append(x)
        branch_caches.append(_BranchCache(
            convs=conv_caches, bns=bn_caches, conv_relus=relu_masks,
            conv_out_shape=conv_out_shape, fcs=fc_caches, fc_relus=fc_masks,
            drops=drop_caches,
        ))

    joint_in = np.concatenate(feats, axis=1)
    logits, joint_cache = dense_forward(joint_in, params.joint)
    probs = softmax_rows(logits)
    if with_cache:
        cache = NetCache(branches=branch_caches, joint=joint_cache, logits=logits,
                         widths=[f.shape[1] for f in feats])
        return probs, cache
    return probs


def backward(grad_logits: np.ndarray, cache: NetCache, params: ParameterSet):
    """Gradients of the loss w.r.t. every trainable array, in traversal order."""
    g_joint_in, g_jw, g_jb = dense_backward(grad_logits, cache.joint)
    splits = np.cumsum(cache.widths)[:-1]
    branch_grads_in = np.split(g_joint_in, splits, axis=1)

    grads = []
    for bc, g in zip(cache.branches, branch_grads_in):
        fc_grads = []
        for li in (1, 0):
            g = dropout_backward(g, bc.drops[li])
            g = relu_backward(g, bc.fc_relus[li])
            g, gw, gb = dense_backward(g, bc.fcs[li])
            fc_grads.append((gw, gb))
        fc_grads.reverse()
        g = g.reshape(bc.conv_out_shape)
        conv_grads = []
        for li in (2, 1, 0):
            g = relu_backward(g, bc.conv_relus[li])
            g, ggamma, gbeta = batch_norm_backward(g, bc.bns[li])
            g, gw, gb = conv2d_backward(g, bc.convs[li])
            conv_grads.append((gw, gb, ggamma, gbeta))
        conv_grads.reverse()
        for gw, gb, ggamma, gbeta in conv_grads:
            grads += [gw, gb, ggamma, gbeta]
        for gw, gb in fc_grads:
            grads += [gw, gb]
    grads += [g_jw, g_jb]
    return grads


def train_epoch(params: ParameterSet, spec: NetworkSpec, batches: Iterable,
                adam_state: AdamState, rng: Optional[np.random.Generator] = None):
    """Run one Adam update per minibatch; returns the sample-weighted mean
    cross-entropy loss over the epoch.

    ``batches`` yields ``(patch_arrays, labels)`` pairs as produced by
    :func:`icvseg.sampling.stream_minibatches`. A batch with a single sample
    cannot satisfy batch norm and is skipped with a report; a batch whose
    gradients go non-finite is reported and its update skipped.
    """
    import logging
    log = logging.getLogger(__name__)

    arrays = params.trainable_arrays()
    total_loss = 0.0
    total_n = 0
    for patches, labels in batches:
        nb = int(np.asarray(labels).shape[0])
        if nb < 2:
            log.warning("skipping %d-sample batch (batch norm needs >= 2 samples)", nb)
            continue
        _, cache = forward(params, spec, patches, mode="train", rng=rng, with_cache=True)
        targets = one_hot(labels, N_CLASSES, dtype=params.dtype)
        loss, _, grad_logits = softmax_cross_entropy(cache.logits, targets)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite training loss {loss}")
        grads = backward(grad_logits, cache, params)
        try:
            adam_step(arrays, grads, adam_state)
        except NumericError as e:
            log.warning("optimizer step rejected: %s", e)
        total_loss += loss * nb
        total_n += nb
    if total_n == 0:
        raise ConfigError("training stream yielded no usable samples")
    return total_loss / total_n


CHECKPOINT_MAGIC = b"ICVSEGCK"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: ParameterSet
    adam: Optional[AdamState] = None
    metadata: dict = field(default_factory=dict)
    payload_crc: Optional[int] = None


def _payload_arrays(ckpt: Checkpoint):
    names = ckpt.params.trainable_names() + ckpt.params.running_stat_names()
    arrays = ckpt.params.trainable_arrays() + ckpt.params.running_stat_arrays()
    if ckpt.adam is not None:
        for i, a in enumerate(ckpt.adam.m):
            names.append(f"adam.m.{i}")
            arrays.append(a)
        for i, a in enumerate(ckpt.adam.v):
            names.append(f"adam.v.{i}")
            arrays.append(a)
    return names, arrays


def save_checkpoint(path, ckpt: Checkpoint) -> int:
    """Write a checkpoint; returns the payload checksum.

    Layout: 8-byte magic, version byte, uint32 header length, JSON header
    (spec, metadata, optimizer hyperparameters, array manifest), raw
    little-endian float32 payload in manifest order, uint32 CRC-32 of the
    payload. The round trip is bit-exact.
    """
    validate_spec(ckpt.spec)
    names, arrays = _payload_arrays(ckpt)
    for name, a in zip(names, arrays):
        if a.dtype != np.float32:
            raise ConfigError(f"checkpoint arrays must be float32, {name} is {a.dtype}")
    header = {
        "format": "icvseg-checkpoint",
        "version": CHECKPOINT_VERSION,
        "spec": ckpt.spec.to_dict(),
        "metadata": ckpt.metadata,
        "adam": None if ckpt.adam is None else {
            **ckpt.adam.hyperparameters(), "step_count": ckpt.adam.step_count,
        },
        "bn_updates": [bn.updates for bn in ckpt.params.bn_params()],
        "arrays": [[name, list(a.shape)] for name, a in zip(names, arrays)],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(bytes([CHECKPOINT_VERSION]))
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)
        f.write(struct.pack("<I", crc))
    ckpt.payload_crc = crc
    return crc


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 1 + 4:
        raise DataError(f"truncated checkpoint file {path}")
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataError(f"{path} is not a checkpoint file (magic mismatch)")
    version = blob[len(CHECKPOINT_MAGIC)]
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    off = len(CHECKPOINT_MAGIC) + 1
    (header_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    if off + header_len + 4 > len(blob):
        raise DataError(f"truncated checkpoint file {path} (header extends past end)")
    try:
        header = json.loads(blob[off : off + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"unreadable checkpoint header in {path}: {e}") from e
    off += header_len
    if header.get("format") != "icvseg-checkpoint":
        raise DataError(f"{path} header does not declare the checkpoint format")

    spec = NetworkSpec.from_dict(header["spec"])
    params = init_params(spec, seed=0, dtype=np.float32)
    adam_info = header.get("adam")
    adam = None
    if adam_info is not None:
        adam = AdamState.for_arrays(
            params.trainable_arrays(),
            lr=float(adam_info["lr"]), beta1=float(adam_info["beta1"]),
            beta2=float(adam_info["beta2"]), epsilon=float(adam_info["epsilon"]),
        )
        adam.step_count = int(adam_info["step_count"])
    ckpt = Checkpoint(spec=spec, params=params, adam=adam,
                      metadata=header.get("metadata", {}))

    names, arrays = _payload_arrays(ckpt)
    manifest = header.get("arrays", [])
    if len(manifest) != len(arrays):
        raise DataError(
            f"checkpoint manifest lists {len(manifest)} arrays, expected {len(arrays)}"
        )
    expected = sum(int(np.prod(shape)) for _, shape in manifest) * 4
    payload = blob[off : off + expected]
    if len(payload) != expected or off + expected + 4 != len(blob):
        raise DataError(
            f"checkpoint payload length mismatch in {path}: "
            f"expected {expected} bytes plus checksum"
        )
    (crc_stored,) = struct.unpack_from("<I", blob, off + expected)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    if crc != crc_stored:
        raise DataError(f"checkpoint payload checksum mismatch in {path} (corrupt file)")

    pos = 0
    for (name, shape), target in zip(manifest, arrays):
        shape = tuple(int(s) for s in shape)
        if shape != target.shape:
            raise DataError(
                f"checkpoint array {name} has shape {shape}, expected {target.shape}"
            )
        count = int(np.prod(shape))
        vals = np.frombuffer(payload, dtype="<f4", count=count, offset=pos).reshape(shape)
        target[...] = vals
        pos += count * 4

    bn_updates = header.get("bn_updates", [])
    bns = params.bn_params()
    if len(bn_updates) != len(bns):
        raise DataError("checkpoint batch-norm update counts do not match the spec")
    for bn, u in zip(bns, bn_updates):
        bn.updates = int(u)
        bn.loaded = True
    ckpt.payload_crc = crc
    return ckpt
