"""The segmentation network: cascade and parallel atrous blocks, concatenation,
channel attention and a pointwise classifier.

Topology (defaults)::

    in -> conv(s=1)+SA -> conv(s=2)+SA -> conv(s=3)+SA --+-> conv(s=2)+SA --+
                                                         +-> conv(s=4)+SA --+-> concat -> CA -> conv(s=1) -> logits
                                                         +-> conv(s=8)+SA --+

Each ``conv`` is a pointwise atrous convolution followed by ReLU; ``SA`` is a
spatial attention gate, ``CA`` a channel attention gate.
"""
import struct
from collections import OrderedDict
from dataclasses import dataclass, replace

import numpy as np

from . import ops
from .exceptions import ConfigError, InvalidInputError, ParseError, ShapeError
from .geometry import DEFAULT_CELL_SIZE, N_TAPS, VoxelGrid, canonical_order, check_positions

MAGIC = b"PAAC1"
_FLAG_SPATIAL = 1
_FLAG_CHANNEL = 2


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 12
    n_classes: int = 13
    cascade_strides: tuple = (1, 2, 3)
    cascade_channels: tuple = (32, 32, 64)
    parallel_strides: tuple = (2, 4, 8)
    parallel_channels: tuple = (64, 64, 64)
    cell_size: float = DEFAULT_CELL_SIZE
    seed: int = 0
    spatial_attention: bool = True
    channel_attention: bool = True

    def __post_init__(self):
        for name in ("cascade_strides", "cascade_channels", "parallel_strides", "parallel_channels"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))

    def validate(self):
        cs, ps = self.cascade_strides, self.parallel_strides
        if self.in_channels < 1 or self.n_classes < 1:
            raise ConfigError("in_channels and n_classes must be positive")
        if not cs or cs[0] != 1:
            raise ConfigError(f"cascade strides must start at 1, got {cs}")
        if any(b < a for a, b in zip(cs, cs[1:])):
            raise ConfigError(f"cascade strides must be non-decreasing, got {cs}")
        if not ps or any(s < 1 for s in ps) or any(b <= a for a, b in zip(ps, ps[1:])):
            raise ConfigError(f"parallel strides must be positive and strictly increasing, got {ps}")
        if len(self.cascade_channels) != len(cs):
            raise ConfigError("need one cascade width per cascade stride")
        if len(self.parallel_channels) != len(ps):
            raise ConfigError("need one parallel width per parallel stride")
        if any(w < 1 for w in self.cascade_channels + self.parallel_channels):
            raise ConfigError("layer widths must be positive")
        if not self.cell_size > 0:
            raise ConfigError(f"cell_size must be positive, got {self.cell_size}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")
        return self

    @property
    def concat_channels(self):
        return sum(self.parallel_channels)


def _layer_shapes(cfg):
    """Ordered (name, shape, fan_in, fan_out) for every parameter."""
    shapes = []

    def conv(prefix, c_in, c_out):
        shapes.append((f"{prefix}.weight", (N_TAPS, c_in, c_out), c_in, c_out))
        shapes.append((f"{prefix}.bias", (c_out,), None, None))

    def spatial(prefix):
        k = ops.SPATIAL_KERNEL_SIZE
        shapes.append((f"{prefix}.sa_kernel", (k, 2), 2 * k, k))
        shapes.append((f"{prefix}.sa_bias", (), None, None))

    c = cfg.in_channels
    for i, w in enumerate(cfg.cascade_channels):
        conv(f"cascade{i}", c, w)
        if cfg.spatial_attention:
            spatial(f"cascade{i}")
        c = w
    for i, w in enumerate(cfg.parallel_channels):
        conv(f"parallel{i}", c, w)
        if cfg.spatial_attention:
            spatial(f"parallel{i}")
    cc = cfg.concat_channels
    if cfg.channel_attention:
        for j in (1, 2):
            shapes.append((f"channel_att.dense{j}.weight", (cc, cc), cc, cc))
            shapes.append((f"channel_att.dense{j}.bias", (cc,), None, None))
    conv("classifier", cc, cfg.n_classes)
    return shapes


def expected_parameter_count(cfg):
    """Closed-form parameter count, independent of the stored arrays."""
    total, c = 0, cfg.in_channels
    sa = ops.SPATIAL_KERNEL_SIZE * 2 + 1
    for w in cfg.cascade_channels:
        total += ops.conv_parameter_count(c, w) + (sa if cfg.spatial_attention else 0)
        c = w
    for w in cfg.parallel_channels:
        total += ops.conv_parameter_count(c, w) + (sa if cfg.spatial_attention else 0)
    cc = cfg.concat_channels
    if cfg.channel_attention:
        total += 2 * (cc * cc + cc)
    return total + ops.conv_parameter_count(cc, cfg.n_classes)


@dataclass
class PreparedBlock:
    """Grid and ordering of one block, reusable across forward passes."""

    order: np.ndarray
    inverse: np.ndarray
    grid: VoxelGrid


class Network:
    """Parameters plus forward/backward of the segmentation network.

    Parameters live in :attr:`params`, an ordered mapping from name to array
    in declaration order (the checkpoint order).
    """

    def __init__(self, config, params):
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config):
        """Uniform weights in +-sqrt(6 / (fan_in + fan_out)) per matrix, drawn in declaration order; zero biases.

        Each of the 27 kernel taps counts as its own c_in x c_out matrix.
        """
        config.validate()
        rng = np.random.default_rng(config.seed)
        params = OrderedDict()
        for name, shape, fan_in, fan_out in _layer_shapes(config):
            if fan_in is None:
                params[name] = np.zeros(shape)
            else:
                bound = np.sqrt(6.0 / (fan_in + fan_out))
                params[name] = rng.uniform(-bound, bound, size=shape)
        return cls(config, params)

    @property
    def n_parameters(self):
        return int(sum(np.size(p) for p in self.params.values()))

    def copy(self):
        return Network(self.config, OrderedDict((k, v.copy()) for k, v in self.params.items()))

    # -- forward -------------------------------------------------------------

    def prepare(self, positions, features=None):
        """Sort points canonically and bin them on the grid."""
        positions = check_positions(positions)
        order = canonical_order(positions, self.config.cell_size, features)
        inverse = np.empty_like(order)
        inverse[order] = np.arange(len(order))
        return PreparedBlock(order, inverse, VoxelGrid(positions[order], self.config.cell_size))

    def _check_features(self, positions, features):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"expected {self.config.in_channels} feature channels, got shape {features.shape}"
            )
        if len(features) != len(positions):
            raise ShapeError(f"{len(features)} feature rows for {len(positions)} points")
        if not np.isfinite(features).all():
            raise InvalidInputError("features contain non-finite values")
        return features

    def _forward_sorted(self, tape, prep, features_sorted):
        cfg, p = self.config, self.params
        pv = {name: ops.Var(value, name) for name, value in p.items()}
        grid = prep.grid

        def block(x, prefix, stride):
            x = tape.atrous_conv(x, pv[f"{prefix}.weight"], pv[f"{prefix}.bias"], grid, stride)
            x = tape.relu(x)
            if cfg.spatial_attention:
                s = tape.spatial_attention(x, pv[f"{prefix}.sa_kernel"], pv[f"{prefix}.sa_bias"])
                x = tape.scale_rows(x, s)
            return x

        x = inputs = ops.Var(features_sorted, "input")
        for i, s in enumerate(cfg.cascade_strides):
            x = block(x, f"cascade{i}", s)
        branches = [block(x, f"parallel{i}", s) for i, s in enumerate(cfg.parallel_strides)]
        x = tape.concat(branches)
        if cfg.channel_attention:
            c = tape.channel_attention(
                x,
                pv["channel_att.dense1.weight"], pv["channel_att.dense1.bias"],
                pv["channel_att.dense2.weight"], pv["channel_att.dense2.bias"],
            )
            x = tape.scale_cols(x, c)
        logits = tape.atrous_conv(x, pv["classifier.weight"], pv["classifier.bias"], grid, 1)
        return logits, pv, inputs

    def forward(self, positions, features, prepared=None):
        """Per-point class logits (n, n_classes) in input order."""
        positions = check_positions(positions)
        features = self._check_features(positions, features)
        prep = prepared or self.prepare(positions, features)
        logits, _, _ = self._forward_sorted(ops.Tape(), prep, features[prep.order])
        return logits.value[prep.inverse]

    def loss_and_grads(self, positions, features, labels, prepared=None, input_grad=False):
        """Mean cross-entropy over the block, parameter gradients and logits.

        With ``input_grad=True`` the gradient with respect to ``features``
        (input order) is appended to the returned tuple.
        """
        positions = check_positions(positions)
        features = self._check_features(positions, features)
        labels = np.asarray(labels).reshape(-1)
        prep = prepared or self.prepare(positions, features)
        tape = ops.Tape()
        logits, pv, inputs = self._forward_sorted(tape, prep, features[prep.order])
        loss = tape.cross_entropy(logits, labels[prep.order])
        tape.backward(loss)
        grads = OrderedDict(
            (k, v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in pv.items()
        )
        result = (float(loss.value), grads, logits.value[prep.inverse])
        if input_grad:
            result += (inputs.grad[prep.inverse],)
        return result

    def predict(self, positions, features, prepared=None):
        return predict_from_logits(self.forward(positions, features, prepared))

    # -- checkpoints -----------------------------------------------------------

    def to_bytes(self):
        cfg = self.config
        flags = (_FLAG_SPATIAL if cfg.spatial_attention else 0) | (
            _FLAG_CHANNEL if cfg.channel_attention else 0
        )
        out = [MAGIC, struct.pack("<IIdQI", cfg.in_channels, cfg.n_classes, cfg.cell_size, cfg.seed, flags)]
        for strides, widths in (
            (cfg.cascade_strides, cfg.cascade_channels),
            (cfg.parallel_strides, cfg.parallel_channels),
        ):
            out.append(struct.pack("<I", len(strides)))
            out.append(struct.pack(f"<{len(strides)}I", *strides))
            out.append(struct.pack(f"<{len(widths)}I", *widths))
        for value in self.params.values():
            out.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data):
        if data[:len(MAGIC)] != MAGIC:
            raise ParseError("not a checkpoint (bad magic)")
        try:
            pos = len(MAGIC)
            c_in, n_cls, cell, seed, flags = struct.unpack_from("<IIdQI", data, pos)
            pos += struct.calcsize("<IIdQI")
            lists = []
            for _ in range(2):
                (m,) = struct.unpack_from("<I", data, pos)
                pos += 4
                strides = struct.unpack_from(f"<{m}I", data, pos)
                pos += 4 * m
                widths = struct.unpack_from(f"<{m}I", data, pos)
                pos += 4 * m
                lists.append((strides, widths))
        except struct.error as exc:
            raise ParseError(f"truncated checkpoint header: {exc}") from None
        config = NetworkConfig(
            in_channels=c_in, n_classes=n_cls, cell_size=cell, seed=seed,
            cascade_strides=lists[0][0], cascade_channels=lists[0][1],
            parallel_strides=lists[1][0], parallel_channels=lists[1][1],
            spatial_attention=bool(flags & _FLAG_SPATIAL),
            channel_attention=bool(flags & _FLAG_CHANNEL),
        )
        try:
            config.validate()
        except ConfigError as exc:
            raise ParseError(f"invalid checkpoint header: {exc}") from None
        params = OrderedDict()
        for name, shape, _, _ in _layer_shapes(config):
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * size > len(data):
                raise ParseError("truncated checkpoint parameters")
            params[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(shape)
            pos += 8 * size
        if pos != len(data):
            raise ParseError(f"{len(data) - pos} trailing bytes in checkpoint")
        return cls(config, params)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def build_network(config=None, **overrides):
    """Build a freshly initialised :class:`Network` from ``config`` and keyword overrides."""
    config = replace(config or NetworkConfig(), **overrides)
    return Network.initialize(config)


def forward(net, positions, features):
    return net.forward(positions, features)


def predict_from_logits(logits):
    """Arg-max per row; ties resolve to the smaller class id."""
    return np.asarray(logits).argmax(axis=1)


def predict(net, positions, features):
    return net.predict(positions, features)
