"""Symmetric dual-loss 3D convolutional autoencoder.

The encoder maps a ``(32n)^3`` occupancy volume through strided 3D
convolutions and one max-pool into fully-connected layers whose third layer
is the linear ``3J``-wide joint vector. A 216-wide layer is reshaped into a
``6^3`` seed volume that transposed convolutions grow back to ``(32n)^3``.
Two skip connections average encoder activations into decoder activations of
the same spatial size.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from pvhnet import autodiff as ad
from pvhnet.autodiff import Parameter, Tensor
from pvhnet.errors import ShapeMismatch, UnrealizableSchedule, UnsupportedFactor

# (channels, 5^3 filter?, max-pool?) per layer at each scale
_ENCODER_TABLE = {
    1: [(96, True, False), (96, True, False), (96, False, False), (96, False, True), (96, False, False)],
    2: [(32, True, False), (64, True, False), (96, False, False), (96, False, True), (96, False, False),
        (96, False, False)],
    4: [(32, True, False), (32, True, False), (32, False, False), (64, False, True), (96, False, False),
        (96, False, False), (96, False, False)],
}
_DECODER_TABLE = {
    1: [(96, False), (96, False), (96, False), (96, False), (64, True), (1, True)],
    2: [(96, False), (96, False), (96, False), (96, False), (64, False), (64, False), (32, True), (1, True)],
    4: [(96, False), (96, False), (96, False), (96, False), (64, False), (64, False), (32, False),
        (32, False), (32, True), (1, True)],
}
BOTTLENECK_SPATIAL = 4


@dataclass
class LayerSpec:
    channels: int
    kernel: int = 3
    stride: int = 1
    pool: bool = False
    padding: str = "same"


def _halvings(size: int, target: int) -> int:
    h = math.log2(size / target)
    if h != int(h) or h < 0:
        raise UnrealizableSchedule(f"cannot halve {size} down to {target}")
    return int(h)


def default_encoder(scale: int, base_resolution: int = 32, channels=None) -> list[LayerSpec]:
    """Published encoder layer schedule with strides chosen to reach a 4^3 bottleneck.

    The first layer keeps the full input resolution so it can feed a skip.
    The fourth layer max-pools, and every layer from the second onward
    strides 2 until the remaining halvings are used up.
    """
    table = _ENCODER_TABLE[scale]
    strides = _halvings(base_resolution * scale, BOTTLENECK_SPATIAL) - 1
    layers = []
    for i, (ch, big, pool) in enumerate(table):
        stride = 1
        if i > 0 and strides > 0:
            stride, strides = 2, strides - 1
        layers.append(LayerSpec(ch if channels is None else channels[i], 5 if big else 3, stride, pool))
    if strides > 0:
        raise UnrealizableSchedule(f"encoder for n={scale} has too few layers to reach 4^3")
    return layers


def default_decoder(scale: int, base_resolution: int = 32, seed_edge: int = 6,
                    channels=None) -> list[LayerSpec]:
    """Published decoder layer schedule: a valid 3^3 transposed conv lifts the seed from 6^3 to
    8^3, then the layers just before the output double the size."""
    table = _DECODER_TABLE[scale]
    first = seed_edge + 2
    ups = _halvings(base_resolution * scale, first)
    layers = []
    n = len(table)
    for i, (ch, big) in enumerate(table):
        c = ch if channels is None else channels[i]
        if i == 0:
            layers.append(LayerSpec(c, 3, 1, padding="valid"))
            continue
        stride = 2 if n - 1 - ups <= i < n - 1 else 1
        layers.append(LayerSpec(c, 5 if big else 3, stride))
    return layers


def _specs(items):
    return [item if isinstance(item, LayerSpec) else LayerSpec(**item) for item in items]


@dataclass
class NetworkConfig:
    scale: int = 1
    joint_count: int = 26
    encoder: list[LayerSpec] = field(default_factory=list)
    decoder: list[LayerSpec] = field(default_factory=list)
    hidden_widths: tuple[int, ...] = (1024, 1024)
    seed_edge: int = 6
    skips: list[tuple[int, int]] | None = None
    lam: float = 1e-3
    base_resolution: int = 32
    coarse_resolution: int = 32
    dtype: str = "float32"
    batch_size: int = 8
    rho: float = 0.95
    epsilon: float = 1e-6
    init_seed: int = 0

    def __post_init__(self):
        if self.scale not in (1, 2, 4):
            raise UnsupportedFactor(f"scale must be one of {{1, 2, 4}}, got {self.scale}")
        if not self.encoder:
            self.encoder = default_encoder(self.scale, self.base_resolution)
        if not self.decoder:
            self.decoder = default_decoder(self.scale, self.base_resolution, self.seed_edge)
        self.encoder = _specs(self.encoder)
        self.decoder = _specs(self.decoder)
        self.hidden_widths = tuple(int(w) for w in self.hidden_widths)
        if self.skips is not None:
            self.skips = [tuple(int(v) for v in s) for s in self.skips]

    @classmethod
    def published(cls, scale: int = 1, joint_count: int = 26, **kw) -> "NetworkConfig":
        return cls(scale=scale, joint_count=joint_count, **kw)

    @classmethod
    def reduced(cls, scale: int = 1, channels: int = 8, hidden_widths=(256, 256),
                joint_count: int = 17, **kw) -> "NetworkConfig":
        """Published layer counts and filter sizes with every hidden channel
        count set to ``channels`` (the output layer keeps one channel)."""
        base = kw.pop("base_resolution", 32)
        n_enc = len(_ENCODER_TABLE[scale])
        n_dec = len(_DECODER_TABLE[scale])
        enc = default_encoder(scale, base, [channels] * n_enc)
        dec = default_decoder(scale, base, kw.get("seed_edge", 6), [channels] * (n_dec - 1) + [1])
        return cls(scale=scale, joint_count=joint_count, encoder=enc, decoder=dec,
                   hidden_widths=hidden_widths, base_resolution=base, **kw)

    @property
    def input_resolution(self) -> int:
        return self.base_resolution * self.scale

    @property
    def latent_width(self) -> int:
        return 3 * self.joint_count

    @property
    def seed_width(self) -> int:
        return self.seed_edge ** 3

    @property
    def bottleneck_widths(self) -> tuple[int, ...]:
        return (*self.hidden_widths, self.latent_width, self.seed_width)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        if self.skips is not None:
            d["skips"] = [list(s) for s in self.skips]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        for key in ("encoder", "decoder"):
            if key in d:
                d[key] = _specs(d[key])
        if "hidden_widths" in d:
            d["hidden_widths"] = tuple(d["hidden_widths"])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            from pvhnet.errors import SchemaViolation
            raise SchemaViolation(f"unknown network config keys {sorted(unknown)}",
                                  field=sorted(unknown)[0])
        return cls(**d)


@dataclass
class Plan:
    """Static shape walk of a config."""

    encoder_sizes: list[int]
    flatten_width: int
    decoder_sizes: list[int]
    skips: list[tuple[int, int]]


def plan_network(config: NetworkConfig) -> Plan:
    """Check that a config composes and derive spatial sizes and skip endpoints."""
    size = config.input_resolution
    enc_sizes = []
    for i, spec in enumerate(config.encoder):
        if spec.kernel % 2 == 0 or spec.stride < 1:
            raise UnrealizableSchedule(f"encoder layer {i}: odd kernel and stride >= 1 required")
        size = math.ceil(size / spec.stride)
        if spec.pool:
            if size < 2:
                raise UnrealizableSchedule(f"encoder layer {i}: cannot pool {size}^3")
            size = (size - 2) // 2 + 1
        enc_sizes.append(size)
    if not config.encoder:
        raise UnrealizableSchedule("encoder needs at least one layer")
    flatten = size ** 3 * config.encoder[-1].channels
    size = config.seed_edge
    dec_sizes = []
    for i, spec in enumerate(config.decoder):
        if spec.padding == "valid":
            size = (size - 1) * spec.stride + spec.kernel
        else:
            size = size * spec.stride
        dec_sizes.append(size)
    if not config.decoder or dec_sizes[-1] != config.input_resolution:
        raise UnrealizableSchedule(
            f"decoder reaches {dec_sizes[-1] if dec_sizes else config.seed_edge}^3, "
            f"needs {config.input_resolution}^3")
    if config.decoder[-1].channels != 1:
        raise UnrealizableSchedule("decoder must end in a single channel")
    if config.skips is None:
        skips = []
        for e in range(min(2, len(enc_sizes))):
            matches = [j for j, s in enumerate(dec_sizes[:-1]) if s == enc_sizes[e]]
            if matches:
                skips.append((e, matches[-1]))
    else:
        skips = list(config.skips)
        for e, j in skips:
            if not (0 <= e < len(enc_sizes) and 0 <= j < len(dec_sizes) - 1):
                raise UnrealizableSchedule(f"skip {(e, j)} out of range")
            if enc_sizes[e] != dec_sizes[j]:
                raise UnrealizableSchedule(
                    f"skip {(e, j)} joins {enc_sizes[e]}^3 to {dec_sizes[j]}^3")
    return Plan(enc_sizes, flatten, dec_sizes, skips)


class AutoEncoder:
    """Parameters plus the forward graph of one :class:`NetworkConfig`."""

    def __init__(self, config: NetworkConfig, plan: Plan, params: dict[str, Parameter]):
        self.config = config
        self.plan = plan
        self.params = params
        self._skip_into = {j: e for e, j in plan.skips}

    # parameter groups -------------------------------------------------
    def parameters(self, group: str | None = None) -> list[Parameter]:
        if group is None:
            return list(self.params.values())
        return [p for name, p in self.params.items() if _group_of(name) == group]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in state:
                raise KeyError(f"missing parameter {name}")
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeMismatch(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.astype(p.dtype).copy()

    def checksum(self, group: str | None = None) -> str:
        h = hashlib.sha256()
        for p in self.parameters(group):
            h.update(p.name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    @property
    def encoder_layer_count(self) -> int:
        return len(self.config.encoder)

    @property
    def decoder_layer_count(self) -> int:
        return len(self.config.decoder)

    def output_shape(self, batch: int = 1) -> tuple[int, ...]:
        s = self.plan.decoder_sizes[-1]
        return (batch, s, s, s, 1)

    # graph ------------------------------------------------------------
    def encode(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        p = self.params
        h = x
        skips = []
        for i, spec in enumerate(self.config.encoder):
            h = ad.relu(ad.conv3d(h, p[f"enc{i}.w"], p[f"enc{i}.b"], spec.stride, "same"))
            if spec.pool:
                h, _ = ad.maxpool3d(h, 2, 2)
            skips.append(h)
        h = ad.reshape(h, (h.shape[0], -1))
        k = len(self.config.hidden_widths)
        for i in range(k):
            h = ad.relu(ad.fully_connected(h, p[f"enc_fc{i}.w"], p[f"enc_fc{i}.b"]))
        latent = ad.fully_connected(h, p[f"enc_fc{k}.w"], p[f"enc_fc{k}.b"])
        return latent, skips

    def decode(self, latent: Tensor, skips: list[Tensor]) -> Tensor:
        p = self.params
        e = self.config.seed_edge
        h = ad.relu(ad.fully_connected(latent, p["dec_seed.w"], p["dec_seed.b"]))
        h = ad.reshape(h, (h.shape[0], e, e, e, 1))
        last = len(self.config.decoder) - 1
        for j, spec in enumerate(self.config.decoder):
            size = self.plan.decoder_sizes[j]
            h = ad.deconv3d(h, p[f"dec{j}.w"], p[f"dec{j}.b"], spec.stride, (size,) * 3, spec.padding)
            if j != last:
                h = ad.relu(h)
            if j in self._skip_into:
                s = skips[self._skip_into[j]]
                if f"skip{j}.w" in p:
                    s = ad.conv3d(s, p[f"skip{j}.w"], p[f"skip{j}.b"], 1, "same")
                h = ad.mean_combine(h, s)
        return h

    def forward(self, x) -> tuple[Tensor, Tensor]:
        """Returns ``(latent (B, 3J), volume (B, S, S, S, 1))``."""
        x = ad.as_tensor(x)
        s = self.config.input_resolution
        if x.data.ndim == 4:
            x = Tensor(x.data[None], requires_grad=x.requires_grad)
        if x.shape[1:] != (s, s, s, 1):
            raise ShapeMismatch(f"expected input (B, {s}, {s}, {s}, 1), got {x.shape}")
        if x.dtype != self.config.np_dtype and not x.requires_grad:
            x = Tensor(x.data.astype(self.config.np_dtype))
        latent, skips = self.encode(x)
        return latent, self.decode(latent, skips)

    __call__ = forward


def _group_of(name: str) -> str:
    if name.startswith("enc"):
        return "encoder"
    return "decoder"


def build_network(config: NetworkConfig) -> AutoEncoder:
    """Allocate parameters for ``config`` with seeded fan-in-scaled uniform init.

    ReLU layers draw from ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``; the linear
    latent and output layers use ``sqrt(3/fan_in)``. Biases start at zero.
    """
    plan = plan_network(config)
    rng = np.random.default_rng(config.init_seed)
    dtype = config.np_dtype
    params: dict[str, Parameter] = {}

    def add(name, wshape, bias_len, fan_in, gain):
        limit = math.sqrt(gain / fan_in)
        params[name + ".w"] = Parameter(name + ".w", rng.uniform(-limit, limit, wshape), dtype)
        params[name + ".b"] = Parameter(name + ".b", np.zeros(bias_len), dtype)

    cin = 1
    for i, spec in enumerate(config.encoder):
        k = spec.kernel
        add(f"enc{i}", (k, k, k, cin, spec.channels), spec.channels, k ** 3 * cin, 6.0)
        cin = spec.channels
    widths = [plan.flatten_width, *config.hidden_widths, config.latent_width]
    for k in range(len(widths) - 1):
        gain = 3.0 if k == len(widths) - 2 else 6.0
        add(f"enc_fc{k}", (widths[k], widths[k + 1]), widths[k + 1], widths[k], gain)
    add("dec_seed", (config.latent_width, config.seed_width), config.seed_width,
        config.latent_width, 6.0)
    enc_channels = [s.channels for s in config.encoder]
    skip_into = {j: e for e, j in plan.skips}
    last = len(config.decoder) - 1
    cin = 1
    for j, spec in enumerate(config.decoder):
        k = spec.kernel
        fan_in = max(1.0, k ** 3 * cin / spec.stride ** 3)
        add(f"dec{j}", (k, k, k, spec.channels, cin), spec.channels, fan_in,
            3.0 if j == last else 6.0)
        if j in skip_into and enc_channels[skip_into[j]] != spec.channels:
            ce = enc_channels[skip_into[j]]
            add(f"skip{j}", (1, 1, 1, ce, spec.channels), spec.channels, ce, 3.0)
        cin = spec.channels
    return AutoEncoder(config, plan, params)
