"""Detection network assembly, forward pass and checkpoint persistence.

The backbone is four stages of [3x3 conv, optional batchnorm, ReLU] blocks,
each stage followed by 2x2 max pooling, so the total stride is 16.  The
head is a 3x3 conv block plus a 1x1 conv down to 8 channels: channels 0-1
are object/non-object logits, channels 2-7 are the local affine parameters.
The edge-augmented variant concatenates the frozen Sobel features with the
RGB input, changing only the first conv's input channel count.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .edges import EdgeBranch

STRIDE = 16
OUTPUT_CHANNELS = 8
NUM_STAGES = 4

CHECKPOINT_MAGIC = b"WPLT"
CHECKPOINT_VERSION = 1

VARIANTS = ("baseline", "edge_augmented")


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    """Bad magic, truncated payload or malformed record."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    """Parameter names/shapes do not match the receiving model."""


@dataclass(frozen=True)
class NetworkConfig:
    variant: str = "edge_augmented"
    input_height: int = 256
    input_width: int = 256
    base_channels: int = 16
    blocks_per_stage: int = 2
    use_batchnorm: bool = True
    detection_threshold: float = 0.5
    alpha: float = 7.75

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("input_height", "input_width"):
            v = getattr(self, name)
            if v <= 0 or v % STRIDE != 0:
                raise ConfigError(f"{name} must be a positive multiple of {STRIDE}, got {v}")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be positive")
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be positive")
        if not 0.0 < self.detection_threshold < 1.0:
            raise ConfigError("detection_threshold must be in (0, 1)")
        if self.alpha <= 0.0:
            raise ConfigError("alpha must be positive")

    @property
    def stride(self) -> int:
        return STRIDE

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.input_height // STRIDE, self.input_width // STRIDE

    @property
    def input_channels(self) -> int:
        return 6 if self.variant == "edge_augmented" else 3


_CONFIG_FIELDS = (
    ("variant", str),
    ("input_height", int),
    ("input_width", int),
    ("base_channels", int),
    ("blocks_per_stage", int),
    ("use_batchnorm", bool),
    ("detection_threshold", float),
    ("alpha", float),
)


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def parse_value(text: str, kind):
    text = text.strip()
    if kind is bool:
        if text not in ("true", "false"):
            raise ConfigError(f"expected true/false, got {text!r}")
        return text == "true"
    return kind(text)


def network_config_to_text(cfg: NetworkConfig) -> str:
    lines = [f"{name} = {format_value(getattr(cfg, name))}" for name, _ in _CONFIG_FIELDS]
    return "\n".join(lines) + "\n"


def network_config_from_text(text: str) -> NetworkConfig:
    values = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"malformed config line: {raw!r}")
        key, _, val = line.partition("=")
        values[key.strip()] = val
    kwargs = {}
    for name, kind in _CONFIG_FIELDS:
        if name in values:
            kwargs[name] = parse_value(values[name], kind)
    unknown = set(values) - {name for name, _ in _CONFIG_FIELDS}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return NetworkConfig(**kwargs)


class _ConvBlock:
    def __init__(self, name: str, cin: int, cout: int, use_bn: bool, rng):
        std = np.sqrt(2.0 / (3 * 3 * cin))
        self.kernel = Parameter(f"{name}.conv.kernel", rng.normal(0.0, std, (3, 3, cin, cout)))
        self.use_bn = use_bn
        if use_bn:
            # no conv bias under batchnorm: the mean subtraction absorbs it
            # (beta carries the offset), and a dead parameter would fail any
            # meaningful gradient check
            self.bias = None
            self.gamma = Parameter(f"{name}.bn.gamma", np.ones(cout))
            self.beta = Parameter(f"{name}.bn.beta", np.zeros(cout))
            self.running_mean = Parameter(
                f"{name}.bn.running_mean", np.zeros(cout), trainable=False
            )
            self.running_var = Parameter(
                f"{name}.bn.running_var", np.ones(cout), trainable=False
            )
        else:
            self.bias = Parameter(f"{name}.conv.bias", np.zeros(cout))

    def parameters(self) -> list[Parameter]:
        ps = [self.kernel]
        if self.use_bn:
            ps += [self.gamma, self.beta, self.running_mean, self.running_var]
        else:
            ps.append(self.bias)
        return ps

    def forward(self, x: Tensor, training: bool) -> Tensor:
        x = ad.conv2d(x, self.kernel, self.bias, stride=1, padding="same")
        if self.use_bn:
            x = ad.batchnorm(
                x, self.gamma, self.beta, self.running_mean, self.running_var, training
            )
        return ad.relu(x)


class Model:
    def __init__(self, config: NetworkConfig, seed: int):
        self.config = config
        rng = np.random.default_rng(seed)
        self.edge = EdgeBranch() if config.variant == "edge_augmented" else None

        self.blocks: list[list[_ConvBlock]] = []
        cin = config.input_channels
        for stage in range(NUM_STAGES):
            cout = config.base_channels * (2**stage)
            stage_blocks = []
            for b in range(config.blocks_per_stage):
                stage_blocks.append(
                    _ConvBlock(f"stage{stage}.block{b}", cin, cout, config.use_batchnorm, rng)
                )
                cin = cout
            self.blocks.append(stage_blocks)

        self.head = _ConvBlock("head.conv3", cin, cin, config.use_batchnorm, rng)
        std = np.sqrt(2.0 / cin)
        self.out_kernel = Parameter(
            "head.out.kernel", rng.normal(0.0, std, (1, 1, cin, OUTPUT_CHANNELS))
        )
        # channels 2 and 5 are the affine diagonal, clamped by max(., 0) in
        # the decode; starting them at 1 keeps the initial map near identity
        # and out of the clamp's dead zone, where the gradient vanishes
        out_bias = np.zeros(OUTPUT_CHANNELS)
        out_bias[2] = 1.0
        out_bias[5] = 1.0
        self.out_bias = Parameter("head.out.bias", out_bias)

    def parameters(self) -> list[Parameter]:
        """Full registry in a stable order (frozen Sobel kernels included)."""
        ps: list[Parameter] = []
        if self.edge is not None:
            ps += self.edge.parameters()
        for stage_blocks in self.blocks:
            for block in stage_blocks:
                ps += block.parameters()
        ps += self.head.parameters()
        ps += [self.out_kernel, self.out_bias]
        return ps

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def forward(self, images, training: bool = False) -> Tensor:
        """Run the network; returns the B x M x N x 8 feature grid tensor.

        Channels 0-1 are raw object/non-object logits (softmax is applied by
        the loss and the decoder), channels 2-7 the affine parameters.
        """
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float64))
        cfg = self.config
        if x.data.ndim != 4 or x.data.shape[1:] != (cfg.input_height, cfg.input_width, 3):
            raise ad.ShapeError(
                f"expected B x {cfg.input_height} x {cfg.input_width} x 3 input, got {x.data.shape}"
            )
        if self.edge is not None:
            x = self.edge.fuse(x)
        for stage_blocks in self.blocks:
            for block in stage_blocks:
                x = block.forward(x, training)
            x = ad.maxpool2d(x)
        x = self.head.forward(x, training)
        return ad.conv2d(x, self.out_kernel, self.out_bias, stride=1, padding="same")


def build_model(config: NetworkConfig, seed: int) -> Model:
    return Model(config, seed)


def count_parameters(model: Model) -> tuple[int, int]:
    """(trainable, frozen) scalar counts over the parameter registry."""
    trainable = sum(p.data.size for p in model.parameters() if p.trainable)
    frozen = sum(p.data.size for p in model.parameters() if not p.trainable)
    return trainable, frozen


def save_checkpoint(
    model: Model, path, step_count: int = 0, include_adam: bool = True
) -> None:
    """Binary little-endian checkpoint; load(save(m)) is bit-exact."""
    params = model.parameters()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg_text = network_config_to_text(model.config).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_text)))
    buf.write(cfg_text)
    buf.write(struct.pack("<I", len(params)))
    for p in params:
        name = p.name.encode("utf-8")
        buf.write(struct.pack("<I", len(name)))
        buf.write(name)
        buf.write(struct.pack("<B", 1 if p.trainable else 0))
        buf.write(struct.pack("<I", p.data.ndim))
        for d in p.data.shape:
            buf.write(struct.pack("<I", d))
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    buf.write(struct.pack("<I", step_count))
    buf.write(struct.pack("<B", 1 if include_adam else 0))
    if include_adam:
        for p in params:
            if p.trainable:
                buf.write(np.ascontiguousarray(p.adam_m, dtype="<f8").tobytes())
                buf.write(np.ascontiguousarray(p.adam_v, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError("truncated checkpoint file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]


def _read_records(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    r = _Reader(raw)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )
    cfg_text = r.take(r.u32()).decode("utf-8")
    config = network_config_from_text(cfg_text)
    n_params = r.u32()
    records = []
    for _ in range(n_params):
        name = r.take(r.u32()).decode("utf-8")
        trainable = bool(r.u8())
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).copy()
        records.append((name, trainable, data))
    step_count = r.u32()
    adam = None
    if r.u8():
        adam = {}
        for name, trainable, data in records:
            if trainable:
                m = np.frombuffer(r.take(8 * data.size), dtype="<f8").reshape(data.shape).copy()
                v = np.frombuffer(r.take(8 * data.size), dtype="<f8").reshape(data.shape).copy()
                adam[name] = (m, v)
    return config, records, step_count, adam


def load_into(model: Model, path) -> int:
    """Load parameters into an existing model; returns the stored step count.

    Raises CheckpointShapeError when the file's parameter names or shapes do
    not match the model (e.g. an edge-variant checkpoint into a baseline).
    """
    _, records, step_count, adam = _read_records(path)
    by_name = {p.name: p for p in model.parameters()}
    rec_names = [name for name, _, _ in records]
    if sorted(rec_names) != sorted(by_name):
        missing = sorted(set(by_name) - set(rec_names))
        extra = sorted(set(rec_names) - set(by_name))
        raise CheckpointShapeError(
            f"parameter registry mismatch (missing={missing}, unexpected={extra})"
        )
    for name, trainable, data in records:
        p = by_name[name]
        if p.data.shape != data.shape:
            raise CheckpointShapeError(
                f"shape mismatch for {name}: checkpoint {data.shape} vs model {p.data.shape}"
            )
        p.tensor.data = data
        p.trainable = trainable
        p.tensor.requires_grad = trainable
        p.adam_m = np.zeros_like(data)
        p.adam_v = np.zeros_like(data)
    if adam is not None:
        for name, (m, v) in adam.items():
            by_name[name].adam_m = m
            by_name[name].adam_v = v
    return step_count


def load_checkpoint(path) -> tuple[Model, int]:
    """Rebuild the model described by the embedded config and load weights."""
    config, _, _, _ = _read_records(path)
    model = Model(config, seed=0)
    step_count = load_into(model, path)
    return model, step_count
