"""
The segmentation network: a VNet-lite encoder-decoder over the three input
channels [x_b, x_fu, x_d] with three prediction heads.

Heads 1 and 2 predict all lesions (baseline / follow-up reading); head 3
predicts new lesions from the trunk features plus the hidden maps of heads 1
and 2.
"""

import json
import os
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from coactseg import config
from coactseg import tensor as T
from coactseg.tensor import Tensor
from coactseg.utils import ConfigError, ShapeError, VolumeFormatError, logger

CHECKPOINT_MAGIC = b"COACTCKP"
CHECKPOINT_VERSION = 1
CHECKPOINT_HEADER = struct.Struct("<8sIQQI")
HEADS = ("p_al_1", "p_al_2", "p_nl")


@dataclass(frozen=True)
class SegNetConfig:
    levels: int = config.NETWORK_LEVELS
    base_channels: int = config.BASE_CHANNELS
    head_channels: int = config.HEAD_CHANNELS
    prelu_slope_init: float = config.PRELU_SLOPE_INIT
    param_seed: int = config.DEFAULT_SEED
    in_channels: int = 3

    def validate(self) -> None:
        if self.levels < 2:
            raise ConfigError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels < 2:
            raise ConfigError(f"base_channels must be >= 2, got {self.base_channels}")
        if self.head_channels < 1:
            raise ConfigError(f"head_channels must be >= 1, got {self.head_channels}")

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)


@dataclass
class PredictionTriple:
    """p_al_1, p_al_2 and p_nl, each of shape (N, 1, D, H, W)."""

    p_al_1: Tensor
    p_al_2: Tensor
    p_nl: Tensor

    def as_dict(self) -> Dict[str, Tensor]:
        return {name: getattr(self, name) for name in HEADS}

    def select(self, index: int) -> "PredictionTriple":
        """Predictions of one patch, keeping the batch axis."""
        window = (slice(index, index + 1),)
        return PredictionTriple(*(T.slice_(getattr(self, name), window) for name in HEADS))


class SegNet:
    """Parameter container; ``forward`` is a separate function over it."""

    def __init__(self, cfg: SegNetConfig, params: "OrderedDict[str, Tensor]"):
        self.config = cfg
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return list(self.params.items())

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def parameter_count(self, prefix: str = "") -> int:
        return sum(t.size for name, t in self.params.items() if name.startswith(prefix))

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.zero_grad()


def _channels(cfg: SegNetConfig, level: int) -> int:
    return cfg.base_channels * 2 ** level


def _layout(cfg: SegNetConfig) -> List[Tuple[str, str, Tuple[int, ...]]]:
    """(name, kind, shape) of every parameter, in creation order."""
    layout = []

    def conv(name, c_in, c_out, k, transposed=False):
        shape = (c_in, c_out, k, k, k) if transposed else (c_out, c_in, k, k, k)
        layout.append((f"{name}.weight", "weight", shape))
        layout.append((f"{name}.bias", "bias", (c_out,)))

    def act(name, channels):
        layout.append((f"{name}.slope", "slope", (channels,)))

    def block(name, channels):
        conv(f"{name}.conv1", channels, channels, 3)
        act(f"{name}.act1", channels)
        conv(f"{name}.conv2", channels, channels, 3)
        act(f"{name}.act2", channels)

    c0 = _channels(cfg, 0)
    conv("enc0.in", cfg.in_channels, c0, 3)
    act("enc0.in_act", c0)
    block("enc0.block", c0)
    for level in range(1, cfg.levels):
        c_prev, c = _channels(cfg, level - 1), _channels(cfg, level)
        conv(f"enc{level}.down", c_prev, c, 2)
        act(f"enc{level}.down_act", c)
        block(f"enc{level}.block", c)
    for level in range(cfg.levels - 2, -1, -1):
        c_up, c = _channels(cfg, level + 1), _channels(cfg, level)
        conv(f"dec{level}.up", c_up, c, 2, transposed=True)
        act(f"dec{level}.up_act", c)
        conv(f"dec{level}.fuse", 2 * c, c, 3)
        act(f"dec{level}.fuse_act", c)
        block(f"dec{level}.block", c)
    h = cfg.head_channels
    for head in ("head1", "head2"):
        conv(f"{head}.hidden", c0, h, 3)
        act(f"{head}.act", h)
        conv(f"{head}.out", h, 1, 1)
    conv("head3.hidden", c0 + 2 * h, h, 3)
    act("head3.act", h)
    conv("head3.out", h, 1, 1)
    return layout


def init_params(cfg: SegNetConfig) -> SegNet:
    """Fan-in scaled uniform initialization, deterministic in ``param_seed``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.param_seed)
    params = OrderedDict()
    fan_in = None
    for name, kind, shape in _layout(cfg):
        if kind == "weight":
            transposed = name.split(".")[1] == "up"
            fan_in = (shape[0] if transposed else shape[1]) * int(np.prod(shape[2:]))
            bound = 1.0 / np.sqrt(fan_in)
            values = rng.uniform(-bound, bound, size=shape)
        elif kind == "bias":
            bound = 1.0 / np.sqrt(fan_in)
            values = rng.uniform(-bound, bound, size=shape)
        else:
            values = np.full(shape, cfg.prelu_slope_init)
        params[name] = Tensor(values, requires_grad=True)
    return SegNet(cfg, params)


def _conv(net, name, x, padding=1, stride=1):
    return T.conv3d(x, net[f"{name}.weight"], net[f"{name}.bias"], stride=stride, padding=padding)


def _block(net, name, x):
    h = T.prelu(_conv(net, f"{name}.conv1", x), net[f"{name}.act1.slope"])
    h = _conv(net, f"{name}.conv2", h)
    return T.prelu(h + x, net[f"{name}.act2.slope"])


def _head_hidden(net, name, features):
    return T.prelu(_conv(net, f"{name}.hidden", features), net[f"{name}.act.slope"])


def _as_input(x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 3:
        x = Tensor(x.values[None, None])
    elif x.ndim == 4:
        x = Tensor(x.values[:, None])
    if x.ndim != 5 or x.shape[1] != 1:
        raise ShapeError(f"inputs must be single-channel patches, got shape {x.shape}")
    return x


def forward(net: SegNet, x_b, x_fu, x_d, sever_head_links: bool = False) -> PredictionTriple:
    """
    Run the network.

    Args:
        net: Model parameters
        x_b, x_fu, x_d: Equal-shape inputs of shape (N, 1, D, H, W), (N, D, H, W) or (D, H, W)
        sever_head_links: Zero the head-1/2 maps fed into head 3 (wiring check)

    Returns:
        PredictionTriple of sigmoid maps with the input's spatial extent
    """
    cfg = net.config
    x_b, x_fu, x_d = _as_input(x_b), _as_input(x_fu), _as_input(x_d)
    if not (x_b.shape == x_fu.shape == x_d.shape):
        raise ShapeError(f"input shapes differ: {x_b.shape}, {x_fu.shape}, {x_d.shape}")
    spatial = x_b.shape[2:]
    if any(s % cfg.divisor for s in spatial):
        raise ShapeError(f"spatial extent {spatial} is not divisible by {cfg.divisor}")

    x = T.concat([x_b, x_fu, x_d], axis=1)
    h = T.prelu(_conv(net, "enc0.in", x), net["enc0.in_act.slope"])
    skips = [_block(net, "enc0.block", h)]
    for level in range(1, cfg.levels):
        down = T.prelu(_conv(net, f"enc{level}.down", skips[-1], padding=0, stride=2),
                       net[f"enc{level}.down_act.slope"])
        skips.append(_block(net, f"enc{level}.block", down))

    h = skips[-1]
    for level in range(cfg.levels - 2, -1, -1):
        up = T.conv3d_transposed(h, net[f"dec{level}.up.weight"], net[f"dec{level}.up.bias"], stride=2)
        up = T.prelu(up, net[f"dec{level}.up_act.slope"])
        fused = T.prelu(_conv(net, f"dec{level}.fuse", T.concat([up, skips[level]], axis=1)),
                        net[f"dec{level}.fuse_act.slope"])
        h = _block(net, f"dec{level}.block", fused)

    hidden1 = _head_hidden(net, "head1", h)
    hidden2 = _head_hidden(net, "head2", h)
    p_al_1 = T.sigmoid(_conv(net, "head1.out", hidden1, padding=0))
    p_al_2 = T.sigmoid(_conv(net, "head2.out", hidden2, padding=0))

    if sever_head_links:
        hidden1 = Tensor(np.zeros(hidden1.shape))
        hidden2 = Tensor(np.zeros(hidden2.shape))
    hidden3 = _head_hidden(net, "head3", T.concat([h, hidden1, hidden2], axis=1))
    p_nl = T.sigmoid(_conv(net, "head3.out", hidden3, padding=0))
    return PredictionTriple(p_al_1, p_al_2, p_nl)


# checkpoints ----------------------------------------------------------------

def save_checkpoint(net: SegNet, path: str, seed: int = 0, iteration: int = 0) -> None:
    """
    Write parameters and config.

    Layout (little-endian): magic "COACTCKP", u32 version, u64 root seed,
    u64 iteration, u32 config-JSON length, config JSON, u32 tensor count, then per
    tensor: u16 name length, name, u8 ndim, ndim x u64 shape, f64 data.
    """
    cfg_bytes = json.dumps(asdict(net.config), sort_keys=True).encode("utf-8")
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, int(seed),
                                            int(iteration), len(cfg_bytes)))
        handle.write(cfg_bytes)
        handle.write(struct.pack("<I", len(net.params)))
        for name, tensor in net.params.items():
            encoded = name.encode("utf-8")
            handle.write(struct.pack("<H", len(encoded)))
            handle.write(encoded)
            handle.write(struct.pack("<B", tensor.ndim))
            handle.write(struct.pack(f"<{tensor.ndim}Q", *tensor.shape))
            handle.write(tensor.values.astype("<f8").tobytes(order="C"))


class _Reader:
    def __init__(self, raw: bytes, path: str):
        self.raw, self.path, self.offset = raw, path, 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.raw):
            raise VolumeFormatError(f"{self.path}: truncated checkpoint")
        values = struct.unpack_from(fmt, self.raw, self.offset)
        self.offset += size
        return values

    def bytes(self, count: int) -> bytes:
        if self.offset + count > len(self.raw):
            raise VolumeFormatError(f"{self.path}: truncated checkpoint")
        chunk = self.raw[self.offset:self.offset + count]
        self.offset += count
        return chunk


def load_checkpoint(path: str) -> Tuple[SegNet, Dict[str, int]]:
    """
    Read a checkpoint.

    Returns:
        The network and a header dict with ``seed`` and ``iteration``
    """
    with open(path, "rb") as handle:
        raw = handle.read()
    reader = _Reader(raw, path)
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic, not a checkpoint")
    _, version, seed, iteration, cfg_len = reader.take(CHECKPOINT_HEADER.format)
    if version != CHECKPOINT_VERSION:
        raise VolumeFormatError(
            f"{path}: checkpoint version {version} does not match {CHECKPOINT_VERSION}")
    cfg = SegNetConfig(**json.loads(reader.bytes(cfg_len).decode("utf-8")))
    expected = {name: shape for name, _, shape in _layout(cfg)}
    (count,) = reader.take("<I")
    params = OrderedDict()
    for _ in range(count):
        (name_len,) = reader.take("<H")
        name = reader.bytes(name_len).decode("utf-8")
        (ndim,) = reader.take("<B")
        shape = reader.take(f"<{ndim}Q")
        data = np.frombuffer(reader.bytes(8 * int(np.prod(shape))), dtype="<f8")
        if expected.get(name) != tuple(shape):
            raise VolumeFormatError(f"{path}: unexpected parameter {name} with shape {shape}")
        params[name] = Tensor(data.reshape(shape).astype(np.float64), requires_grad=True)
    if list(params) != list(expected):
        raise VolumeFormatError(f"{path}: parameter table does not match the configuration")
    logger.debug(f"Loaded checkpoint {path} (iteration {iteration})")
    return SegNet(cfg, params), {"seed": int(seed), "iteration": int(iteration)}


# verification ---------------------------------------------------------------

def check_model_gradients(net: SegNet, loss_fn: Callable[[SegNet], Tensor],
                          eps: float = config.GRADCHECK_EPS, n_coords: Optional[int] = 6,
                          seed: int = 0,
                          shrink_steps: int = config.GRADCHECK_SHRINK_STEPS) -> Dict[str, float]:
    """
    Finite-difference check of every parameter tensor of ``net``.

    Args:
        net: Model to check
        loss_fn: Deterministic scalar loss of the model
        eps: Finite-difference step
        n_coords: Coordinates sampled per tensor (None: all)
        seed: Seed of the coordinate sampler
        shrink_steps: Smaller-step retries for coordinates sitting on a PReLU kink

    Returns:
        Maximum relative error per parameter name
    """
    rng = np.random.default_rng(seed)
    errors = {}
    for name, tensor in net.named_parameters():
        net.zero_grad()
        errors[name] = T.grad_check(lambda _: loss_fn(net), tensor, eps=eps,
                                    n_coords=n_coords, rng=rng,
                                    shrink_steps=shrink_steps)
    net.zero_grad()
    return errors
