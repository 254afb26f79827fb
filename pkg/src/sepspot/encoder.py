"""RepVGG-style convolutional encoder.

Train-form blocks sum a 3x3 conv+BN branch, a 1x1 conv+BN branch and (when
shapes allow) a BN-only identity branch before a single ReLU. ``fuse`` folds
all of that into one 3x3 conv with bias. Only the time axis can drop its
padding; frequency padding is always "same".
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensor as T
from .tensor import BatchNormParams, ConvSpec, Tensor, WindowUnderflowError

PAD_MODES = ("same", "none")


class EncoderUnderflowError(WindowUnderflowError):
    def __init__(self, length: int, minimum: int):
        super().__init__(
            f"input too short for pad-free encoder: {length} frames, minimum T is {minimum}",
            axis="time",
        )
        self.length = length
        self.minimum = minimum


@dataclass(frozen=True)
class EncoderConfig:
    blocks: tuple[int, ...] = (1, 2, 2, 1)
    channels: tuple[int, ...] = (16, 32, 64, 128)
    time_strides: tuple[int, ...] = (1, 2, 2, 1)
    freq_strides: tuple[int, ...] = (1, 2, 2, 2)
    in_bins: int = 60
    pad_time: str = "same"

    def __post_init__(self):
        for name in ("blocks", "channels", "time_strides", "freq_strides"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        n = len(self.blocks)
        if not n or any(
            len(v) != n for v in (self.channels, self.time_strides, self.freq_strides)
        ):
            raise ValueError("blocks, channels, time_strides, freq_strides need equal non-zero length")
        if min(self.blocks) < 1 or min(self.channels) < 1:
            raise ValueError("every stage needs >= 1 block and >= 1 channel")
        if min(self.time_strides) < 1 or min(self.freq_strides) < 1:
            raise ValueError("strides must be >= 1")
        if self.pad_time not in PAD_MODES:
            raise ValueError(f"pad_time must be one of {PAD_MODES}, got {self.pad_time!r}")
        if self.in_bins < 1:
            raise ValueError("in_bins must be >= 1")

    @property
    def c_r(self) -> int:
        """Total down-sampling ratio on the time axis."""
        return int(np.prod(self.time_strides))

    def with_pad_time(self, mode: str) -> "EncoderConfig":
        return replace(self, pad_time=mode)

    def conv_specs(self) -> list[ConvSpec]:
        specs = []
        cin = 1
        for n, cout, st, sf in zip(self.blocks, self.channels, self.time_strides, self.freq_strides):
            for i in range(n):
                stride = (st, sf) if i == 0 else (1, 1)
                specs.append(ConvSpec(cin, cout, (3, 3), stride, self.pad_time, "same"))
                cin = cout
        return specs

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def _layer_time(spec: ConvSpec, t: int) -> int | None:
    st = spec.stride[0]
    if spec.pad_time == "same":
        return -(-t // st)
    if t < spec.kernel[0]:
        return None
    return (t - spec.kernel[0]) // st + 1


def min_input_length(cfg: EncoderConfig) -> int:
    """Smallest T for which no layer's time axis underflows."""
    if cfg.pad_time == "same":
        return 1
    t = 1
    for spec in reversed(cfg.conv_specs()):
        # smallest input giving >= t outputs
        t = (t - 1) * spec.stride[0] + spec.kernel[0]
    return t


def output_shape(cfg: EncoderConfig, t: int) -> int:
    """Hidden time length T^m for an input of ``t`` frames."""
    if t < 1:
        raise ValueError("T must be >= 1")
    cur = t
    for spec in cfg.conv_specs():
        cur = _layer_time(spec, cur)
        if cur is None:
            raise EncoderUnderflowError(t, min_input_length(cfg))
    return cur


def output_bins(cfg: EncoderConfig) -> int:
    """Hidden frequency length D_f^m."""
    f = cfg.in_bins
    for spec in cfg.conv_specs():
        f = -(-f // spec.stride[1])
    return f


def hidden_size(cfg: EncoderConfig) -> int:
    """Flattened per-frame hidden width ``C * D_f^m`` seen by the pooling layer."""
    return cfg.channels[-1] * output_bins(cfg)


class BatchNorm:
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)
        self.eps = eps
        self.momentum = momentum

    def params(self) -> BatchNormParams:
        return BatchNormParams(
            self.gamma.data, self.beta.data, self.running_mean, self.running_var, self.eps
        )

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        if not training:
            return T.batchnorm_infer(x, self.params())
        out, mu, var = T.batchnorm(x, self.gamma, self.beta, self.eps)
        n = x.data.size // x.shape[1]
        unbiased = var * (n / max(n - 1, 1))
        m = self.momentum
        self.running_mean = ((1 - m) * self.running_mean + m * mu).astype(np.float32)
        self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(np.float32)
        return out

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        return {
            f"{prefix}.gamma": self.gamma.data,
            f"{prefix}.beta": self.beta.data,
            f"{prefix}.running_mean": self.running_mean,
            f"{prefix}.running_var": self.running_var,
        }

    def load(self, prefix: str, state: dict[str, np.ndarray]) -> None:
        self.gamma.data = np.asarray(state[f"{prefix}.gamma"], np.float32)
        self.beta.data = np.asarray(state[f"{prefix}.beta"], np.float32)
        self.running_mean = np.asarray(state[f"{prefix}.running_mean"], np.float32)
        self.running_var = np.asarray(state[f"{prefix}.running_var"], np.float32)


def _crop(x: Tensor, spec: ConvSpec) -> Tensor:
    """Align a 1x1/identity branch with the 3x3 output grid when padding is off."""
    ct = 1 - spec.padding[0]
    cf = 1 - spec.padding[1]
    if not ct and not cf:
        return x
    t, f = x.shape[2], x.shape[3]
    return T.getitem(x, (slice(None), slice(None), slice(ct, t - ct), slice(cf, f - cf)))


class RepVGGBlock:
    """Three-branch training block."""

    form = "train"

    def __init__(self, spec: ConvSpec, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        cin, cout = spec.in_channels, spec.out_channels
        self.spec = spec
        self.conv3 = Tensor(
            (rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / (9 * cin))).astype(np.float32),
            requires_grad=True,
        )
        self.conv1 = Tensor(
            (rng.standard_normal((cout, cin, 1, 1)) * np.sqrt(2.0 / cin)).astype(np.float32),
            requires_grad=True,
        )
        self.bn3 = BatchNorm(cout)
        self.bn1 = BatchNorm(cout)
        self.bn_id = BatchNorm(cout) if cin == cout and spec.stride == (1, 1) else None

    @property
    def spec1x1(self) -> ConvSpec:
        s = self.spec
        return ConvSpec(s.in_channels, s.out_channels, (1, 1), s.stride, "none", "none")

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        out = self.bn3(T.conv2d(x, self.spec, self.conv3), training)
        side = _crop(x, self.spec)
        out = out + self.bn1(T.conv2d(side, self.spec1x1, self.conv1), training)
        if self.bn_id is not None:
            out = out + self.bn_id(side, training)
        return T.relu(out)

    __call__ = forward

    def with_pad_time(self, mode: str) -> "RepVGGBlock":
        clone = object.__new__(RepVGGBlock)
        clone.__dict__.update(self.__dict__)
        clone.spec = replace(self.spec, pad_time=mode)
        return clone

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        params = {
            f"{prefix}.conv3": self.conv3,
            f"{prefix}.bn3.gamma": self.bn3.gamma,
            f"{prefix}.bn3.beta": self.bn3.beta,
            f"{prefix}.conv1": self.conv1,
            f"{prefix}.bn1.gamma": self.bn1.gamma,
            f"{prefix}.bn1.beta": self.bn1.beta,
        }
        if self.bn_id is not None:
            params[f"{prefix}.bn_id.gamma"] = self.bn_id.gamma
            params[f"{prefix}.bn_id.beta"] = self.bn_id.beta
        return params

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        st = {f"{prefix}.conv3": self.conv3.data, f"{prefix}.conv1": self.conv1.data}
        st.update(self.bn3.state(f"{prefix}.bn3"))
        st.update(self.bn1.state(f"{prefix}.bn1"))
        if self.bn_id is not None:
            st.update(self.bn_id.state(f"{prefix}.bn_id"))
        return st

    def load(self, prefix: str, state: dict[str, np.ndarray]) -> None:
        self.conv3.data = np.asarray(state[f"{prefix}.conv3"], np.float32)
        self.conv1.data = np.asarray(state[f"{prefix}.conv1"], np.float32)
        self.bn3.load(f"{prefix}.bn3", state)
        self.bn1.load(f"{prefix}.bn1", state)
        if self.bn_id is not None:
            self.bn_id.load(f"{prefix}.bn_id", state)


class DeployBlock:
    """Single 3x3 conv + bias + ReLU produced by :func:`fuse_block`."""

    form = "deploy"

    def __init__(self, spec: ConvSpec, weight: np.ndarray, bias: np.ndarray):
        self.spec = spec
        self.weight = Tensor(np.asarray(weight, np.float32))
        self.bias = Tensor(np.asarray(bias, np.float32))

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        return T.relu(T.conv2d(x, self.spec, self.weight, self.bias))

    __call__ = forward

    def with_pad_time(self, mode: str) -> "DeployBlock":
        return DeployBlock(replace(self.spec, pad_time=mode), self.weight.data, self.bias.data)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.weight": self.weight.data, f"{prefix}.bias": self.bias.data}

    def load(self, prefix: str, state: dict[str, np.ndarray]) -> None:
        self.weight.data = np.asarray(state[f"{prefix}.weight"], np.float32)
        self.bias.data = np.asarray(state[f"{prefix}.bias"], np.float32)


def fold_bn(kernel: np.ndarray, bn: BatchNormParams) -> tuple[np.ndarray, np.ndarray]:
    scale, shift = bn.scale_shift()
    return kernel * scale[:, None, None, None], shift


def fuse_block(b: RepVGGBlock) -> DeployBlock:
    """Fold all branches and their batch norms into one 3x3 kernel and bias."""
    k3 = b.conv3.data.astype(np.float64)
    kernel, bias = fold_bn(k3, _as64(b.bn3.params()))
    k1 = np.zeros_like(k3)
    k1[:, :, 1:2, 1:2] = b.conv1.data
    k, bb = fold_bn(k1, _as64(b.bn1.params()))
    kernel, bias = kernel + k, bias + bb
    if b.bn_id is not None:
        cin = b.spec.in_channels
        kid = np.zeros_like(k3)
        kid[np.arange(cin), np.arange(cin), 1, 1] = 1.0
        k, bb = fold_bn(kid, _as64(b.bn_id.params()))
        kernel, bias = kernel + k, bias + bb
    return DeployBlock(b.spec, kernel.astype(np.float32), bias.astype(np.float32))


def _as64(p: BatchNormParams) -> BatchNormParams:
    return BatchNormParams(
        *(np.asarray(v, np.float64) for v in (p.gamma, p.beta, p.running_mean, p.running_var)),
        eps=p.eps,
    )


class Encoder:
    def __init__(self, config: EncoderConfig, blocks: list, form: str):
        self.config = config
        self.blocks = blocks
        self.form = form

    @classmethod
    def init(cls, config: EncoderConfig, seed: int = 0) -> "Encoder":
        rng = np.random.default_rng(seed)
        return cls(config, [RepVGGBlock(s, rng) for s in config.conv_specs()], "train")

    @classmethod
    def empty(cls, config: EncoderConfig, form: str) -> "Encoder":
        """Zero-weight skeleton for loading a checkpoint into."""
        if form == "train":
            return cls.init(config)
        blocks = [
            DeployBlock(s, np.zeros((s.out_channels, s.in_channels, 3, 3)), np.zeros(s.out_channels))
            for s in config.conv_specs()
        ]
        return cls(config, blocks, "deploy")

    @property
    def pad_time(self) -> str:
        return self.config.pad_time

    @property
    def c_r(self) -> int:
        return self.config.c_r

    def output_shape(self, t: int) -> int:
        return output_shape(self.config, t)

    def forward(self, x, training: bool = False) -> Tensor:
        """``x[B, 1, T, D_f] -> y[B, C, T^m, D_f^m]``."""
        x = T.as_tensor(x)
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[3] != self.config.in_bins:
            raise T.ShapeError(
                f"encoder input must be [B, 1, T, {self.config.in_bins}], got {x.shape}",
                axis="input",
            )
        if training and self.form != "train":
            raise RuntimeError("deploy-form encoders cannot be trained")
        self.output_shape(x.shape[2])
        for block in self.blocks:
            x = block(x, training)
        return x

    __call__ = forward

    def forward_chunked(self, x, chunk: int = 256) -> Tensor:
        """Inference forward of a pad-free encoder, ``chunk`` hidden frames at a time.

        Hidden frame ``j`` only sees input frames ``[j * C_r, j * C_r + R)`` with
        ``R`` the receptive field, so chunks cut with that overlap reproduce the
        full map while keeping intermediate buffers small on long inputs.
        """
        if self.pad_time != "none":
            raise ValueError("chunked forward needs a time-pad-free encoder")
        x = np.asarray(x.data if isinstance(x, Tensor) else x)
        total = self.output_shape(x.shape[2])
        rf, c_r = min_input_length(self.config), self.c_r
        parts = [
            self.forward(x[:, :, j * c_r : (min(j + chunk, total) - 1) * c_r + rf]).data
            for j in range(0, total, chunk)
        ]
        return Tensor(np.concatenate(parts, axis=2))

    def fuse(self) -> "Encoder":
        if self.form == "deploy":
            return self
        return Encoder(self.config, [fuse_block(b) for b in self.blocks], "deploy")

    def with_pad_time(self, mode: str) -> "Encoder":
        """Same weights, different time padding."""
        return Encoder(
            self.config.with_pad_time(mode), [b.with_pad_time(mode) for b in self.blocks], self.form
        )

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, b in enumerate(self.blocks):
            params.update(b.parameters(f"enc.{i}"))
        return params

    def state(self) -> dict[str, np.ndarray]:
        st: dict[str, np.ndarray] = {}
        for i, b in enumerate(self.blocks):
            st.update(b.state(f"enc.{i}"))
        return st

    def load(self, state: dict[str, np.ndarray]) -> None:
        for i, b in enumerate(self.blocks):
            b.load(f"enc.{i}", state)
