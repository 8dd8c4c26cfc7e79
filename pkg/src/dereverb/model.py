"""Encoder / mask-estimation / decoder dereverberation network.

Two variants share one parameter container:

* ``tcn``: stacks of depthwise-separable conv blocks whose depthwise
  dilation grows in powers of two within each stack.
* ``wd-tcn``: every block runs two depthwise kernels in parallel (one at
  the block's exponential dilation, one fixed at dilation 1) and mixes
  them with per-utterance squeeze-and-excite attention weights before the
  pointwise stage.

Hyperparameter names follow the Conv-TasNet convention used throughout the
speech-separation literature: N encoder channels, B bottleneck channels,
H block channels, P depthwise kernel size, X blocks per stack, R stack
repeats, L_BL encoder frame length, Q parallel depthwise kernels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigError, ShapeError, Tensor
from .dsp import AudioClip, frame_signal

__all__ = [
    "GLN_EPS",
    "VARIANTS",
    "ModelConfig",
    "SeParams",
    "ConvBlockParams",
    "WDTCNModel",
    "ForwardTrace",
    "ParamCountReport",
    "init_model",
    "dilation_schedule",
    "wd_dilation_pairs",
    "encode",
    "se_attention",
    "conv_block_forward",
    "masknet_forward",
    "decode",
    "forward",
    "enhance",
    "count_parameters",
    "receptive_field",
    "receptive_field_probe",
    "to_baseline",
    "save_model",
    "load_model",
]

GLN_EPS = 1e-8
SE_HIDDEN = 4  # squeeze bottleneck width
VARIANTS = ("tcn", "wd-tcn")

CHECKPOINT_MAGIC = "dereverb-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of one model instance."""

    X: int
    R: int
    variant: str = "tcn"
    N: int = 512
    B: int = 128
    H: int = 512
    P: int = 3
    L_BL: int = 16
    Q: int = 2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.X < 1 or self.R < 1:
            raise ConfigError(f"X and R must be >= 1, got X={self.X}, R={self.R}")
        if self.P % 2 == 0 or self.P < 1:
            raise ConfigError(f"depthwise kernel size P must be odd, got {self.P}")
        if self.L_BL % 2 != 0 or self.L_BL < 2:
            raise ConfigError(f"frame length L_BL must be even, got {self.L_BL}")
        if min(self.N, self.B, self.H) < 1:
            raise ConfigError("channel counts must be positive")
        if self.variant == "wd-tcn" and self.Q != 2:
            raise ConfigError(f"the weighted variant is defined for Q=2, got Q={self.Q}")

    @property
    def n_blocks(self) -> int:
        return self.R * self.X

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "X": self.X,
            "R": self.R,
            "N": self.N,
            "B": self.B,
            "H": self.H,
            "P": self.P,
            "L_BL": self.L_BL,
            "Q": self.Q,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def dilation_schedule(X: int, R: int) -> list[int]:
    """R repeats of [2^0, 2^1, ..., 2^(X-1)]."""
    if X < 1 or R < 1:
        raise ConfigError(f"X and R must be >= 1, got X={X}, R={R}")
    return [2**i for i in range(X)] * R


def wd_dilation_pairs(X: int, R: int) -> list[tuple[int, int]]:
    """(f_local, f_exponential) per block for the weighted variant.

    The local branch is always dilation 1; the exponential branch follows
    the power-of-two schedule, so the first block of each stack runs both
    branches at dilation 1.
    """
    return [(1, f) for f in dilation_schedule(X, R)]


# -- parameters ---------------------------------------------------------------


@dataclass
class SeParams:
    """Squeeze-and-excite attention weights: H -> 4 -> Q with softmax output."""

    squeeze_w: Tensor  # [4, H]
    squeeze_b: Tensor  # [4]
    excite_w: Tensor  # [Q, 4]
    excite_b: Tensor  # [Q]


@dataclass
class ConvBlockParams:
    in_pconv: Tensor  # [B, H]
    prelu_in: Tensor  # [1]
    norm_in_gain: Tensor  # [H]
    norm_in_bias: Tensor  # [H]
    dconv: list[Tensor]  # 1 (tcn) or Q (wd-tcn) kernels of shape [H, P]
    dilations: tuple[int, ...]  # one dilation per kernel; index 0 is the exponential branch
    prelu_out: Tensor  # [1]
    norm_out_gain: Tensor  # [H]
    norm_out_bias: Tensor  # [H]
    out_pconv: Tensor  # [H, B]
    se: SeParams | None = None


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every trainable array of a model, in deterministic order.

    Drives initialisation, checkpoints, and parameter counting, so the
    three can never disagree.
    """
    wd = config.variant == "wd-tcn"
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("encoder", (config.L_BL, config.N)),
        ("bottleneck_norm.gain", (config.N,)),
        ("bottleneck_norm.bias", (config.N,)),
        ("bottleneck_pconv", (config.N, config.B)),
    ]
    for i in range(config.n_blocks):
        prefix = f"block{i:02d}"
        shapes += [
            (f"{prefix}.in_pconv", (config.B, config.H)),
            (f"{prefix}.prelu_in", (1,)),
            (f"{prefix}.norm_in.gain", (config.H,)),
            (f"{prefix}.norm_in.bias", (config.H,)),
            (f"{prefix}.dconv0", (config.H, config.P)),
        ]
        if wd:
            shapes += [
                (f"{prefix}.dconv1", (config.H, config.P)),
                (f"{prefix}.se.squeeze_w", (SE_HIDDEN, config.H)),
                (f"{prefix}.se.squeeze_b", (SE_HIDDEN,)),
                (f"{prefix}.se.excite_w", (config.Q, SE_HIDDEN)),
                (f"{prefix}.se.excite_b", (config.Q,)),
            ]
        shapes += [
            (f"{prefix}.prelu_out", (1,)),
            (f"{prefix}.norm_out.gain", (config.H,)),
            (f"{prefix}.norm_out.bias", (config.H,)),
            (f"{prefix}.out_pconv", (config.H, config.B)),
        ]
    shapes += [
        ("mask_prelu", (1,)),
        ("mask_pconv", (config.B, config.N)),
        ("decoder", (config.N, config.L_BL)),
    ]
    return shapes


def _init_array(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if "prelu" in name:
        return np.full(shape, 0.25)
    if name.endswith(".gain"):
        return np.ones(shape)
    if name.endswith(".bias") or name.endswith("squeeze_b") or name.endswith("excite_b"):
        return np.zeros(shape)
    if name.endswith("excite_w"):
        # near-zero so attention starts effectively uniform while still
        # letting gradient reach the squeeze layer on the first pass
        return rng.uniform(-0.005, 0.005, shape)
    if name.endswith("squeeze_w") or "dconv" in name:
        fan_in = shape[1]
    else:  # encoder, decoder, pconv kernels: [in, out] layout
        fan_in = shape[0]
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


class WDTCNModel:
    """Parameter container plus typed views used by the forward pass."""

    def __init__(self, config: ModelConfig, arrays: dict[str, Tensor]):
        self.config = config
        expected = parameter_shapes(config)
        if [n for n, _ in expected] != list(arrays.keys()):
            raise ShapeError("parameter names do not match the model structure")
        for name, shape in expected:
            if arrays[name].shape != shape:
                raise ShapeError(f"parameter {name}: expected shape {shape}, got {arrays[name].shape}")
        self._arrays = arrays

        self.encoder = arrays["encoder"]
        self.bottleneck_norm_gain = arrays["bottleneck_norm.gain"]
        self.bottleneck_norm_bias = arrays["bottleneck_norm.bias"]
        self.bottleneck_pconv = arrays["bottleneck_pconv"]
        self.mask_prelu = arrays["mask_prelu"]
        self.mask_pconv = arrays["mask_pconv"]
        self.decoder = arrays["decoder"]

        wd = config.variant == "wd-tcn"
        pairs = wd_dilation_pairs(config.X, config.R)
        schedule = dilation_schedule(config.X, config.R)
        self.blocks: list[ConvBlockParams] = []
        for i in range(config.n_blocks):
            p = f"block{i:02d}"
            if wd:
                f_local, f_exp = pairs[i]
                dconv = [arrays[f"{p}.dconv0"], arrays[f"{p}.dconv1"]]
                dilations = (f_exp, f_local)
                se = SeParams(
                    squeeze_w=arrays[f"{p}.se.squeeze_w"],
                    squeeze_b=arrays[f"{p}.se.squeeze_b"],
                    excite_w=arrays[f"{p}.se.excite_w"],
                    excite_b=arrays[f"{p}.se.excite_b"],
                )
            else:
                dconv = [arrays[f"{p}.dconv0"]]
                dilations = (schedule[i],)
                se = None
            self.blocks.append(
                ConvBlockParams(
                    in_pconv=arrays[f"{p}.in_pconv"],
                    prelu_in=arrays[f"{p}.prelu_in"],
                    norm_in_gain=arrays[f"{p}.norm_in.gain"],
                    norm_in_bias=arrays[f"{p}.norm_in.bias"],
                    dconv=dconv,
                    dilations=dilations,
                    prelu_out=arrays[f"{p}.prelu_out"],
                    norm_out_gain=arrays[f"{p}.norm_out.gain"],
                    norm_out_bias=arrays[f"{p}.norm_out.bias"],
                    out_pconv=arrays[f"{p}.out_pconv"],
                    se=se,
                )
            )

    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self._arrays.items())

    def parameter_dict(self) -> dict[str, Tensor]:
        return dict(self._arrays)


def init_model(config: ModelConfig, seed: int = 0) -> WDTCNModel:
    """Deterministically initialised model.

    Conv and squeeze kernels use uniform fan-in (Kaiming-style) scaling;
    PReLU slopes start at 0.25, norm gains at 1, all biases at 0, and the
    excite weights near 0 so attention starts at approximately (0.5, 0.5).
    """
    rng = np.random.default_rng(seed)
    arrays = {
        name: Tensor(_init_array(name, shape, rng), requires_grad=True)
        for name, shape in parameter_shapes(config)
    }
    return WDTCNModel(config, arrays)


# -- forward pass ---------------------------------------------------------------


@dataclass
class ForwardTrace:
    """Intermediate products of one utterance-level forward pass."""

    attention_weights: list[np.ndarray] = field(default_factory=list)
    mask: np.ndarray | None = None
    encoded: np.ndarray | None = None
    masked: np.ndarray | None = None


def encode(frames, model: WDTCNModel) -> Tensor:
    """Frames [L_x, L_BL] -> nonnegative features [N, L_x].

    Per-frame matrix product with the encoder basis followed by ReLU;
    equivalent to a stride-L_BL/2 conv over the padded signal.
    """
    frames_t = frames if isinstance(frames, Tensor) else Tensor(frames)
    if frames_t.ndim != 2 or frames_t.shape[1] != model.config.L_BL:
        raise ShapeError(
            f"encode expects frames [L_x, {model.config.L_BL}], got shape {frames_t.shape}"
        )
    return ad.relu(ad.matmul(frames_t, model.encoder)).transpose()


def se_attention(z: Tensor, se: SeParams) -> Tensor:
    """Per-utterance mixing weights: pool over time, squeeze, excite, softmax."""
    pooled = ad.global_avg_pool(z)
    hidden = ad.relu(ad.linear(pooled, se.squeeze_w, se.squeeze_b))
    return ad.softmax(ad.linear(hidden, se.excite_w, se.excite_b))


def conv_block_forward(
    y_in: Tensor,
    block: ConvBlockParams,
    pin_attention=None,
    use_norm: bool = True,
) -> tuple[Tensor, Tensor | None]:
    """One residual conv block.

    P-Conv (B->H), PReLU, gLN, depthwise stage, PReLU, gLN, P-Conv (H->B),
    with the block input added back.  The weighted variant computes
    attention from the tensor entering the depthwise stage and mixes the
    parallel depthwise outputs; ``pin_attention`` overrides the attention
    with fixed weights.  ``use_norm=False`` bypasses both gLN sites (used
    by the receptive-field probe, since global normalisation couples every
    frame).
    """
    z = ad.pointwise_conv1d(y_in, block.in_pconv)
    z = ad.prelu(z, block.prelu_in)
    if use_norm:
        z = ad.global_layer_norm(z, block.norm_in_gain, block.norm_in_bias, GLN_EPS)

    attention: Tensor | None = None
    if len(block.dconv) == 1:
        mixed = ad.depthwise_conv1d(z, block.dconv[0], block.dilations[0])
    else:
        if pin_attention is not None:
            attention = Tensor(np.asarray(pin_attention, dtype=np.float64))
        else:
            attention = se_attention(z, block.se)
        if attention.shape != (len(block.dconv),):
            raise ShapeError(
                f"attention must have one weight per kernel ({len(block.dconv)}), got shape {attention.shape}"
            )
        mixed = None
        for q, (kernel, dilation) in enumerate(zip(block.dconv, block.dilations)):
            branch = attention[q] * ad.depthwise_conv1d(z, kernel, dilation)
            mixed = branch if mixed is None else mixed + branch

    z = ad.prelu(mixed, block.prelu_out)
    if use_norm:
        z = ad.global_layer_norm(z, block.norm_out_gain, block.norm_out_bias, GLN_EPS)
    z = ad.pointwise_conv1d(z, block.out_pconv)
    return y_in + z, attention


def masknet_forward(
    w: Tensor, model: WDTCNModel, pin_attention=None
) -> tuple[Tensor, list[Tensor]]:
    """Encoded features [N, L_x] -> nonnegative mask [N, L_x] plus the
    per-block attention tensors (empty for the baseline variant)."""
    y = ad.global_layer_norm(w, model.bottleneck_norm_gain, model.bottleneck_norm_bias, GLN_EPS)
    y = ad.pointwise_conv1d(y, model.bottleneck_pconv)
    attentions: list[Tensor] = []
    for block in model.blocks:
        y, attention = conv_block_forward(y, block, pin_attention=pin_attention)
        if attention is not None:
            attentions.append(attention)
    y = ad.prelu(y, model.mask_prelu)
    mask = ad.relu(ad.pointwise_conv1d(y, model.mask_pconv))
    return mask, attentions


def decode(v: Tensor, model: WDTCNModel, out_len: int) -> Tensor:
    """Masked features [N, L_x] -> time signal of length ``out_len``.

    Transposed conv with the decoder basis at 50% overlap, then the
    framing pad is trimmed off.
    """
    est = ad.transposed_conv1d(v, model.decoder, stride=model.config.L_BL // 2)
    if out_len > est.shape[1]:
        raise ShapeError(
            f"cannot trim to {out_len} samples: only {est.shape[1]} were synthesised"
        )
    return est[0, :out_len]


def forward(x, model: WDTCNModel, pin_attention=None) -> tuple[Tensor, ForwardTrace]:
    """Full utterance-level pass: frame, encode, mask, decode.

    Returns the estimate as a graph tensor (same length as the input) and
    a trace carrying attention weights and intermediate features.
    """
    samples = x.samples if isinstance(x, AudioClip) else np.asarray(x, dtype=np.float64).reshape(-1)
    frames = frame_signal(samples, model.config.L_BL)
    w = encode(frames, model)
    mask, attentions = masknet_forward(w, model, pin_attention=pin_attention)
    v = mask * w
    est = decode(v, model, samples.size)
    trace = ForwardTrace(
        attention_weights=[a.data.copy() for a in attentions],
        mask=mask.data,
        encoded=w.data,
        masked=v.data,
    )
    return est, trace


def enhance(clip: AudioClip, model: WDTCNModel) -> AudioClip:
    """Inference convenience wrapper returning a plain clip."""
    est, _ = forward(clip, model)
    return AudioClip(est.data.copy(), clip.sample_rate)


# -- accounting -------------------------------------------------------------------


@dataclass
class ParamCountReport:
    """Itemised trainable-parameter counts; total is the exact sum."""

    config: ModelConfig
    entries: list[tuple[str, int]]

    @property
    def total(self) -> int:
        return sum(count for _, count in self.entries)

    def section_totals(self) -> list[tuple[str, int]]:
        order: list[str] = []
        totals: dict[str, int] = {}
        for name, count in self.entries:
            section = "blocks" if name.startswith("block") else name.split(".")[0]
            if section not in totals:
                totals[section] = 0
                order.append(section)
            totals[section] += count
        return [(s, totals[s]) for s in order]

    def format_table(self) -> str:
        lines = [f"variant={self.config.variant} X={self.config.X} R={self.config.R}"]
        width = max(len(s) for s, _ in self.section_totals() + [("total", 0)]) + 2
        for section, count in self.section_totals():
            label = f"blocks ({self.config.n_blocks})" if section == "blocks" else section
            lines.append(f"{label:<{width + 6}}{count:>12d}")
        lines.append(f"{'total':<{width + 6}}{self.total:>12d}")
        return "\n".join(lines)


def count_parameters(config: ModelConfig) -> ParamCountReport:
    entries = [(name, int(np.prod(shape))) for name, shape in parameter_shapes(config)]
    return ParamCountReport(config=config, entries=entries)


def receptive_field(config: ModelConfig) -> int:
    """Span, in frames, of the dilated-conv path: 1 + R*(P-1)*(2^X - 1).

    The weighted variant's dilation-1 branch never widens it.
    """
    return 1 + config.R * (config.P - 1) * (2**config.X - 1)


def receptive_field_probe(config: ModelConfig, seed: int = 0) -> int:
    """Measure the receptive field by gradient support.

    Runs the block stack with normalisation off (gLN couples every frame)
    and, for the weighted variant, attention pinned to (0.5, 0.5) (the SE
    pooling also couples every frame), then counts input frames with a
    nonzero gradient from one centre output frame.
    """
    model = init_model(config, seed=seed)
    span = receptive_field(config)
    length = span + 16
    rng = np.random.default_rng(seed + 1)
    probe_in = Tensor(rng.standard_normal((config.B, length)), requires_grad=True)
    pin = tuple([1.0 / config.Q] * config.Q) if config.variant == "wd-tcn" else None
    y = probe_in
    for block in model.blocks:
        y, _ = conv_block_forward(y, block, pin_attention=pin, use_norm=False)
    center = length // 2
    ad.backward(y[0, center])
    support = np.nonzero(np.abs(probe_in.grad).max(axis=0) > 0.0)[0]
    return int(support[-1] - support[0] + 1)


def to_baseline(model: WDTCNModel, branch: int = 0) -> WDTCNModel:
    """Baseline model sharing one depthwise branch of a weighted model.

    With attention pinned to select ``branch``, the weighted forward pass
    equals this baseline's forward pass.
    """
    if model.config.variant != "wd-tcn":
        raise ConfigError("to_baseline expects a wd-tcn model")
    base_config = ModelConfig(**{**model.config.to_dict(), "variant": "tcn"})
    arrays: dict[str, Tensor] = {}
    for name, _ in parameter_shapes(base_config):
        source = name
        if name.endswith(".dconv0"):
            source = name[: -len("dconv0")] + f"dconv{branch}"
        arrays[name] = Tensor(model._arrays[source].data.copy(), requires_grad=True)
    return WDTCNModel(base_config, arrays)


# -- checkpoints --------------------------------------------------------------------


def model_to_dict(model: WDTCNModel) -> dict:
    return {
        "magic": CHECKPOINT_MAGIC,
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "params": {
            name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in model.parameters()
        },
    }


def model_from_dict(payload: dict) -> WDTCNModel:
    if payload.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"not a model checkpoint: magic={payload.get('magic')!r}")
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('format_version')!r}")
    config = ModelConfig.from_dict(payload["config"])
    arrays: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config):
        entry = payload["params"].get(name)
        if entry is None:
            raise ValueError(f"checkpoint missing parameter {name}")
        data = np.asarray(entry["data"], dtype=np.float64).reshape(tuple(entry["shape"]))
        if data.shape != shape:
            raise ValueError(f"checkpoint parameter {name}: shape {data.shape}, expected {shape}")
        arrays[name] = Tensor(data, requires_grad=True)
    return WDTCNModel(config, arrays)


def save_model(path, model: WDTCNModel) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh)


def load_model(path) -> WDTCNModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
