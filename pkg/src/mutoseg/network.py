"""Dual-stream 3D segmentation network and its ablation variants.

Two independent encoders (scattering stream, 9 channels; shower stream,
40 channels) reduce the 20^3 grid to a 5^3 bottleneck through three
conv / batch-norm / ReLU stages with 2x max pooling after the first two.
At the bottleneck the scattering tokens query the shower tokens through
multi-head cross-attention (125 voxel tokens, pre-norm); the attended value
is residual-added to the scattering stream, concatenated with the shower
stream, and reconciled by one 3^3 bottleneck convolution.  The decoder
mirrors the encoder with trilinear upsampling + convolution, taking skip
connections from the scattering encoder (or the lone enabled encoder),
optionally gated by a learned sigmoid mask conditioned on the decoder state.
A pointwise head emits 6-class logits; during training, auxiliary heads at
10^3 and 5^3 are upsampled to 20^3 for deep supervision.

Single-stream variants drop the other encoder and the attention block but
keep a live bottleneck convolution, which also keeps their parameter budgets
in the intended ratio to the full model.

Default widths (base 31, multipliers 1/2/4) put the full preset at about
1.86M trainable parameters and the single-stream presets near 1.1M.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from . import tensor as tc
from .features import N_STREAM1, N_STREAM2
from .geometry import N_CLASSES


class NetworkError(ValueError):
    """Raised for invalid configurations or checkpoint mismatches."""


@dataclass(frozen=True)
class ModelConfig:
    use_scatter: bool = True
    use_shower: bool = True
    attention_gates: bool = True
    deep_supervision: bool = True
    base_width: int = 31
    width_multipliers: tuple[int, int, int] = (1, 2, 4)
    heads: int = 4
    in_channels: tuple[int, int] = (N_STREAM1, N_STREAM2)
    n_classes: int = N_CLASSES

    def __post_init__(self):
        if not (self.use_scatter or self.use_shower):
            raise NetworkError("at least one input stream must be enabled")
        if (self.base_width * self.width_multipliers[2]) % self.heads:
            raise NetworkError("bottleneck width must be divisible by heads")

    @property
    def widths(self) -> tuple[int, int, int]:
        return tuple(self.base_width * m for m in self.width_multipliers)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        for key in ("width_multipliers", "in_channels"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)


PRESETS: dict[str, ModelConfig] = {
    "full": ModelConfig(),
    "no_attn_gate": ModelConfig(attention_gates=False),
    "no_deep_sup": ModelConfig(deep_supervision=False),
    "scatter_only": ModelConfig(use_shower=False),
    "shower_only": ModelConfig(use_scatter=False),
}


def preset(name: str, base_width: int | None = None) -> ModelConfig:
    if name not in PRESETS:
        raise NetworkError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[name]
    if base_width is not None:
        cfg = replace(cfg, base_width=base_width)
    return cfg


@dataclass
class ForwardOutput:
    logits: tc.Tensor                  # [6, 20, 20, 20] or [N, 6, ...]
    aux_logits: list = field(default_factory=list)


class _Init:
    """Seeded fan-in-scaled uniform initialization, consumed in
    parameter-registration order."""

    def __init__(self, seed: int):
        self.rng = np.random.Generator(np.random.Philox(seed))

    def uniform(self, shape, fan_in: int) -> np.ndarray:
        bound = math.sqrt(6.0 / fan_in)
        return self.rng.uniform(-bound, bound, size=shape)


class _ConvBlock:
    """3^3 convolution + batch norm + ReLU."""

    def __init__(self, model: "Model", name: str, c_in: int, c_out: int):
        init = model._init
        self.w = model._param(f"{name}.conv_w", init.uniform(
            (c_out, c_in, 3, 3, 3), fan_in=c_in * 27))
        self.b = model._param(f"{name}.conv_b", np.zeros(c_out))
        self.gamma = model._param(f"{name}.bn_gamma", np.ones(c_out))
        self.beta = model._param(f"{name}.bn_beta", np.zeros(c_out))
        self.state = model._buffer(name, c_out)

    def __call__(self, x: tc.Tensor, training: bool) -> tc.Tensor:
        y = tc.conv3d(x, self.w.tensor, self.b.tensor)
        y = tc.batchnorm3d(y, self.gamma.tensor, self.beta.tensor,
                           self.state, training)
        return tc.relu(y)


class _Encoder:
    """Three stages, 20^3 -> 10^3 -> 5^3; keeps pre-pool skip tensors."""

    def __init__(self, model: "Model", name: str, c_in: int,
                 widths: tuple[int, int, int]):
        self.stage1 = _ConvBlock(model, f"{name}.stage1", c_in, widths[0])
        self.stage2 = _ConvBlock(model, f"{name}.stage2", widths[0], widths[1])
        self.stage3 = _ConvBlock(model, f"{name}.stage3", widths[1], widths[2])

    def __call__(self, x: tc.Tensor, training: bool):
        s1 = self.stage1(x, training)                 # [W,  20^3] skip
        s2 = self.stage2(tc.maxpool3d(s1), training)  # [2W, 10^3] skip
        s3 = self.stage3(tc.maxpool3d(s2), training)  # [4W, 5^3 ] bottleneck
        return s1, s2, s3


class _AttentionGate:
    """skip * sigmoid(psi(relu(Wx skip + Wg gate))), one broadcast mask."""

    def __init__(self, model: "Model", name: str, c_skip: int, c_gate: int):
        init = model._init
        f_int = c_skip
        self.wx_w = model._param(f"{name}.wx_w", init.uniform((f_int, c_skip),
                                                              fan_in=c_skip))
        self.wx_b = model._param(f"{name}.wx_b", np.zeros(f_int))
        self.wg_w = model._param(f"{name}.wg_w", init.uniform((f_int, c_gate),
                                                              fan_in=c_gate))
        self.wg_b = model._param(f"{name}.wg_b", np.zeros(f_int))
        self.psi_w = model._param(f"{name}.psi_w", init.uniform((1, f_int),
                                                                fan_in=f_int))
        self.psi_b = model._param(f"{name}.psi_b", np.zeros(1))

    def __call__(self, skip: tc.Tensor, gate: tc.Tensor) -> tc.Tensor:
        a = tc.add(tc.conv1x1(skip, self.wx_w.tensor, self.wx_b.tensor),
                   tc.conv1x1(gate, self.wg_w.tensor, self.wg_b.tensor))
        mask = tc.sigmoid(tc.conv1x1(tc.relu(a), self.psi_w.tensor,
                                     self.psi_b.tensor))
        return tc.mul_bcast(skip, mask)


class _PointHead:
    def __init__(self, model: "Model", name: str, c_in: int, c_out: int):
        init = model._init
        self.w = model._param(f"{name}.w", init.uniform((c_out, c_in),
                                                        fan_in=c_in))
        self.b = model._param(f"{name}.b", np.zeros(c_out))

    def __call__(self, x: tc.Tensor) -> tc.Tensor:
        return tc.conv1x1(x, self.w.tensor, self.b.tensor)


class Model:
    """The segmentation network; construction is deterministic in the seed."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self._params: dict[str, tc.Parameter] = {}
        self._buffers: dict[str, tc.BatchNormState] = {}
        self._init = _Init(seed)
        w1, w2, w3 = config.widths
        c_s1, c_s2 = config.in_channels

        self.enc_scatter = (_Encoder(self, "scatter_enc", c_s1, config.widths)
                            if config.use_scatter else None)
        self.enc_shower = (_Encoder(self, "shower_enc", c_s2, config.widths)
                           if config.use_shower else None)
        self.dual = config.use_scatter and config.use_shower

        if self.dual:
            self.attn_params = {}
            for pname in tc.ATTENTION_PARAM_NAMES:
                if pname.startswith("ln"):
                    data = (np.ones(w3) if pname.endswith("gamma")
                            else np.zeros(w3))
                elif pname.startswith("w"):
                    data = self._init.uniform((w3, w3), fan_in=w3)
                else:
                    data = np.zeros(w3)
                self.attn_params[pname] = self._param(
                    f"fusion.attn.{pname}", data).tensor
            self.bottleneck = _ConvBlock(self, "fusion.bottleneck",
                                         2 * w3, w3)
        else:
            self.bottleneck = _ConvBlock(self, "bottleneck", w3, w3)

        if config.attention_gates:
            self.gate10 = _AttentionGate(self, "gate10", c_skip=w2, c_gate=w3)
            self.gate20 = _AttentionGate(self, "gate20", c_skip=w1, c_gate=w2)
        else:
            self.gate10 = self.gate20 = None

        self.dec10 = _ConvBlock(self, "dec10", w3 + w2, w2)
        self.dec20 = _ConvBlock(self, "dec20", w2 + w1, w1)
        self.head = _PointHead(self, "head", w1, config.n_classes)
        if config.deep_supervision:
            self.aux10 = _PointHead(self, "aux10", w2, config.n_classes)
            self.aux5 = _PointHead(self, "aux5", w3, config.n_classes)
        else:
            self.aux10 = self.aux5 = None

    # -- parameter/buffer registry ---------------------------------------

    def _param(self, name: str, data: np.ndarray) -> tc.Parameter:
        if name in self._params:
            raise NetworkError(f"duplicate parameter {name}")
        p = tc.Parameter(name, data)
        self._params[name] = p
        return p

    def _buffer(self, name: str, channels: int) -> tc.BatchNormState:
        state = tc.BatchNormState(channels, dtype=np.float64)
        self._buffers[name] = state
        return state

    def parameters(self) -> dict[str, tc.Parameter]:
        return self._params

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def param_count(self) -> int:
        return sum(p.data.size for p in self._params.values())

    # -- forward ----------------------------------------------------------

    def forward(self, stream1, stream2, training: bool = False
                ) -> ForwardOutput:
        cfg = self.config
        squeeze = False
        x1 = x2 = None
        if cfg.use_scatter:
            x1 = self._as_input(stream1, cfg.in_channels[0])
            if x1.data.ndim == 4:
                x1 = tc.reshape(x1, (1,) + x1.data.shape)
                squeeze = True
        if cfg.use_shower:
            x2 = self._as_input(stream2, cfg.in_channels[1])
            if x2.data.ndim == 4:
                x2 = tc.reshape(x2, (1,) + x2.data.shape)
                squeeze = True

        skips = None
        if cfg.use_scatter:
            s1_skip20, s1_skip10, s1_bot = self.enc_scatter(x1, training)
            skips = (s1_skip20, s1_skip10)
        if cfg.use_shower:
            s2_skip20, s2_skip10, s2_bot = self.enc_shower(x2, training)
            if skips is None:
                skips = (s2_skip20, s2_skip10)

        if self.dual:
            fused = self._fuse(s1_bot, s2_bot)
        else:
            fused = s1_bot if cfg.use_scatter else s2_bot
        bot = self.bottleneck(fused, training)            # [4W, 5^3]

        up10 = tc.upsample3d(bot)                         # [4W, 10^3]
        skip10 = skips[1]
        if self.gate10 is not None:
            skip10 = self.gate10(skip10, up10)
        d10 = self.dec10(tc.concat([up10, skip10], axis=1), training)

        up20 = tc.upsample3d(d10)                         # [2W, 20^3]
        skip20 = skips[0]
        if self.gate20 is not None:
            skip20 = self.gate20(skip20, up20)
        d20 = self.dec20(tc.concat([up20, skip20], axis=1), training)

        logits = self.head(d20)
        aux = []
        if training and self.config.deep_supervision:
            aux10 = tc.upsample3d(self.aux10(d10))                  # 10 -> 20
            aux5 = tc.upsample3d(tc.upsample3d(self.aux5(bot)))     # 5 -> 20
            aux = [aux10, aux5]
        if squeeze:
            logits = tc.reshape(logits, logits.data.shape[1:])
            aux = [tc.reshape(a, a.data.shape[1:]) for a in aux]
        return ForwardOutput(logits=logits, aux_logits=aux)

    def _fuse(self, s1_bot: tc.Tensor, s2_bot: tc.Tensor) -> tc.Tensor:
        n, c, d, h, w = s1_bot.data.shape
        tokens = d * h * w
        q = tc.transpose(tc.reshape(s1_bot, (n, c, tokens)), (0, 2, 1))
        kv = tc.transpose(tc.reshape(s2_bot, (n, c, tokens)), (0, 2, 1))
        attended = tc.multihead_cross_attention(q, kv, self.attn_params,
                                                self.config.heads)
        fused_tokens = tc.add(q, attended)  # residual back onto stream 1
        fused = tc.reshape(tc.transpose(fused_tokens, (0, 2, 1)),
                           (n, c, d, h, w))
        return tc.concat([fused, s2_bot], axis=1)

    def _as_input(self, x, channels: int) -> tc.Tensor:
        if x is None:
            raise NetworkError("enabled stream received no input")
        t = tc.as_tensor(x)
        if t.data.shape[-4] != channels:
            raise NetworkError(
                f"expected {channels} input channels, got {t.data.shape}")
        return t

    # -- persistence --------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, p in self._params.items():
            out[name] = p.data
        for name, st in self._buffers.items():
            out[f"{name}.bn_running_mean"] = st.mean
            out[f"{name}.bn_running_var"] = st.var
            out[f"{name}.bn_steps"] = np.array([st.steps], dtype=np.float32)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = set(self.state_arrays())
        got = set(arrays)
        if expected != got:
            missing = sorted(expected - got)[:3]
            extra = sorted(got - expected)[:3]
            raise NetworkError(
                f"checkpoint/config mismatch: missing {missing}, extra {extra}")
        dtype = tc.get_default_dtype()
        for name, p in self._params.items():
            if arrays[name].shape != p.data.shape:
                raise NetworkError(f"shape mismatch for {name}")
            p.data = arrays[name].astype(dtype)
        for name, st in self._buffers.items():
            st.mean = arrays[f"{name}.bn_running_mean"].astype(np.float64)
            st.var = arrays[f"{name}.bn_running_var"].astype(np.float64)
            st.steps = int(arrays[f"{name}.bn_steps"][0])


def config_sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".config.json")


def save(model: Model, path: str | Path) -> None:
    """Write the checkpoint plus a JSON config sidecar used by load()."""
    tc.save_arrays(path, model.state_arrays())
    with open(config_sidecar_path(path), "w") as fh:
        fh.write(model.config.to_json())
        fh.write("\n")


def load(path: str | Path) -> Model:
    sidecar = config_sidecar_path(path)
    if not sidecar.exists():
        raise NetworkError(f"missing config sidecar {sidecar}")
    config = ModelConfig.from_json(sidecar.read_text())
    model = Model(config, seed=0)
    model.load_state_arrays(tc.load_arrays(path))
    return model


def build(config: ModelConfig, seed: int = 0) -> Model:
    return Model(config, seed)
