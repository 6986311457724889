"""Encoder / decoder networks for SNR-adaptive JSCC and the fixed-SNR baseline.

Images travel through the public API as ``(N, H, W, 3)`` arrays in ``[0, 1]``;
layers run internally in NCHW. The encoder's last layer emits ``C`` channels
at ``H/4 x W/4``; consecutive channel pairs at each pixel form one complex
symbol, so ``k = (H/4)(W/4)C/2`` (``32 C`` for CIFAR-sized inputs).
"""

from __future__ import annotations

import hashlib
import io
import json
import re
import zipfile
from dataclasses import asdict, dataclass, fields
from fractions import Fraction
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn

from snrjscc.channel import awgn, normalize_power, pack_complex, unpack_complex

VARIANCE_CLAMP = (1e-6, 1e3)
HIDDEN = 32

_NOTATION = re.compile(r"^(\d+)\*(\d+)\*(\d+)/(\d+)(?:;(\d+))?$")


class ShapeError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """One (de)convolution layer, written ``K*F*F/S`` or ``K*F*F/S;D`` when dilated."""

    filters: int
    kernel: int
    stride: int = 1
    dilation: int = 1
    activation: str = "prelu"  # prelu | sigmoid | none
    batch_norm: bool = False
    transpose: bool = False

    def notation(self) -> str:
        s = f"{self.filters}*{self.kernel}*{self.kernel}/{self.stride}"
        return s + (f";{self.dilation}" if self.dilation > 1 else "")

    @classmethod
    def from_notation(cls, text: str, **kwargs: Any) -> "LayerSpec":
        m = _NOTATION.match(text.strip())
        if m is None or m.group(2) != m.group(3):
            raise ValueError(f"not a K*F*F/S[;D] layer string: {text!r}")
        dil = int(m.group(5)) if m.group(5) else 1
        return cls(int(m.group(1)), int(m.group(2)), int(m.group(4)), dil, **kwargs)


@dataclass
class ModelConfig:
    channels: int = 8
    kind: str = "adaptive"  # adaptive | baseline
    dm_enabled: bool = True
    dm_filter_reduction: int = 16
    dm_kernel: int = 3
    dm_dilation: int = 2
    snr_map_units: str = "variance"  # variance | db
    fusion: str = "sum"  # sum | concat
    power: float = 1.0
    image_size: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.channels < 2 or self.channels % 2:
            raise ValueError(f"channels must be a positive even integer, got {self.channels}")
        if self.kind not in ("adaptive", "baseline"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.snr_map_units not in ("variance", "db"):
            raise ValueError(f"snr_map_units must be 'variance' or 'db', got {self.snr_map_units!r}")
        if self.fusion not in ("sum", "concat"):
            raise ValueError(f"fusion must be 'sum' or 'concat', got {self.fusion!r}")
        if self.image_size % 4:
            raise ValueError("image_size must be divisible by 4")
        if not 0 <= self.dm_filter_reduction < HIDDEN:
            raise ValueError("dm_filter_reduction must lie in [0, 32)")
        if self.power <= 0:
            raise ValueError("power must be positive")

    @property
    def latent_hw(self) -> int:
        return self.image_size // 4

    @property
    def k(self) -> int:
        return self.latent_hw**2 * self.channels // 2

    @property
    def n(self) -> int:
        return self.image_size**2 * 3

    @property
    def bandwidth_ratio(self) -> Fraction:
        return Fraction(self.k, self.n)

    @classmethod
    def for_bandwidth_ratio(cls, ratio: Fraction | str | float, **kwargs: Any) -> "ModelConfig":
        ratio = Fraction(ratio).limit_denominator(10_000) if isinstance(ratio, float) else Fraction(ratio)
        size = kwargs.get("image_size", 32)
        c = ratio * size**2 * 3 * 2 / (size // 4) ** 2
        if c.denominator != 1:
            raise ValueError(f"bandwidth ratio {ratio} is not reachable with an integer filter count")
        return cls(channels=int(c), **kwargs)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)

    # ---- layer tables ---------------------------------------------------

    def encoder_specs(self) -> list[LayerSpec]:
        return [
            LayerSpec(16, 5, 2),
            LayerSpec(32, 5, 2),
            LayerSpec(32, 5, 1),
            LayerSpec(32, 5, 1),
            LayerSpec(self.channels, 5, 1, activation="none"),
        ]

    @property
    def hidden_width(self) -> int:
        """Decoder width; shrinks by ``dm_filter_reduction`` when the DM is off."""
        if self.kind == "baseline" or self.dm_enabled:
            return HIDDEN
        return HIDDEN - self.dm_filter_reduction

    def decoder_specs(self) -> dict[str, LayerSpec]:
        w = self.hidden_width
        specs: dict[str, LayerSpec] = {}
        if self.kind == "adaptive":
            specs["fuse_z"] = LayerSpec(w, 5, 1, activation="none")
            specs["fuse_snr"] = LayerSpec(w, 5, 1, activation="none")
            if self.dm_enabled:
                kd = self.dm_kernel
                specs["dm_a"] = LayerSpec(w, kd, 1, 1, batch_norm=True)
                specs["dm_b"] = LayerSpec(w, kd, 1, self.dm_dilation, batch_norm=True)
        specs["deconv1"] = LayerSpec(w, 5, 1, transpose=True)
        specs["deconv2"] = LayerSpec(w, 5, 1, transpose=True)
        specs["deconv3"] = LayerSpec(w, 5, 2, transpose=True)
        # the last two widths are tied to output geometry (16 then RGB)
        specs["deconv4"] = LayerSpec(16, 5, 2, transpose=True)
        specs["deconv5"] = LayerSpec(3, 5, 1, activation="sigmoid", transpose=True)
        return specs


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def make_layer(spec: LayerSpec, in_channels: int) -> nn.Sequential:
    """Conv (or transposed conv) -> activation -> optional BN, with 'same'/x2 padding."""
    pad = spec.dilation * (spec.kernel - 1) // 2
    if spec.transpose:
        conv: nn.Module = nn.ConvTranspose2d(
            in_channels,
            spec.filters,
            spec.kernel,
            stride=spec.stride,
            padding=pad,
            output_padding=spec.stride - 1,
            dilation=spec.dilation,
        )
    else:
        conv = nn.Conv2d(
            in_channels, spec.filters, spec.kernel, stride=spec.stride, padding=pad, dilation=spec.dilation
        )
    mods = [conv]
    if spec.activation == "prelu":
        mods.append(nn.PReLU(spec.filters, init=0.25))
    elif spec.activation == "sigmoid":
        mods.append(nn.Sigmoid())
    if spec.batch_norm:
        mods.append(nn.BatchNorm2d(spec.filters))
    return nn.Sequential(*mods)


def build_snr_map(variance: float | torch.Tensor, shape: tuple[int, ...]) -> torch.Tensor:
    """Expand a noise-variance estimate (scalar or one per image) into a constant map."""
    v = torch.as_tensor(variance)
    if bool((v <= 0).any()):
        raise ValueError("estimated noise variance must be positive")
    return _expand_map(v, shape)


def _expand_map(v: torch.Tensor, shape: tuple[int, ...]) -> torch.Tensor:
    if v.ndim == 0:
        return v.expand(shape)
    if v.shape != (shape[0],):
        raise ShapeError(f"need one variance per image: got {tuple(v.shape)} for batch {shape[0]}")
    return v.reshape(-1, *([1] * (len(shape) - 1))).expand(shape)


class Fusion(nn.Module):
    """Merge channel-output features with the SNR map: ``conv_z(z) + conv_snr(map)``."""

    def __init__(self, in_channels: int, spec_z: LayerSpec, spec_snr: LayerSpec, mode: str = "sum"):
        super().__init__()
        self.mode = mode
        if mode == "sum":
            self.conv_z = make_layer(spec_z, in_channels)
            self.conv_snr = make_layer(spec_snr, in_channels)
        else:
            self.conv_z = make_layer(spec_z, 2 * in_channels)

    def forward(self, z_features: torch.Tensor, snr_map: torch.Tensor) -> torch.Tensor:
        if self.mode == "concat":
            return self.conv_z(torch.cat([z_features, snr_map], dim=1))
        a = self.conv_z(z_features)
        b = self.conv_snr(snr_map)
        if a.shape != b.shape:
            raise ShapeError(f"fusion branches disagree: {tuple(a.shape)} vs {tuple(b.shape)}")
        return a + b


class DenoisingModule(nn.Module):
    """Two residual branches (plain conv and dilated conv), averaged.

    ``DM(h) = ((h + f_a(h)) + (h + f_b(h))) / 2`` with each ``f`` a
    conv -> PReLU -> BN stack.
    """

    def __init__(self, channels: int, spec_a: LayerSpec, spec_b: LayerSpec):
        super().__init__()
        self.channels = channels
        self.branch_a = make_layer(spec_a, channels)
        self.branch_b = make_layer(spec_b, channels)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if h.shape[1] != self.channels:
            raise ShapeError(f"DM expects {self.channels} channels, got {h.shape[1]}")
        return 0.5 * ((h + self.branch_a(h)) + (h + self.branch_b(h)))


class Encoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        layers, c_in = [], 3
        for spec in config.encoder_specs():
            layers.append(make_layer(spec, c_in))
            c_in = spec.filters
        self.layers = nn.Sequential(*layers)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        s = self.config.image_size
        if images.ndim != 4 or tuple(images.shape[1:]) != (s, s, 3):
            raise ShapeError(f"expected (N, {s}, {s}, 3) images, got {tuple(images.shape)}")
        feats = self.layers(images.permute(0, 3, 1, 2))
        flat = feats.permute(0, 2, 3, 1).reshape(feats.shape[0], -1)
        return normalize_power(pack_complex(flat), self.config.power)


def symbols_to_features(z: torch.Tensor, config: ModelConfig) -> torch.Tensor:
    """Inverse of the encoder's packing: ``(N, k)`` complex -> ``(N, C, h, w)`` real."""
    if z.ndim != 2 or z.shape[1] != config.k:
        raise ShapeError(f"expected (N, {config.k}) symbols, got {tuple(z.shape)}")
    hw = config.latent_hw
    flat = unpack_complex(z)
    return flat.reshape(z.shape[0], hw, hw, config.channels).permute(0, 3, 1, 2)


class _DeconvStack(nn.Module):
    def __init__(self, specs: dict[str, LayerSpec], in_channels: int):
        super().__init__()
        c_in = in_channels
        for name in ("deconv1", "deconv2", "deconv3", "deconv4", "deconv5"):
            setattr(self, name, make_layer(specs[name], c_in))
            c_in = specs[name].filters


class AdaptiveDecoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        specs = config.decoder_specs()
        w = config.hidden_width
        self.fusion = Fusion(config.channels, specs["fuse_z"], specs["fuse_snr"], config.fusion)
        self.dm = DenoisingModule(w, specs["dm_a"], specs["dm_b"]) if config.dm_enabled else None
        self.stack = _DeconvStack(specs, w)

    def snr_map(self, variance: float | torch.Tensor, shape: tuple[int, ...]) -> torch.Tensor:
        v = torch.as_tensor(variance, dtype=torch.float64)
        if bool((v <= 0).any()):
            raise ValueError("estimated noise variance must be positive")
        v = v.clamp(*VARIANCE_CLAMP)
        if self.config.snr_map_units == "db":
            return _expand_map(10.0 * torch.log10(self.config.power / v), shape)
        return build_snr_map(v, shape)

    def forward(self, z: torch.Tensor, variance: float | torch.Tensor) -> torch.Tensor:
        feats = symbols_to_features(z, self.config)
        smap = self.snr_map(variance, tuple(feats.shape)).to(feats.dtype)
        h = self.fusion(feats, smap)
        u = h + self.dm(h) if self.dm is not None else h
        s = self.stack
        v = u + s.deconv2(s.deconv1(u))
        out = s.deconv5(s.deconv4(s.deconv3(v)))
        return out.permute(0, 2, 3, 1)


class BaselineDecoder(nn.Module):
    """Plain deconvolution stack: no SNR input, no DM, no short-circuits."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.stack = _DeconvStack(config.decoder_specs(), config.channels)

    def forward(self, z: torch.Tensor, variance: float | torch.Tensor | None = None) -> torch.Tensor:
        x = symbols_to_features(z, self.config)
        s = self.stack
        for layer in (s.deconv1, s.deconv2, s.deconv3, s.deconv4, s.deconv5):
            x = layer(x)
        return x.permute(0, 2, 3, 1)


class JSCC(nn.Module):
    """Encoder + AWGN channel + decoder. ``decode`` always takes a variance estimate."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.decoder = AdaptiveDecoder(config) if config.kind == "adaptive" else BaselineDecoder(config)

    @property
    def snr_adaptive(self) -> bool:
        return self.config.kind == "adaptive"

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(images)

    def decode(self, z: torch.Tensor, variance: float | torch.Tensor) -> torch.Tensor:
        v = torch.as_tensor(variance)
        if bool((v <= 0).any()):
            raise ValueError("estimated noise variance must be positive")
        return self.decoder(z, variance)

    def forward(
        self,
        images: torch.Tensor,
        variance: float | torch.Tensor,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        """Transmit at the given true noise variance; the decoder is told that variance."""
        y = self.encode(images)
        z = awgn(y, variance, generator=generator).received
        return self.decode(z, variance)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


class SnrAdaptiveJSCC(JSCC):
    def __init__(self, config: ModelConfig):
        if config.kind != "adaptive":
            raise ValueError("SnrAdaptiveJSCC needs kind='adaptive'")
        super().__init__(config)


class BaselineJSCC(JSCC):
    def __init__(self, config: ModelConfig):
        if config.kind != "baseline":
            raise ValueError("BaselineJSCC needs kind='baseline'")
        super().__init__(config)


def build_model(config: ModelConfig) -> JSCC:
    """Instantiate with weights drawn from ``config.seed`` (global RNG left untouched)."""
    cls = SnrAdaptiveJSCC if config.kind == "adaptive" else BaselineJSCC
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        return cls(config)


# ---------------------------------------------------------------------------
# checkpoints: a zip of .npy parameter arrays keyed by layer path + config.json
# ---------------------------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def _write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def save_checkpoint(
    path: str | Path,
    model: JSCC,
    train_state: dict[str, Any] | None = None,
    optimizer: torch.optim.Optimizer | None = None,
) -> Path:
    """Write a byte-reproducible archive; optimizer moments are included for resuming."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        _write(zf, "config.json", json.dumps(model.config.to_dict(), indent=2, sort_keys=True).encode())
        for key, t in model.state_dict().items():
            _write(zf, f"params/{key}.npy", _npy_bytes(t.detach().cpu().numpy()))
        if train_state is not None:
            _write(zf, "train_state.json", json.dumps(train_state, indent=2, sort_keys=True).encode())
        if optimizer is not None:
            sd = optimizer.state_dict()
            _write(zf, "optimizer/param_groups.json", json.dumps(sd["param_groups"], sort_keys=True).encode())
            for idx, st in sd["state"].items():
                for name, t in st.items():
                    arr = t.detach().cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
                    _write(zf, f"optimizer/state/{idx}/{name}.npy", _npy_bytes(arr))
    return path


def load_checkpoint(path: str | Path) -> tuple[JSCC, dict[str, Any]]:
    """Return ``(model, extras)``; extras holds ``train_state`` and ``optimizer`` when saved."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    extras: dict[str, Any] = {}
    with zipfile.ZipFile(path) as zf:
        names = zf.namelist()
        try:
            config = ModelConfig.from_dict(json.loads(zf.read("config.json")))
        except KeyError as e:
            raise CheckpointError(f"{path}: no config.json") from e
        model = build_model(config)
        expected = model.state_dict()
        state = {}
        for name in names:
            if name.startswith("params/"):
                key = name[len("params/") : -len(".npy")]
                state[key] = torch.from_numpy(np.load(io.BytesIO(zf.read(name))))
        missing, extra = set(expected) - set(state), set(state) - set(expected)
        if missing or extra:
            raise CheckpointError(f"parameter keys disagree with config: missing={sorted(missing)} extra={sorted(extra)}")
        for key, t in state.items():
            if tuple(t.shape) != tuple(expected[key].shape):
                raise CheckpointError(
                    f"{key}: shape {tuple(t.shape)} does not match config shape {tuple(expected[key].shape)}"
                )
        model.load_state_dict(state)
        if "train_state.json" in names:
            extras["train_state"] = json.loads(zf.read("train_state.json"))
        if "optimizer/param_groups.json" in names:
            opt_state: dict[int, dict[str, torch.Tensor]] = {}
            for name in names:
                if name.startswith("optimizer/state/"):
                    _, _, idx, fname = name.split("/")
                    opt_state.setdefault(int(idx), {})[fname[:-4]] = torch.from_numpy(
                        np.load(io.BytesIO(zf.read(name)))
                    )
            extras["optimizer"] = {
                "state": opt_state,
                "param_groups": json.loads(zf.read("optimizer/param_groups.json")),
            }
    return model, extras


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_digest(config: ModelConfig) -> str:
    return hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode()).hexdigest()

