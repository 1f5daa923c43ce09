"""Feature extractors, the VAE + classifier model, and parameter files."""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


@dataclass(frozen=True)
class ModelConfig:
    feature_length: int = 1024
    hidden: int = 2000
    latent: int = 100
    num_classes: int = 100
    extractor: str = "conv"  # "conv" | "identity"
    image_shape: tuple = (3, 32, 32)
    conv_channels: tuple = (16, 32, 64, 128, 256)
    conv_strides: tuple = (1, 2, 2, 2, 2)

    def __post_init__(self):
        if self.extractor not in ("conv", "identity"):
            raise ValueError(f"unknown extractor {self.extractor!r}")
        if self.extractor == "conv" and len(self.conv_channels) != len(self.conv_strides):
            raise ValueError("conv_channels and conv_strides must have equal length")
        if self.extractor_output_length() != self.feature_length:
            raise ValueError(
                f"extractor produces {self.extractor_output_length()} features "
                f"but feature_length is {self.feature_length}"
            )

    def extractor_output_length(self) -> int:
        c, h, w = self.image_shape
        if self.extractor == "identity":
            return c * h * w
        for s in self.conv_strides:
            h = (h - 1) // s + 1
            w = (w - 1) // s + 1
        return self.conv_channels[-1] * h * w


PRESETS = {
    "full": ModelConfig(),
    "desk": ModelConfig(
        feature_length=256, hidden=400, latent=32, num_classes=10,
        extractor="identity", image_shape=(1, 16, 16),
    ),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides)


def _kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=None):
        dtype = dtype or ad.get_default_dtype()
        self.weight = Tensor(_kaiming_uniform(rng, (n_in, n_out), n_in), requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise DimensionError(f"linear layer expects width {self.weight.shape[0]}, got {x.shape}")
        return ad.add(ad.matmul(x, self.weight), self.bias)


class IdentityExtractor:
    """Flattens images; the desk-scale stand-in for the conv stack."""

    frozen = True

    def __init__(self, image_shape: tuple):
        self.image_shape = tuple(image_shape)

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def __call__(self, images) -> Tensor:
        x = np.asarray(images.data if isinstance(images, Tensor) else images)
        if x.shape[1:] != self.image_shape:
            raise DimensionError(f"expected images of shape (B, {self.image_shape}), got {x.shape}")
        return Tensor(x.reshape(len(x), -1), dtype=ad.get_default_dtype())


class ConvFeatureExtractor:
    """Stack of 3x3 / padding-1 conv layers with ReLU, flattened at the end."""

    def __init__(self, image_shape: tuple, channels: Iterable[int], strides: Iterable[int],
                 rng: np.random.Generator, dtype=None):
        dtype = dtype or ad.get_default_dtype()
        self.image_shape = tuple(image_shape)
        self.strides = tuple(strides)
        self.kernels: list[Tensor] = []
        self.biases: list[Tensor] = []
        c_in = self.image_shape[0]
        for c_out in channels:
            k = _kaiming_uniform(rng, (c_out, c_in, 3, 3), c_in * 9)
            self.kernels.append(Tensor(k, requires_grad=True, dtype=dtype))
            self.biases.append(Tensor(np.zeros((1, c_out, 1, 1)), requires_grad=True, dtype=dtype))
            c_in = c_out
        self.frozen = False

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            out[f"extractor.conv{i + 1}.weight"] = k
            out[f"extractor.conv{i + 1}.bias"] = b
        return out

    def freeze(self) -> None:
        self.frozen = True
        for p in self.parameters().values():
            p.requires_grad = False
            p.grad = None

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1:] != self.image_shape:
            raise DimensionError(f"expected images of shape (B, {self.image_shape}), got {x.shape}")
        for k, b, s in zip(self.kernels, self.biases, self.strides):
            x = ad.relu(ad.add(ad.conv2d(x, k, stride=s), b))
        return ad.reshape(x, (x.shape[0], -1))

    def __call__(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(images)
        if self.frozen:
            with ad.no_grad():
                return self.forward(x).detach()
        return self.forward(x)


def extract_features(extractor, images) -> Tensor:
    """Frozen forward pass from images to feature rows ``h``."""
    if not extractor.frozen:
        raise RuntimeError("feature extractor must be pretrained and frozen first")
    return extractor(images)


def build_extractor(cfg: ModelConfig, rng: Optional[np.random.Generator] = None):
    if cfg.extractor == "identity":
        return IdentityExtractor(cfg.image_shape)
    return ConvFeatureExtractor(cfg.image_shape, cfg.conv_channels, cfg.conv_strides,
                                rng or np.random.default_rng(0))


class SleepModel:
    """Symmetric VAE over feature vectors with a softmax head on the last encoder layer.

    Output units exist for every class from the start; class-incremental
    behaviour comes from the ``mask`` passed to :meth:`classify`.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=None):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d, h, z = cfg.feature_length, cfg.hidden, cfg.latent
        self.layers: dict[str, Linear] = {
            "encoder.fc1": Linear(d, h, rng, dtype),
            "encoder.fc2": Linear(h, h, rng, dtype),
            "encoder.mu": Linear(h, z, rng, dtype),
            "encoder.log_var": Linear(h, z, rng, dtype),
            "decoder.fc1": Linear(z, h, rng, dtype),
            "decoder.fc2": Linear(h, h, rng, dtype),
            "decoder.out": Linear(h, d, rng, dtype),
            "classifier": Linear(h, cfg.num_classes, rng, dtype),
        }

    def encode(self, h: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        L = self.layers
        if h.ndim != 2 or h.shape[1] != self.cfg.feature_length:
            raise DimensionError(f"encoder expects (B, {self.cfg.feature_length}), got {h.shape}")
        a = ad.relu(L["encoder.fc1"](h))
        pen = ad.relu(L["encoder.fc2"](a))
        return pen, L["encoder.mu"](pen), L["encoder.log_var"](pen)

    def decode(self, z: Tensor) -> Tensor:
        L = self.layers
        if z.ndim != 2 or z.shape[1] != self.cfg.latent:
            raise DimensionError(f"decoder expects (B, {self.cfg.latent}), got {z.shape}")
        a = ad.relu(L["decoder.fc1"](z))
        a = ad.relu(L["decoder.fc2"](a))
        return L["decoder.out"](a)

    def logits(self, penultimate: Tensor) -> Tensor:
        return self.layers["classifier"](penultimate)

    def classify(self, penultimate: Tensor, mask=None) -> Tensor:
        return ad.softmax(self.logits(penultimate), mask)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, layer in self.layers.items():
            out[f"{name}.weight"] = layer.weight
            out[f"{name}.bias"] = layer.bias
        return out

    def weight_names(self) -> list[str]:
        return [f"{name}.weight" for name in self.layers]

    def copy(self) -> "SleepModel":
        return copy.deepcopy(self)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise DimensionError(f"{k}: stored shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)


# -- parameter files ----------------------------------------------------------------------
MAGIC = b"SLPARAMS"
FORMAT_VERSION = 1


class ParamFormatError(ValueError):
    pass


@dataclass
class ParameterSet:
    tensors: dict[str, np.ndarray]
    trainable: dict[str, bool]
    metadata: dict = field(default_factory=dict)


def parameter_set(params: dict[str, Tensor], metadata: Optional[dict] = None) -> ParameterSet:
    return ParameterSet(
        tensors={k: v.data for k, v in params.items()},
        trainable={k: bool(v.requires_grad) for k, v in params.items()},
        metadata=dict(metadata or {}),
    )


def save_params(path, params, metadata: Optional[dict] = None) -> None:
    """Write a JSON header followed by raw little-endian payloads in header order."""
    if isinstance(params, ParameterSet):
        pset = params
    else:
        if hasattr(params, "parameters"):
            params = params.parameters()
        pset = parameter_set(params, metadata)
    entries, blobs = [], []
    for name, arr in pset.tensors.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        entries.append({
            "name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
            "trainable": pset.trainable.get(name, True), "nbytes": le.nbytes,
        })
        blobs.append(le.tobytes())
    header = json.dumps({"format_version": FORMAT_VERSION, "tensors": entries,
                         "metadata": pset.metadata}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def load_params(path) -> ParameterSet:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4 or raw[:len(MAGIC)] != MAGIC:
        raise ParamFormatError(f"{path}: not a parameter file (bad magic)")
    (hlen,) = struct.unpack_from("<I", raw, len(MAGIC))
    off = len(MAGIC) + 4
    if off + hlen > len(raw):
        raise ParamFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[off:off + hlen])
    except ValueError as exc:
        raise ParamFormatError(f"{path}: corrupt header ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise ParamFormatError(f"{path}: format version {header.get('format_version')} != {FORMAT_VERSION}")
    off += hlen
    tensors, trainable = {}, {}
    for e in header["tensors"]:
        n = e["nbytes"]
        if off + n > len(raw):
            raise ParamFormatError(f"{path}: truncated payload for {e['name']} at byte {off}")
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]), count=n // np.dtype(e["dtype"]).itemsize, offset=off)
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
        trainable[e["name"]] = e["trainable"]
        off += n
    if off != len(raw):
        raise ParamFormatError(f"{path}: {len(raw) - off} trailing bytes")
    return ParameterSet(tensors, trainable, header.get("metadata", {}))


def save_extractor(path, extractor: ConvFeatureExtractor, metadata: Optional[dict] = None) -> None:
    meta = {"kind": "conv_extractor", "image_shape": list(extractor.image_shape),
            "channels": [k.shape[0] for k in extractor.kernels], "strides": list(extractor.strides)}
    meta.update(metadata or {})
    save_params(path, parameter_set(extractor.parameters(), meta))


def load_extractor(path) -> ConvFeatureExtractor:
    pset = load_params(path)
    meta = pset.metadata
    if meta.get("kind") != "conv_extractor":
        raise ParamFormatError(f"{path}: not a feature-extractor file")
    ex = ConvFeatureExtractor(tuple(meta["image_shape"]), meta["channels"], meta["strides"],
                              np.random.default_rng(0))
    for name, p in ex.parameters().items():
        p.data = pset.tensors[name].astype(ad.get_default_dtype())
    ex.freeze()
    return ex


def model_metadata(model: SleepModel) -> dict:
    cfg = asdict(model.cfg)
    return {"kind": "sleep_model", "config": {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()}}
