"""1D-CNN for SOZ / non-SOZ window classification, plus its checkpoint format.

The conv stack is organised in blocks of ``convs_per_block`` same-padded
convolutions (each followed by ReLU), then max-pool and dropout. The
flattened output of the last block is the feature tap used for patient
similarity; it is exactly what the first fully connected layer consumes.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEFAULT_CONV_SPEC = (
    (1, 32, 3, 1), (32, 32, 3, 1),
    (32, 64, 3, 1), (64, 64, 3, 1),
    (64, 128, 3, 1), (128, 128, 3, 1),
    (128, 256, 3, 1), (256, 256, 3, 1),
    (256, 256, 3, 1), (256, 256, 3, 1),
)
DEFAULT_FC_SPEC = (512, 256, 128, 64, 2)

CHECKPOINT_MAGIC = b"SOZN1"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    """Not a checkpoint, or an unsupported version."""


class CheckpointTruncatedError(CheckpointError):
    pass


class StageMismatchError(ValueError):
    """Artifacts from different models, folds or patient sets were combined."""


class CheckpointIntegrityError(CheckpointError):
    """Payload does not hash to the stored fingerprint."""


@dataclass(frozen=True)
class SozNetConfig:
    input_length: int = 3000
    conv_spec: tuple = DEFAULT_CONV_SPEC
    convs_per_block: int = 2
    block_pool: tuple = (4, 4)
    conv_dropout: float = 0.3
    fc_spec: tuple = DEFAULT_FC_SPEC
    fc_dropout: float = 0.5
    padding: int = 1

    def __post_init__(self):
        object.__setattr__(self, "conv_spec", tuple(tuple(int(v) for v in layer) for layer in self.conv_spec))
        object.__setattr__(self, "fc_spec", tuple(int(v) for v in self.fc_spec))
        object.__setattr__(self, "block_pool", tuple(int(v) for v in self.block_pool))

    @classmethod
    def desk(cls, input_length: int = 750) -> "SozNetConfig":
        """Four-block variant (first eight conv layers) for 750-sample windows; flatten width stays 512."""
        return cls(input_length=input_length, conv_spec=DEFAULT_CONV_SPEC[:8])

    @property
    def n_blocks(self) -> int:
        return len(self.conv_spec) // self.convs_per_block

    def block_lengths(self) -> list[int]:
        """Sequence length at the input and after each block."""
        lengths = [self.input_length]
        length = self.input_length
        pool_k, pool_s = self.block_pool
        for b in range(self.n_blocks):
            for _, _, k, s in self.conv_spec[b * self.convs_per_block:(b + 1) * self.convs_per_block]:
                length = T.conv_output_length(length, k, s, self.padding) if length + 2 * self.padding >= k else 0
            length = T.pool_output_length(length, pool_k, pool_s) if length >= pool_k else 0
            lengths.append(max(length, 0))
        return lengths

    def flatten_width(self) -> int:
        return self.block_lengths()[-1] * self.conv_spec[-1][1]

    def validate(self) -> None:
        if not self.conv_spec or len(self.conv_spec) % self.convs_per_block:
            raise ConfigError(f"{len(self.conv_spec)} conv layers do not split into blocks of {self.convs_per_block}")
        if self.conv_spec[0][0] != 1:
            raise ConfigError("first conv layer must take a single input channel")
        for prev, layer in zip(self.conv_spec, self.conv_spec[1:]):
            if layer[0] != prev[1]:
                raise ConfigError(f"conv layer {layer} does not chain from {prev}")
        if len(self.fc_spec) < 2:
            raise ConfigError("fc_spec needs at least an input and an output width")
        width = self.flatten_width()
        if width != self.fc_spec[0]:
            raise ConfigError(
                f"flatten width after the conv stack is {width} (lengths {self.block_lengths()}), "
                f"but fc_spec starts at {self.fc_spec[0]}")
        for p in (self.conv_dropout, self.fc_dropout):
            if not 0 <= p < 1:
                raise ConfigError(f"dropout probability {p} outside [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_spec"] = [list(layer) for layer in self.conv_spec]
        d["fc_spec"] = list(self.fc_spec)
        d["block_pool"] = list(self.block_pool)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SozNetConfig":
        return cls(**d)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def _fan_in_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    # unit gain: the ReLU gain of 2 starts the deep stack at logits ~5 and a loss far above ln 2
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class SozNet:
    config: SozNetConfig
    params: dict  # name -> Tensor, in declaration order
    seed: Optional[int] = None
    provenance: dict = field(default_factory=dict)

    def parameters(self) -> list:
        return list(self.params.values())

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.params.items()}

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def _as_input(self, batch) -> Tensor:
        data = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
        if data.ndim == 3:
            if data.shape[1] != 1:
                raise T.ShapeError(f"expected single-channel windows (N, 1, L), got {data.shape}")
            data = data[:, 0, :]
        if data.ndim != 2:
            raise T.ShapeError(f"expected a batch of windows (N, 1, L) or (N, L), got {data.shape}")
        if data.shape[1] != self.config.input_length:
            raise T.ShapeError(f"window length {data.shape[1]} != configured {self.config.input_length}")
        # (N, L) -> channels-last (N, L, 1) without copying
        return Tensor(data.astype(self.dtype, copy=False).reshape(data.shape[0], data.shape[1], 1))

    def _trunk(self, x: Tensor, training: bool, rng) -> Tensor:
        cfg = self.config
        pool_k, pool_s = cfg.block_pool
        layer = 0
        for _ in range(cfg.n_blocks):
            for i in range(cfg.convs_per_block):
                stride = cfg.conv_spec[layer][3]
                x = T.conv1d(x, self.params[f"conv{layer}.weight"], self.params[f"conv{layer}.bias"],
                             stride=stride, padding=cfg.padding, channels_last=True)
                layer += 1
                if i < cfg.convs_per_block - 1:
                    x = T.relu(x)
            # relu and max-pool commute (values and gradients), pooling first is 4x cheaper
            x = T.relu(T.maxpool1d(x, pool_k, pool_s, channels_last=True))
            x = T.dropout(x, cfg.conv_dropout, training, rng)
        return T.flatten(x)

    def _head(self, h: Tensor, training: bool, rng) -> Tensor:
        n_fc = len(self.config.fc_spec) - 1
        for j in range(n_fc):
            h = T.linear(h, self.params[f"fc{j}.weight"], self.params[f"fc{j}.bias"])
            if j < n_fc - 1:
                h = T.relu(h)
                h = T.dropout(h, self.config.fc_dropout, training, rng)
        return h

    def forward(self, batch, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Logits (N, n_classes) for a batch of windows shaped (N, 1, L) or (N, L)."""
        x = self._as_input(batch)
        return self._head(self._trunk(x, training, rng), training, rng)

    __call__ = forward

    def extract_features(self, batch) -> np.ndarray:
        """Flattened last-block activations in eval mode, one row per window."""
        return self._trunk(self._as_input(batch), False, None).data

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.config.canonical_json().encode())
        for p in self.params.values():
            h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return h.hexdigest()

    def copy(self) -> "SozNet":
        params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return SozNet(self.config, params, self.seed, json.loads(json.dumps(self.provenance)))


def build(config: SozNetConfig, seed: int = 0, dtype=None) -> SozNet:
    """Initialise a network: Kaiming-uniform (fan-in) weights and zero biases."""
    config.validate()
    dtype = dtype or T.default_dtype()
    rng = np.random.default_rng(seed)
    params = {}
    for i, (c_in, c_out, k, _) in enumerate(config.conv_spec):
        params[f"conv{i}.weight"] = _fan_in_uniform(rng, (c_out, c_in, k), c_in * k, dtype)
        params[f"conv{i}.bias"] = np.zeros(c_out, dtype=dtype)
    for j, (f_in, f_out) in enumerate(zip(config.fc_spec, config.fc_spec[1:])):
        params[f"fc{j}.weight"] = _fan_in_uniform(rng, (f_out, f_in), f_in, dtype)
        params[f"fc{j}.bias"] = np.zeros(f_out, dtype=dtype)
    tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    return SozNet(config, tensors, seed)


def save_checkpoint(net: SozNet) -> bytes:
    """Serialize: magic, version, JSON header (config, fingerprint, layout, provenance), f32 payload."""
    fingerprint = net.fingerprint()
    header = {
        "config": net.config.to_dict(),
        "fingerprint": fingerprint,
        "params": [[name, list(p.shape)] for name, p in net.params.items()],
        "seed": net.seed,
        "provenance": net.provenance,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(np.ascontiguousarray(p.data, dtype="<f4").tobytes() for p in net.params.values())
    return CHECKPOINT_MAGIC + struct.pack("<HI", CHECKPOINT_VERSION, len(header_bytes)) + header_bytes + payload


def load_checkpoint(blob: bytes) -> SozNet:
    prefix = len(CHECKPOINT_MAGIC) + 6
    if len(blob) < prefix:
        raise CheckpointTruncatedError(f"checkpoint is only {len(blob)} bytes")
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad magic; not a SozNet checkpoint")
    version, header_len = struct.unpack("<HI", blob[len(CHECKPOINT_MAGIC):prefix])
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    if len(blob) < prefix + header_len:
        raise CheckpointTruncatedError("checkpoint header is truncated")
    try:
        header = json.loads(blob[prefix:prefix + header_len])
    except ValueError as exc:
        raise CheckpointIntegrityError(f"unreadable checkpoint header: {exc}") from exc
    config = SozNetConfig.from_dict(header["config"])
    payload = memoryview(blob)[prefix + header_len:]
    expected = sum(int(np.prod(shape)) for _, shape in header["params"]) * 4
    if len(payload) < expected:
        raise CheckpointTruncatedError(f"payload has {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise CheckpointIntegrityError(f"payload has {len(payload) - expected} trailing bytes")
    params, offset = {}, 0
    for name, shape in header["params"]:
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).astype(np.float32).reshape(shape)
        params[name] = Tensor(arr, requires_grad=True, name=name)
        offset += count * 4
    net = SozNet(config, params, header.get("seed"), header.get("provenance") or {})
    if net.fingerprint() != header["fingerprint"]:
        raise CheckpointIntegrityError("checkpoint fingerprint mismatch; file is corrupt")
    return net


@dataclass
class FeatureSet:
    """Last-block features of one patient's windows, tied to the model that produced them."""
    patient_id: str
    matrix: np.ndarray
    model_fingerprint: str

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix)
        if self.matrix.ndim != 2:
            raise ValueError(f"feature matrix must be 2-d, got {self.matrix.shape}")

    @property
    def feature_dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.matrix)


def features_fingerprint(feature_sets) -> str:
    h = hashlib.sha256()
    for fs in feature_sets:
        h.update(fs.patient_id.encode())
        h.update(fs.model_fingerprint.encode())
        h.update(np.ascontiguousarray(fs.matrix, dtype="<f8").tobytes())
    return h.hexdigest()


def save_features(feature_sets, path) -> str:
    """Store feature sets in one ``.npz``; returns the combined fingerprint."""
    feature_sets = list(feature_sets)
    fp = features_fingerprint(feature_sets)
    meta = {
        "fingerprint": fp,
        "patients": [[fs.patient_id, fs.model_fingerprint] for fs in feature_sets],
    }
    arrays = {f"f{i}": fs.matrix for i, fs in enumerate(feature_sets)}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    return fp


def load_features(path) -> list:
    with np.load(path) as data:
        meta = json.loads(data["__meta__"].tobytes())
        out = [FeatureSet(pid, data[f"f{i}"], mfp) for i, (pid, mfp) in enumerate(meta["patients"])]
    if features_fingerprint(out) != meta["fingerprint"]:
        raise CheckpointIntegrityError(f"feature file {path} does not match its fingerprint")
    return out
