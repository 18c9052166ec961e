"""Policy/value network: shared conv trunk, per-arm conv + dense stacks,
a small dense branch for the 3-vector, and three heads (drill decision,
drill location, state value).

The dataflow is hand-wired rather than run through a generic graph: maps go
through the trunk, each arm applies one convolution, flattens, concatenates
the vector embedding, and finishes with dense layers feeding the heads. The
vector branch output feeds both arms, so its backward pass accumulates both
contributions.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
import zlib

import numpy as np

from ..errors import IntegrityError, ShapeError
from .layers import Conv2D, Dense, ReLU, ResidualBlock


@dataclasses.dataclass(frozen=True)
class NetworkSpec:
    """Topology description; hashable so checkpoints can refuse mismatched loads."""

    variant: str
    ny: int
    nx: int
    in_channels: int = 4
    trunk_filters: tuple[int, ...] = (16, 32, 32)
    trunk_kernel: int = 3
    n_res_blocks: int = 0
    res_kernel: int = 3
    arm_filters: int = 32
    arm_kernel: int = 3
    arm_dense: tuple[int, ...] = (64,)
    vector_dense: tuple[int, ...] = (16, 16)
    vector_size: int = 3
    n_decisions: int = 3

    @property
    def n_locations(self) -> int:
        return self.nx * self.ny

    @staticmethod
    def small(ny: int, nx: int, width: float = 1.0) -> "NetworkSpec":
        s = max(1, round(16 * width))
        return NetworkSpec(variant="small", ny=ny, nx=nx,
                           trunk_filters=(s, 2 * s, 2 * s), arm_filters=2 * s,
                           arm_dense=(4 * s,), vector_dense=(s, s))

    @staticmethod
    def large(ny: int, nx: int, width: float = 1.0) -> "NetworkSpec":
        s = max(1, round(16 * width))
        return NetworkSpec(variant="large", ny=ny, nx=nx,
                           trunk_filters=(s, 2 * s), n_res_blocks=3, arm_filters=2 * s,
                           arm_dense=(4 * s,), vector_dense=(s, s))

    def spec_hash(self) -> bytes:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


@dataclasses.dataclass
class PolicyOutput:
    decision_logits: np.ndarray  # (B, 3)
    location_logits: np.ndarray  # (B, nx*ny)
    value: np.ndarray            # (B,)


class PolicyValueNet:
    def __init__(self, spec: NetworkSpec, seed: int = 0):
        self.spec = spec
        rng = np.random.default_rng(seed)

        self.trunk: list = []
        ch = spec.in_channels
        h, w = spec.ny, spec.nx
        for idx, f in enumerate(spec.trunk_filters):
            conv = Conv2D(f"trunk{idx}", ch, f, spec.trunk_kernel, "valid", rng)
            h, w = conv.out_size(h, w)
            self.trunk += [conv, ReLU(f"trunk{idx}.relu")]
            ch = f
        for idx in range(spec.n_res_blocks):
            self.trunk.append(ResidualBlock(f"res{idx}", ch, spec.res_kernel, rng))

        self.policy_conv = Conv2D("policy.conv", ch, spec.arm_filters, spec.arm_kernel, "valid", rng)
        self.policy_relu = ReLU("policy.conv.relu")
        self.value_conv = Conv2D("value.conv", ch, spec.arm_filters, spec.arm_kernel, "valid", rng)
        self.value_relu = ReLU("value.conv.relu")
        ah, aw = self.policy_conv.out_size(h, w)
        self._flat = ah * aw * spec.arm_filters

        self.vector_branch: list = []
        vin = spec.vector_size
        for idx, units in enumerate(spec.vector_dense):
            self.vector_branch += [Dense(f"vector{idx}", vin, units, rng), ReLU(f"vector{idx}.relu")]
            vin = units
        self._embed = vin

        def dense_stack(prefix: str) -> list:
            stack, features = [], self._flat + self._embed
            for idx, units in enumerate(spec.arm_dense):
                stack += [Dense(f"{prefix}{idx}", features, units, rng), ReLU(f"{prefix}{idx}.relu")]
                features = units
            return stack

        self.policy_dense = dense_stack("policy.fc")
        self.value_dense = dense_stack("value.fc")
        top = spec.arm_dense[-1] if spec.arm_dense else self._flat + self._embed
        self.decision_head = Dense("head.decision", top, spec.n_decisions, rng)
        self.location_head = Dense("head.location", top, spec.n_locations, rng)
        self.value_head = Dense("head.value", top, 1, rng)

        self._layers = (self.trunk + [self.policy_conv, self.value_conv]
                        + self.vector_branch + self.policy_dense + self.value_dense
                        + [self.decision_head, self.location_head, self.value_head])
        self._cache = None

    # --- parameter access ---------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for layer in self._layers:
            out.update(layer.params())
        return out

    def grads(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for layer in self._layers:
            out.update(layer.grads())
        return out

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        own = self.params()
        if set(values) != set(own):
            missing = sorted(set(own) ^ set(values))
            raise ShapeError(f"parameter set mismatch: {missing[:4]}")
        for name, arr in own.items():
            if arr.shape != values[name].shape:
                raise ShapeError(f"{name}: shape {values[name].shape} != {arr.shape}")
            arr[...] = values[name]

    def clone_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params().items()}

    # --- forward / backward ---------------------------------------------------

    def forward(self, maps: np.ndarray, vector: np.ndarray) -> PolicyOutput:
        spec = self.spec
        maps = np.asarray(maps, dtype=np.float64)
        vector = np.asarray(vector, dtype=np.float64)
        if maps.ndim == 3:
            maps = maps[None]
        if vector.ndim == 1:
            vector = vector[None]
        if maps.shape[1:] != (spec.ny, spec.nx, spec.in_channels):
            raise ShapeError(
                f"input maps: expected (B,{spec.ny},{spec.nx},{spec.in_channels}), got {maps.shape}"
            )
        if vector.shape != (maps.shape[0], spec.vector_size):
            raise ShapeError(f"input vector: expected (B,{spec.vector_size}), got {vector.shape}")

        t = maps
        for layer in self.trunk:
            t = layer.forward(t)
        pc = self.policy_relu.forward(self.policy_conv.forward(t))
        vc = self.value_relu.forward(self.value_conv.forward(t))
        b = maps.shape[0]
        flat_p = pc.reshape(b, -1)
        flat_v = vc.reshape(b, -1)

        e = vector
        for layer in self.vector_branch:
            e = layer.forward(e)

        hp = np.concatenate([flat_p, e], axis=1)
        hv = np.concatenate([flat_v, e], axis=1)
        for layer in self.policy_dense:
            hp = layer.forward(hp)
        for layer in self.value_dense:
            hv = layer.forward(hv)

        self._cache = (b, pc.shape, vc.shape)
        return PolicyOutput(
            decision_logits=self.decision_head.forward(hp),
            location_logits=self.location_head.forward(hp),
            value=self.value_head.forward(hv)[:, 0],
        )

    def backward(self, d_decision: np.ndarray, d_location: np.ndarray,
                 d_value: np.ndarray) -> None:
        """Accumulate parameter gradients for the cached forward pass."""
        if self._cache is None:
            raise RuntimeError("backward before forward")
        b, pc_shape, vc_shape = self._cache

        dhp = self.decision_head.backward(d_decision) + self.location_head.backward(d_location)
        dhv = self.value_head.backward(np.asarray(d_value).reshape(b, 1))
        for layer in reversed(self.policy_dense):
            dhp = layer.backward(dhp)
        for layer in reversed(self.value_dense):
            dhv = layer.backward(dhv)

        dflat_p, de_p = dhp[:, :self._flat], dhp[:, self._flat:]
        dflat_v, de_v = dhv[:, :self._flat], dhv[:, self._flat:]
        de = de_p + de_v
        for layer in reversed(self.vector_branch):
            de = layer.backward(de)

        dpc = self.policy_relu.backward(dflat_p.reshape(pc_shape))
        dvc = self.value_relu.backward(dflat_v.reshape(vc_shape))
        dt = self.policy_conv.backward(dpc) + self.value_conv.backward(dvc)
        for layer in reversed(self.trunk):
            dt = layer.backward(dt)


# --- checkpoint blobs -------------------------------------------------------

_MAGIC = b"FDCK"
_VERSION = 1
_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


def save_blob(path, spec_hash: bytes, arrays: dict[str, np.ndarray]) -> None:
    """Versioned binary container: named little-endian arrays plus a checksum."""
    parts = [_MAGIC, struct.pack("<I", _VERSION), spec_hash, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = "<i8" if np.issubdtype(arr.dtype, np.integer) else "<f8"
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(code.encode())
        parts.append(struct.pack("<H", data.ndim) + struct.pack(f"<{data.ndim}q", *data.shape))
        parts.append(data.tobytes())
    payload = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(payload + struct.pack("<I", zlib.crc32(payload)))


def load_blob(path, spec_hash: bytes | None = None) -> dict[str, np.ndarray]:
    """Read a checkpoint blob; refuses bad magic, checksum, or spec hash."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 44 or raw[:4] != _MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint file")
    payload, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) != crc:
        raise IntegrityError(f"{path}: checksum mismatch")
    (version,) = struct.unpack_from("<I", payload, 4)
    if version != _VERSION:
        raise IntegrityError(f"{path}: unsupported checkpoint version {version}")
    stored_hash = payload[8:40]
    if spec_hash is not None and stored_hash != spec_hash:
        raise IntegrityError(
            f"{path}: checkpoint was written for a different network spec; refusing to load"
        )
    (count,) = struct.unpack_from("<I", payload, 40)
    off = 44
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", payload, off)
        off += 2
        name = payload[off:off + nlen].decode()
        off += nlen
        code = payload[off:off + 3].decode()
        off += 3
        (ndim,) = struct.unpack_from("<H", payload, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}q", payload, off)
        off += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(payload, dtype=_DTYPES[code], count=n, offset=off).reshape(shape)
        off += n * 8
        out[name] = arr.copy()
    return out
