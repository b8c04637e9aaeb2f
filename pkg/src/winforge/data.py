"""Bounded synthetic regression data.

Inputs are drawn uniformly from the radius-c ball (gaussian direction,
radius proportional to U^(1/d)); labels come from a seeded ground-truth
generator plus optional gaussian noise and are clipped to [-c, c]. Train
and test use independent streams, so resizing one never perturbs the other.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, MalformedFileError
from .net import Network, network_forward_batch
from .seeds import rng_for
from .train import InitSpec, Uniform, chain_arch, init_network

_BINARY_MAGIC = b"WFD1"


@dataclass
class Dataset:
    xs: np.ndarray          # (N, d)
    ys: np.ndarray          # (N,)
    c: float                # bound: ||x_i|| <= c and |y_i| <= c
    generator: dict         # descriptor (kind + parameters + seed)

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=np.float64)
        self.ys = np.asarray(self.ys, dtype=np.float64)
        if self.xs.ndim != 2 or self.ys.ndim != 1 or self.xs.shape[0] != self.ys.shape[0]:
            raise ConfigError(
                f"dataset arrays inconsistent: xs {self.xs.shape}, ys {self.ys.shape}"
            )
        if self.xs.shape[0] < 1:
            raise ConfigError("dataset must contain at least one sample")
        if not (np.all(np.isfinite(self.xs)) and np.all(np.isfinite(self.ys))):
            raise ConfigError("dataset contains non-finite entries")
        norms = np.linalg.norm(self.xs, axis=1)
        # hard bound, not statistical; tiny slack for norm roundoff
        if np.any(norms > self.c * (1 + 1e-12)):
            raise ConfigError("input norms exceed the declared bound c")
        if np.any(np.abs(self.ys) > self.c):
            raise ConfigError("labels exceed the declared bound c")

    @property
    def n(self) -> int:
        return self.xs.shape[0]

    @property
    def d(self) -> int:
        return self.xs.shape[1]


@dataclass(frozen=True)
class GeneratorSpec:
    """Ground-truth generator description.

    kind: "teacher_net" (seeded 2-layer-ish mean-field net, output rescaled
    to a target spread), "sin_of_projection", or "norm_sq_saturated".
    """

    kind: str = "teacher_net"
    d: int = 8
    n_train: int = 256
    n_test: int = 256
    c: float = 2.0
    noise_sigma: float = 0.0
    seed: int = 0
    params: dict = field(default_factory=dict)

    def validate(self):
        if self.kind not in ("teacher_net", "sin_of_projection", "norm_sq_saturated"):
            raise ConfigError(f"unknown generator kind {self.kind!r}")
        if self.d < 1 or self.n_train < 1 or self.n_test < 1:
            raise ConfigError("d, n_train, n_test must be positive")
        if not (math.isfinite(self.c) and self.c > 0):
            raise ConfigError("bound c must be positive and finite")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "d": self.d,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "c": self.c,
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
            "params": dict(self.params),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown GeneratorSpec fields: {sorted(extra)}")
        return cls(**d)


def _sample_ball(rng: np.random.Generator, n: int, d: int, c: float) -> np.ndarray:
    g = rng.standard_normal((n, d))
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    radii = c * rng.uniform(0.0, 1.0, size=(n, 1)) ** (1.0 / d)
    return g / norms * radii


class _GroundTruth:
    def __init__(self, spec: GeneratorSpec):
        self.spec = spec
        p = spec.params
        if spec.kind == "teacher_net":
            depth = int(p.get("depth", 2))
            width = int(p.get("width", 32))
            scale = float(p.get("init_scale", 2.0))
            arch = chain_arch(depth, width, spec.d)
            self.net = init_network(arch, InitSpec(Uniform(-scale, scale)), spec.seed)
            # deterministic output normalization on an internal probe stream
            probes = _sample_ball(rng_for(spec.seed, "gen-probe"), 512, spec.d, spec.c)
            raw, _ = network_forward_batch(self.net, probes)
            std = float(np.std(raw[:, 0]))
            target = float(p.get("target_std", 0.5 * spec.c))
            self.gain = target / std if std > 0 else 1.0
        elif spec.kind == "sin_of_projection":
            rng = rng_for(spec.seed, "gen-proj")
            w = rng.standard_normal(spec.d)
            self.w = w / np.linalg.norm(w)
            self.freq = float(p.get("freq", 2.0))
        # norm_sq_saturated needs no drawn parameters

    def __call__(self, xs: np.ndarray) -> np.ndarray:
        spec = self.spec
        if spec.kind == "teacher_net":
            raw, _ = network_forward_batch(self.net, xs)
            return self.gain * raw[:, 0]
        if spec.kind == "sin_of_projection":
            return spec.c * np.sin(self.freq * (xs @ self.w))
        sq = np.sum(xs * xs, axis=1)
        return spec.c * np.tanh(2.0 * sq / spec.c**2 - 1.0)


def gen_dataset(spec: GeneratorSpec) -> tuple[Dataset, Dataset]:
    """Seeded (train, test) pair; the two splits use independent streams."""
    spec.validate()
    truth = _GroundTruth(spec)
    out = []
    for split, count in (("train", spec.n_train), ("test", spec.n_test)):
        xs = _sample_ball(rng_for(spec.seed, "xs", split), count, spec.d, spec.c)
        ys = truth(xs)
        if spec.noise_sigma > 0:
            ys = ys + rng_for(spec.seed, "noise", split).normal(
                0.0, spec.noise_sigma, size=count
            )
        ys = np.clip(ys, -spec.c, spec.c)
        desc = spec.to_dict()
        desc["split"] = split
        out.append(Dataset(xs, ys, spec.c, desc))
    return out[0], out[1]


# --------------------------------------------------------------------------
# File formats. Text: a JSON header line with d, N, c, and the generator
# descriptor, then CSV rows x_1..x_d,y using shortest round-trip floats.
# Binary: "WFD1" magic, little-endian layout, float64 payload. Both
# round-trip bit-exactly.


def dataset_to_text(ds: Dataset) -> str:
    header = json.dumps(
        {"d": ds.d, "N": ds.n, "c": ds.c, "generator": ds.generator},
        sort_keys=True,
    )
    lines = [header]
    for i in range(ds.n):
        row = [repr(float(v)) for v in ds.xs[i]] + [repr(float(ds.ys[i]))]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def dataset_from_text(text: str) -> Dataset:
    lines = text.strip("\n").split("\n")
    try:
        header = json.loads(lines[0])
        d, n, c = int(header["d"]), int(header["N"]), float(header["c"])
        generator = header["generator"]
    except (json.JSONDecodeError, KeyError, ValueError, IndexError) as e:
        raise MalformedFileError(f"bad dataset header: {e}") from e
    if len(lines) - 1 != n:
        raise MalformedFileError(f"expected {n} rows, found {len(lines) - 1}")
    xs = np.empty((n, d))
    ys = np.empty(n)
    for i, line in enumerate(lines[1:]):
        parts = line.split(",")
        if len(parts) != d + 1:
            raise MalformedFileError(f"row {i} has {len(parts)} fields, expected {d + 1}")
        try:
            vals = [float(p) for p in parts]
        except ValueError as e:
            raise MalformedFileError(f"row {i}: {e}") from e
        xs[i] = vals[:d]
        ys[i] = vals[d]
    return Dataset(xs, ys, c, generator)


_HEADER = struct.Struct("<4sIIQdI")  # magic, version, d, N, c, descriptor length


def dataset_to_bytes(ds: Dataset) -> bytes:
    desc = json.dumps(ds.generator, sort_keys=True).encode("utf-8")
    head = _HEADER.pack(_BINARY_MAGIC, 1, ds.d, ds.n, ds.c, len(desc))
    return head + desc + ds.xs.astype("<f8").tobytes() + ds.ys.astype("<f8").tobytes()


def dataset_from_bytes(buf: bytes) -> Dataset:
    if len(buf) < _HEADER.size or buf[:4] != _BINARY_MAGIC:
        raise MalformedFileError("not a WFD1 dataset container")
    magic, version, d, n, c, desc_len = _HEADER.unpack_from(buf, 0)
    if version != 1:
        from .errors import FormatVersionError

        raise FormatVersionError(f"unsupported dataset format version {version}")
    off = _HEADER.size
    expected = off + desc_len + 8 * n * d + 8 * n
    if len(buf) != expected:
        raise MalformedFileError(
            f"dataset container has {len(buf)} bytes, expected {expected}"
        )
    try:
        generator = json.loads(buf[off : off + desc_len].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise MalformedFileError(f"bad generator descriptor: {e}") from e
    off += desc_len
    xs = np.frombuffer(buf, "<f8", n * d, off).reshape(n, d).copy()
    ys = np.frombuffer(buf, "<f8", n, off + 8 * n * d).copy()
    return Dataset(xs, ys, c, generator)


def save_dataset(ds: Dataset, path) -> None:
    from .persist import atomic_write_bytes

    path = str(path)
    if path.endswith(".wfd"):
        atomic_write_bytes(path, dataset_to_bytes(ds))
    else:
        atomic_write_bytes(path, dataset_to_text(ds).encode("utf-8"))


def load_dataset(path) -> Dataset:
    path = str(path)
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] == _BINARY_MAGIC:
        return dataset_from_bytes(buf)
    try:
        return dataset_from_text(buf.decode("utf-8"))
    except UnicodeDecodeError as e:
        raise MalformedFileError(f"{path}: not a dataset file: {e}") from e
