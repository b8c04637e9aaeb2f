"""Initialization, losses, and seeded minibatch SGD.

Training is functional: ``sgd_train`` never mutates its input network and
is bit-reproducible for a fixed (inputs, config) when run single-threaded.
Minibatches come from a fresh without-replacement shuffle per epoch whose
order depends only on (seed, epoch index).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DimensionError, NonFiniteError
from .net import (
    LinearMap,
    MeanFieldLayer,
    Network,
    lin_backward,
    lin_forward,
    mf_backward,
    mf_forward_full,
)
from .seeds import rng_for

# --------------------------------------------------------------------------
# Architecture descriptions


@dataclass(frozen=True)
class LayerSpec:
    d_in: int
    d_out: int
    m: int


@dataclass(frozen=True)
class ArchSpec:
    """Mean-field architecture: one LayerSpec per layer plus activation."""

    layers: tuple
    activation: str = "tanh"

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("architecture needs at least one layer")
        for spec in self.layers:
            if spec.d_in < 1 or spec.d_out < 1 or spec.m < 1:
                raise ConfigError(f"invalid layer spec {spec}")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.d_out != b.d_in:
                raise ConfigError(f"dimension chain broken: {a} -> {b}")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].d_in

    @property
    def output_dim(self) -> int:
        return self.layers[-1].d_out


def chain_arch(n: int, m: int, d: int, hidden: int | None = None,
               out_dim: int = 1, activation: str = "tanh") -> ArchSpec:
    """Standard task chain d -> hidden -> ... -> hidden -> out_dim with n layers."""
    if n < 1:
        raise ConfigError("need at least one layer")
    h = d if hidden is None else hidden
    dims = [d] + [h] * (n - 1) + [out_dim]
    layers = tuple(LayerSpec(dims[i], dims[i + 1], m) for i in range(n))
    return ArchSpec(layers, activation)


# --------------------------------------------------------------------------
# Initialization


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    def validate(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise ConfigError("uniform bounds must be finite")
        if self.lo > self.hi:
            raise ConfigError(f"uniform lo {self.lo} > hi {self.hi}")

    def sample(self, rng, shape):
        return rng.uniform(self.lo, self.hi, size=shape)

    def to_dict(self):
        return {"kind": "uniform", "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class TruncatedNormal:
    sigma: float
    clip: float

    def validate(self):
        if not (math.isfinite(self.sigma) and math.isfinite(self.clip)):
            raise ConfigError("truncated normal parameters must be finite")
        if self.sigma < 0 or self.clip <= 0:
            raise ConfigError("need sigma >= 0 and clip > 0")

    def sample(self, rng, shape):
        # rejection keeps the density proportional to the normal on [-clip, clip]
        out = rng.normal(0.0, self.sigma, size=shape) if self.sigma > 0 else np.zeros(shape)
        bad = np.abs(out) > self.clip
        while np.any(bad):
            out[bad] = rng.normal(0.0, self.sigma, size=int(bad.sum()))
            bad = np.abs(out) > self.clip
        return out

    def to_dict(self):
        return {"kind": "truncated_normal", "sigma": self.sigma, "clip": self.clip}


Distribution = Uniform | TruncatedNormal


def distribution_from_dict(d: dict) -> Distribution:
    kind = d.get("kind")
    if kind == "uniform":
        return Uniform(float(d["lo"]), float(d["hi"]))
    if kind == "truncated_normal":
        return TruncatedNormal(float(d["sigma"]), float(d["clip"]))
    raise ConfigError(f"unknown distribution kind {kind!r}")


@dataclass(frozen=True)
class InitSpec:
    """Bounded absolutely-continuous initializer, optionally per layer."""

    distribution: Distribution = Uniform(-1.0, 1.0)
    per_layer_overrides: dict = field(default_factory=dict)

    def validate(self):
        self.distribution.validate()
        for k, dist in self.per_layer_overrides.items():
            if int(k) < 0:
                raise ConfigError(f"negative layer index {k} in overrides")
            dist.validate()

    def layer_distribution(self, layer_index: int) -> Distribution:
        return self.per_layer_overrides.get(layer_index, self.distribution)

    def to_dict(self):
        d = {"distribution": self.distribution.to_dict()}
        if self.per_layer_overrides:
            d["per_layer_overrides"] = {
                str(k): v.to_dict() for k, v in self.per_layer_overrides.items()
            }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "InitSpec":
        dist = distribution_from_dict(d.get("distribution", {"kind": "uniform", "lo": -1.0, "hi": 1.0}))
        overrides = {
            int(k): distribution_from_dict(v)
            for k, v in d.get("per_layer_overrides", {}).items()
        }
        return cls(dist, overrides)


def init_network(arch: ArchSpec, init: InitSpec, seed: int) -> Network:
    """Draw all neuron weights i.i.d. from per-layer seeded streams."""
    init.validate()
    blocks = []
    for li, spec in enumerate(arch.layers):
        rng = rng_for(seed, "init-layer", li)
        dist = init.layer_distribution(li)
        theta0 = dist.sample(rng, (spec.m, spec.d_in))
        theta1 = dist.sample(rng, (spec.m, spec.d_out))
        blocks.append(MeanFieldLayer(theta0, theta1))
    return Network(blocks, arch.activation)


# --------------------------------------------------------------------------
# Losses


def mse_loss(pred: float, y: float) -> tuple[float, float]:
    """Squared error without the 1/2 factor: loss=(pred-y)^2, grad=2(pred-y)."""
    if not (math.isfinite(pred) and math.isfinite(y)):
        raise NonFiniteError("mse_loss requires finite inputs")
    diff = pred - y
    return diff * diff, 2.0 * diff


def imitation_loss(student_out, teacher_out) -> tuple[float, np.ndarray]:
    """Mean squared per-coordinate gap: (1/D)||s - t||^2, grad (2/D)(s - t)."""
    s = np.asarray(student_out, dtype=np.float64)
    t = np.asarray(teacher_out, dtype=np.float64)
    if s.shape != t.shape or s.ndim != 1:
        raise DimensionError(
            f"student/teacher outputs must be equal-length vectors, got {s.shape} vs {t.shape}"
        )
    d = s.shape[0]
    diff = s - t
    return float(diff @ diff) / d, (2.0 / d) * diff


# --------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 0.05
    steps: int = 1000
    batch_size: int = 32
    seed: int = 0
    schedule: str = "constant"          # "constant" | "cosine"
    eta_final: float = 0.0              # cosine endpoint
    param_bound: float | None = None    # radial projection radius, off by default
    log_every: int = 100

    def validate(self):
        if self.eta <= 0:
            raise ConfigError("eta must be positive")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.schedule == "cosine" and self.eta_final < 0:
            raise ConfigError("eta_final must be >= 0")
        if self.param_bound is not None and self.param_bound <= 0:
            raise ConfigError("param_bound must be positive")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")

    def eta_at(self, step: int) -> float:
        """Step size in effect at step t (0-based). Cosine reaches eta_final
        exactly at the last step; with a single step it stays at eta."""
        if self.schedule == "constant" or self.steps <= 1:
            return self.eta
        frac = step / (self.steps - 1)
        return self.eta_final + 0.5 * (self.eta - self.eta_final) * (1.0 + math.cos(math.pi * frac))

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    def to_dict(self):
        d = {
            "eta": self.eta,
            "steps": self.steps,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "schedule": self.schedule,
            "log_every": self.log_every,
        }
        if self.schedule == "cosine":
            d["eta_final"] = self.eta_final
        if self.param_bound is not None:
            d["param_bound"] = self.param_bound
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(extra)}")
        return cls(**d)


@dataclass
class TrainTrace:
    """(step, loss, eta) samples plus the full-dataset loss after training."""

    entries: list = field(default_factory=list)
    final_loss: float = float("nan")

    def to_csv(self) -> str:
        lines = ["step,loss,eta"]
        for step, loss, eta in self.entries:
            lines.append(f"{step},{loss!r},{eta!r}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ImitationTarget:
    """Train a student prefix to match a frozen teacher prefix on the inputs.

    ``teacher_prefix`` and ``student_prefix`` count blocks from the front of
    each network; the prefixes must emit equal dimensions.
    """

    teacher: Network
    teacher_prefix: int
    student_prefix: int


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return rng_for(seed, "epoch", epoch).permutation(n)


def _project_rows(w: np.ndarray, bound: float) -> None:
    norms = np.linalg.norm(w, axis=1)
    over = norms > bound
    if np.any(over):
        w[over] *= (bound / norms[over])[:, None]


class _Params:
    """Mutable copy of a network's parameters for the update loop."""

    def __init__(self, net: Network):
        self.activation = net.activation
        self.blocks = []
        for b in net.blocks:
            if isinstance(b, MeanFieldLayer):
                self.blocks.append(["mf", b.theta0.copy(), b.theta1.copy()])
            else:
                self.blocks.append(["lin", b.a.copy()])

    def forward(self, X):
        Z = X
        inputs, acts = [], []
        for i, blk in enumerate(self.blocks):
            inputs.append(Z)
            if blk[0] == "mf":
                Z, _, H = mf_forward_full(blk[1], blk[2], Z, self.activation)
                acts.append(H)
            else:
                Z = lin_forward(blk[1], Z)
                acts.append(None)
            if not np.all(np.isfinite(Z)):
                raise NonFiniteError("non-finite block output", block=i)
        return Z, inputs, acts

    def backward(self, inputs, acts, U):
        grads = [None] * len(self.blocks)
        for i in range(len(self.blocks) - 1, -1, -1):
            blk = self.blocks[i]
            if blk[0] == "mf":
                g0, g1, U = mf_backward(
                    blk[1], blk[2], inputs[i], None, U, self.activation, H=acts[i]
                )
                grads[i] = (g0, g1)
            else:
                gA, U = lin_backward(blk[1], inputs[i], U)
                grads[i] = gA
        return grads

    def step(self, grads, eta, mask, bound):
        for i, blk in enumerate(self.blocks):
            if mask is not None and i not in mask:
                continue
            if blk[0] == "mf":
                g0, g1 = grads[i]
                blk[1] -= eta * g0
                blk[2] -= eta * g1
                if bound is not None:
                    _project_rows(blk[1], bound)
                    _project_rows(blk[2], bound)
            else:
                blk[1] -= eta * grads[i]

    def to_network(self) -> Network:
        out = []
        for blk in self.blocks:
            if blk[0] == "mf":
                out.append(MeanFieldLayer(blk[1], blk[2]))
            else:
                out.append(LinearMap(blk[1]))
        return Network(out, self.activation)


def _prepare_targets(net: Network, xs, ys, loss):
    """Resolve (training network block count, target matrix, loss dim)."""
    from .net import network_forward_batch

    if isinstance(loss, ImitationTarget):
        t_prefix = loss.teacher.prefix(loss.teacher_prefix)
        targets, _ = network_forward_batch(t_prefix, xs)
        return loss.student_prefix, targets
    ys = np.asarray(ys, dtype=np.float64)
    if ys.ndim == 1:
        targets = ys[:, None]
        if net.output_dim != 1:
            raise DimensionError(
                f"scalar task labels need output_dim 1, network has {net.output_dim}"
            )
    elif ys.ndim == 2:
        targets = ys
    else:
        raise DimensionError(f"labels must be 1-d or 2-d, got shape {ys.shape}")
    return net.n_blocks, targets


def sgd_train(net: Network, xs, ys, cfg: TrainConfig, loss="task",
              mask=None) -> tuple[Network, TrainTrace]:
    """Minibatch SGD on the mean-batch loss.

    ``loss`` is "task" (squared error against ys) or an :class:`ImitationTarget`
    (mean squared per-coordinate gap against a frozen teacher prefix; ys is
    ignored). ``mask`` restricts updates to the given block indices. The
    update is plain theta <- theta - eta_t * grad with an optional radial
    projection of every neuron weight row onto the param_bound ball.

    Each epoch is a fresh shuffle depending only on (cfg.seed, epoch index);
    batches are consecutive slices and a trailing slice shorter than
    batch_size is dropped, so every batch has exactly batch_size samples.
    """
    cfg.validate()
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2:
        raise DimensionError(f"inputs must be (N, d), got shape {xs.shape}")
    n = xs.shape[0]
    if n == 0:
        raise ConfigError("dataset is empty")
    if cfg.batch_size > n:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds dataset size {n}")
    if mask is not None:
        mask = set(int(i) for i in mask)
        if not mask:
            raise ConfigError("trainable mask is empty")
        bad = [i for i in mask if i < 0 or i >= net.n_blocks]
        if bad:
            raise ConfigError(f"mask addresses missing blocks {bad}")

    n_train_blocks, targets = _prepare_targets(net, xs, ys, loss)
    d_t = targets.shape[1]
    trained = net.prefix(n_train_blocks)
    if trained.output_dim != d_t:
        raise DimensionError(
            f"trained prefix emits dim {trained.output_dim}, targets have dim {d_t}"
        )
    params = _Params(trained)
    if isinstance(loss, ImitationTarget) and mask is not None:
        mask = {i for i in mask if i < n_train_blocks}
        if not mask:
            raise ConfigError("trainable mask has no blocks inside the student prefix")

    def full_loss() -> float:
        preds, _, _ = params.forward(xs)
        diff = preds - targets
        return float(np.mean(np.sum(diff * diff, axis=1)) / d_t)

    trace = TrainTrace()
    if cfg.steps == 0:
        trace.final_loss = full_loss()
        result = params.to_network()
        if n_train_blocks < net.n_blocks:
            result = Network(result.blocks + net.blocks[n_train_blocks:], net.activation)
        return result, trace

    epoch = -1
    order = np.empty(0, dtype=np.int64)
    pos = 0
    for step in range(cfg.steps):
        if pos + cfg.batch_size > order.shape[0]:
            epoch += 1
            order = _epoch_order(cfg.seed, epoch, n)
            pos = 0
        idx = order[pos : pos + cfg.batch_size]
        pos += cfg.batch_size

        Xb = xs[idx]
        Tb = targets[idx]
        preds, inputs, acts = params.forward(Xb)
        diff = preds - Tb
        batch_loss = float(np.mean(np.sum(diff * diff, axis=1)) / d_t)
        if not math.isfinite(batch_loss):
            raise NonFiniteError("training loss diverged", step=step)
        eta = cfg.eta_at(step)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            trace.entries.append((step, batch_loss, eta))
        U = (2.0 / (d_t * idx.shape[0])) * diff
        grads = params.backward(inputs, acts, U)
        params.step(grads, eta, mask, cfg.param_bound)

    trace.final_loss = full_loss()
    result = params.to_network()
    if n_train_blocks < net.n_blocks:
        result = Network(result.blocks + net.blocks[n_train_blocks:], net.activation)
    return result, trace
