"""The wide-then-narrow training pipeline.

Stage 1 trains a widened teacher until its step budget runs out. Stage 2
warms the thin student: in theory mode each student layer is initialized
by sampling neurons from the matching teacher layer (optionally followed
by layerwise imitation); in practical mode linear up/down pairs are
inserted around each thin layer and student prefixes are trained to match
teacher prefixes, block by block, with optional best-of restarts. Stage 3
fine-tunes on the task labels and merges the linear pairs away, restoring
the thin architecture exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset
from .errors import ConfigError, DimensionError
from .merge import MergePlan, merge_pass
from .net import LinearMap, MeanFieldLayer, Network
from .seeds import derive_int, rng_for
from .train import (
    ArchSpec,
    ImitationTarget,
    InitSpec,
    LayerSpec,
    TrainConfig,
    TrainTrace,
    init_network,
    sgd_train,
)


@dataclass(frozen=True)
class WinConfig:
    widen_factor: int = 4
    wide_dim: int | None = None          # practical-mode hidden width; None = thin dim
    mode: str = "theory"                 # "theory" | "practical"
    subsample: str = "with_replacement"  # | "without_replacement"
    imitation_base_steps: int = 200      # stage-2 schedule: block i trains base*i steps
    restarts: int = 0
    teacher_train: TrainConfig = TrainConfig()
    imitate_train: TrainConfig = TrainConfig()
    finetune: TrainConfig = TrainConfig(steps=0)
    init: InitSpec = InitSpec()
    theory_imitate: bool = False         # run imitation on top of subsampling
    freeze_previous: bool = False        # train only the newest block group
    pair_init: str = "identity"          # | "init" (sample linear pairs from init)

    def validate(self):
        if self.widen_factor < 1:
            raise ConfigError("widen_factor must be >= 1")
        if self.mode not in ("theory", "practical"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.subsample not in ("with_replacement", "without_replacement"):
            raise ConfigError(f"unknown subsample mode {self.subsample!r}")
        if self.imitation_base_steps < 0:
            raise ConfigError("imitation_base_steps must be >= 0")
        if self.restarts < 0:
            raise ConfigError("restarts must be >= 0")
        if self.pair_init not in ("identity", "init"):
            raise ConfigError(f"unknown pair_init {self.pair_init!r}")
        for cfg in (self.teacher_train, self.imitate_train, self.finetune):
            cfg.validate()
        self.init.validate()

    def imitation_steps(self, block_index: int) -> int:
        return self.imitation_base_steps * block_index

    def with_(self, **kw) -> "WinConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {
            "widen_factor": self.widen_factor,
            "wide_dim": self.wide_dim,
            "mode": self.mode,
            "subsample": self.subsample,
            "imitation_base_steps": self.imitation_base_steps,
            "restarts": self.restarts,
            "teacher_train": self.teacher_train.to_dict(),
            "imitate_train": self.imitate_train.to_dict(),
            "finetune": self.finetune.to_dict(),
            "init": self.init.to_dict(),
            "theory_imitate": self.theory_imitate,
            "freeze_previous": self.freeze_previous,
            "pair_init": self.pair_init,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WinConfig":
        d = dict(d)
        for key in ("teacher_train", "imitate_train", "finetune"):
            if key in d:
                d[key] = TrainConfig.from_dict(d[key])
        if "init" in d:
            d["init"] = InitSpec.from_dict(d["init"])
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown WinConfig fields: {sorted(extra)}")
        return cls(**d)


@dataclass
class WinArtifacts:
    teacher: Network
    warmed: Network
    merged: Network
    teacher_trace: TrainTrace
    imitation_traces: list
    imitation_losses: list
    finetune_trace: TrainTrace | None
    merge_plan: MergePlan
    seed: int


# --------------------------------------------------------------------------
# Stage 1: widening


def widen_spec(thin: ArchSpec, cfg: WinConfig) -> ArchSpec:
    """Teacher architecture: widen_factor more neurons per layer; in
    practical mode the inter-layer dimensions become wide_dim."""
    cfg.validate()
    d_thin = thin.layers[0].d_in
    if cfg.mode == "theory":
        if cfg.wide_dim is not None and cfg.wide_dim != d_thin:
            raise ConfigError(
                f"theory mode requires wide_dim == thin input dim ({d_thin})"
            )
        layers = tuple(
            LayerSpec(s.d_in, s.d_out, cfg.widen_factor * s.m) for s in thin.layers
        )
        return ArchSpec(layers, thin.activation)
    d_wide = cfg.wide_dim if cfg.wide_dim is not None else d_thin
    if d_wide < d_thin:
        raise ConfigError(f"wide_dim {d_wide} below thin dim {d_thin}")
    n = thin.n_layers
    layers = []
    for i, s in enumerate(thin.layers):
        d_in = thin.input_dim if i == 0 else d_wide
        d_out = thin.output_dim if i == n - 1 else d_wide
        layers.append(LayerSpec(d_in, d_out, cfg.widen_factor * s.m))
    return ArchSpec(tuple(layers), thin.activation)


# --------------------------------------------------------------------------
# Stage 2: narrow learning


def _identity_pair(d: int, d_wide: int) -> tuple[LinearMap, LinearMap]:
    """Padded identity pair: the down map inverts the up map exactly."""
    up = np.zeros((d_wide, d))
    up[:d, :d] = np.eye(d)
    down = np.zeros((d, d_wide))
    down[:d, :d] = np.eye(d)
    return LinearMap(up), LinearMap(down)


def insert_linear_pairs(thin: Network, d_wide: int, init="identity",
                        seed: int = 0) -> Network:
    """Wrap each interior layer boundary with an up/down projection pair.

    ``init`` is "identity" (exact function-preserving insertion, the
    default warm start) or an :class:`InitSpec` to sample both maps.
    """
    if any(not isinstance(b, MeanFieldLayer) for b in thin.blocks):
        raise DimensionError("expected a pure mean-field chain")
    n = thin.n_blocks
    if n == 1:
        return thin.copy()
    blocks: list = []
    for i, layer in enumerate(thin.blocks):
        blocks.append(layer)
        if i == n - 1:
            break
        d = layer.d_out
        if d_wide < d:
            raise DimensionError(f"d_wide {d_wide} below layer output dim {d}")
        if init == "identity":
            up, down = _identity_pair(d, d_wide)
        else:
            init.validate()
            dist = init.layer_distribution(i)
            rng = rng_for(seed, "pair", i)
            up = LinearMap(dist.sample(rng, (d_wide, d)))
            down = LinearMap(dist.sample(rng, (d, d_wide)))
        blocks.extend([up, down])
    return Network(blocks, thin.activation)


def subsample_init(wide_layer: MeanFieldLayer, m: int, mode: str, seed: int) -> MeanFieldLayer:
    """Thin layer built from m neurons sampled out of the wide layer's M.

    Neuron values are copied verbatim; indices are kept in ascending order
    (canonical form), so sampling all M neurons without replacement
    reproduces the wide layer exactly.
    """
    if m < 1:
        raise ConfigError("m must be >= 1")
    M = wide_layer.m
    rng = rng_for(seed, "subsample")
    if mode == "with_replacement":
        idx = rng.integers(0, M, size=m)
    elif mode == "without_replacement":
        if m > M:
            raise ConfigError(f"cannot draw {m} of {M} neurons without replacement")
        idx = rng.choice(M, size=m, replace=False)
    else:
        raise ConfigError(f"unknown subsample mode {mode!r}")
    idx = np.sort(idx)
    return MeanFieldLayer(wide_layer.theta0[idx], wide_layer.theta1[idx])


def _stage_group(layout: str, i: int) -> list[int]:
    """Block indices re-initialized on a restart of imitation stage i."""
    if layout == "theory":
        return [i - 1]
    if i == 1:
        return [0, 1]
    base = 3 * (i - 1)
    return [base - 1, base, base + 1]


def _reinit_stage(student: Network, layout: str, i: int, cfg: WinConfig,
                  seed: int) -> Network:
    """Fresh random draw for stage i's newest blocks (restart candidates)."""
    blocks = list(student.blocks)
    dist = cfg.init.layer_distribution(i - 1)
    rng = rng_for(seed, "restart-layer")
    for bi in _stage_group(layout, i):
        b = blocks[bi]
        if isinstance(b, MeanFieldLayer):
            blocks[bi] = MeanFieldLayer(
                dist.sample(rng, (b.m, b.d_in)), dist.sample(rng, (b.m, b.d_out))
            )
        elif cfg.pair_init == "identity":
            d = min(b.rows, b.cols)
            pair = _identity_pair(d, max(b.rows, b.cols))
            blocks[bi] = pair[0] if b.rows >= b.cols else pair[1]
        else:
            blocks[bi] = LinearMap(dist.sample(rng_for(seed, "restart-pair", bi), (b.rows, b.cols)))
    return Network(blocks, student.activation)


def imitation_stage(sbar: Network, teacher: Network, xs, cfg: WinConfig,
                    seed: int, events=None) -> tuple[Network, list, list]:
    """Sequential prefix imitation (stages 1..n-1) with best-of restarts.

    Returns the warmed network, per-block final imitation losses, and the
    per-block traces of the selected candidates.
    """
    cfg.validate()
    n = teacher.n_blocks
    if any(not isinstance(b, MeanFieldLayer) for b in teacher.blocks):
        raise DimensionError("teacher must be a pure mean-field chain")
    if sbar.n_blocks == n:
        layout = "theory"
    elif n > 1 and sbar.n_blocks == 3 * n - 2:
        layout = "practical"
    else:
        raise DimensionError(
            f"student block count {sbar.n_blocks} does not match teacher depth {n}"
        )
    xs = np.asarray(xs, dtype=np.float64)
    current = sbar
    losses: list[float] = []
    traces: list[TrainTrace] = []
    for i in range(1, n):
        steps = cfg.imitation_steps(i)
        student_prefix = i if layout == "theory" else 3 * (i - 1) + 2
        mask = set(_stage_group(layout, i)) if cfg.freeze_previous else None
        target = ImitationTarget(teacher, teacher_prefix=i, student_prefix=student_prefix)
        if events:
            events.emit("imitation_block_start", block=i, steps=steps)
        best = None
        for r in range(cfg.restarts + 1):
            candidate = current if r == 0 else _reinit_stage(
                current, layout, i, cfg, derive_int(seed, "restart", i, r)
            )
            tcfg = cfg.imitate_train.with_(
                steps=steps, seed=derive_int(seed, "imitate", i, r)
            )
            trained, trace = sgd_train(candidate, xs, None, tcfg, loss=target, mask=mask)
            if best is None or trace.final_loss < best[0]:
                best = (trace.final_loss, r, trained, trace)
        losses.append(best[0])
        traces.append(best[3])
        current = best[2]
        if events:
            events.emit("imitation_block_end", block=i, loss=best[0], restart=best[1])
    return current, losses, traces


def _subsample_network(teacher: Network, thin: ArchSpec, cfg: WinConfig,
                       seed: int, xs) -> tuple[Network, list]:
    """Theory-mode stage 2: per-layer neuron subsampling.

    Restarts follow the same best-mimic rule as the imitation loop: each
    restart redraws layer i's neurons and the candidate whose prefix best
    matches the teacher prefix on the training inputs is kept (with zero
    imitation training, the selection metric is the raw prefix gap).
    Returns the warmed network and the per-layer selected prefix losses.
    """
    from .net import mf_forward

    xs = np.asarray(xs, dtype=np.float64)
    act = teacher.activation
    blocks: list = []
    losses: list = []
    teacher_state = xs
    student_state = xs
    for i in range(thin.n_layers):
        tb = teacher.blocks[i]
        teacher_state, _ = mf_forward(tb.theta0, tb.theta1, teacher_state, act)
        best = None
        for r in range(cfg.restarts + 1):
            cand = subsample_init(
                tb, thin.layers[i].m, cfg.subsample,
                derive_int(seed, "subsample", i, r),
            )
            out, _ = mf_forward(cand.theta0, cand.theta1, student_state, act)
            gap = float(np.mean(np.sum((out - teacher_state) ** 2, axis=1))) / out.shape[1]
            if best is None or gap < best[0]:
                best = (gap, r, cand, out)
        losses.append(best[0])
        blocks.append(best[2])
        student_state = best[3]
    return Network(blocks, thin.activation), losses


# --------------------------------------------------------------------------
# Stage 3: fine-tuning


def finetune(net: Network, xs, ys, cfg: TrainConfig, restarts: int = 0,
             seed: int = 0) -> tuple[Network, TrainTrace]:
    """Task-loss SGD on all parameters; restarts rerun fine-tuning with a
    fresh shuffle stream and the candidate with the lowest final training
    loss wins (ties break toward the earlier restart)."""
    best = None
    for r in range(restarts + 1):
        tcfg = cfg.with_(seed=derive_int(seed, "finetune", r))
        trained, trace = sgd_train(net, xs, ys, tcfg)
        if best is None or trace.final_loss < best[0]:
            best = (trace.final_loss, r, trained, trace)
    return best[2], best[3]


# --------------------------------------------------------------------------
# Orchestration


def win_run(thin: ArchSpec, train_data: Dataset, cfg: WinConfig, seed: int,
            events=None) -> WinArtifacts:
    """Run all three stages end to end, deterministically in the seed."""
    cfg.validate()
    xs, ys = train_data.xs, train_data.ys
    if events:
        events.emit("stage_start", stage="wide_learning")
    wide = widen_spec(thin, cfg)
    teacher0 = init_network(wide, cfg.init, derive_int(seed, "teacher-init"))
    tcfg = cfg.teacher_train.with_(seed=derive_int(seed, "teacher-train"))
    teacher, teacher_trace = sgd_train(teacher0, xs, ys, tcfg)
    if events:
        events.emit("stage_end", stage="wide_learning", loss=teacher_trace.final_loss)

    if events:
        events.emit("stage_start", stage="narrow_learning")
    imitation_losses: list = []
    imitation_traces: list = []
    if cfg.mode == "theory":
        warmed, sub_losses = _subsample_network(teacher, thin, cfg, seed, xs)
        imitation_losses = sub_losses
        if cfg.theory_imitate:
            warmed, imitation_losses, imitation_traces = imitation_stage(
                warmed, teacher, xs, cfg, derive_int(seed, "imitate"), events
            )
    else:
        d_wide = cfg.wide_dim if cfg.wide_dim is not None else thin.input_dim
        student0 = init_network(thin, cfg.init, derive_int(seed, "student-init"))
        pair_init = "identity" if cfg.pair_init == "identity" else cfg.init
        sbar = insert_linear_pairs(student0, d_wide, pair_init, derive_int(seed, "pairs"))
        warmed, imitation_losses, imitation_traces = imitation_stage(
            sbar, teacher, xs, cfg, derive_int(seed, "imitate"), events
        )
    if events:
        events.emit("stage_end", stage="narrow_learning",
                    block_losses=list(imitation_losses))

    if events:
        events.emit("stage_start", stage="finetune_and_merge")
    if cfg.finetune.steps > 0:
        tuned, finetune_trace = finetune(
            warmed, xs, ys, cfg.finetune, cfg.restarts, derive_int(seed, "finetune")
        )
    else:
        tuned, finetune_trace = warmed, None
    merged, plan = merge_pass(tuned)
    if events:
        events.emit("stage_end", stage="finetune_and_merge",
                    merged_blocks=merged.n_blocks)
    return WinArtifacts(
        teacher=teacher,
        warmed=warmed,
        merged=merged,
        teacher_trace=teacher_trace,
        imitation_traces=imitation_traces,
        imitation_losses=imitation_losses,
        finetune_trace=finetune_trace,
        merge_plan=plan,
        seed=seed,
    )
