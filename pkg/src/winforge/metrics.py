"""Evaluation quantities: output discrepancy, hybrid telescoping scans,
empirical Lipschitz estimation, and scaling-law bound reports.

The discrepancy between two models is the root mean squared output gap
over an evaluation set; intermediate (vector-valued) comparisons use the
mean squared euclidean norm under the root. Hybrid networks splice a
student prefix onto a teacher suffix; scanning the splice point yields a
telescoping decomposition of the total discrepancy whose per-term bound
(realized suffix amplification times handoff discrepancy) holds exactly
on the evaluation set by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    ConvergenceError,
    DegenerateProbesError,
    DimensionError,
)
from .net import (
    Activation,
    LinearMap,
    MeanFieldLayer,
    Network,
    get_activation,
    lin_forward,
    mf_forward,
    network_forward_batch,
)
from .seeds import rng_for

REPORT_COLUMNS = ("n", "m", "M", "seed", "k", "term", "total", "ell_hat", "predictor", "residual")


def _batch_map(f):
    if isinstance(f, Network):
        return lambda X: network_forward_batch(f, X)[0]
    return f


def _rms_rows(diff: np.ndarray) -> float:
    diff = np.atleast_2d(diff)
    return math.sqrt(float(np.mean(np.sum(diff * diff, axis=1))))


def discrepancy(f: Network, g: Network, eval_xs) -> float:
    """sqrt(mean ||f(x) - g(x)||^2) over the evaluation set."""
    eval_xs = np.asarray(eval_xs, dtype=np.float64)
    if eval_xs.ndim != 2 or eval_xs.shape[0] == 0:
        raise ConfigError("evaluation set must be a non-empty (N, d) array")
    if f.input_dim != g.input_dim:
        raise DimensionError(
            f"input dims differ: {f.input_dim} vs {g.input_dim}"
        )
    ya, _ = network_forward_batch(f, eval_xs)
    yb, _ = network_forward_batch(g, eval_xs)
    if ya.shape != yb.shape:
        raise DimensionError(f"output dims differ: {ya.shape[1]} vs {yb.shape[1]}")
    return _rms_rows(ya - yb)


def rmse(net: Network, xs, ys) -> float:
    """Root mean squared task error of a scalar-output network."""
    preds, _ = network_forward_batch(net, np.asarray(xs, dtype=np.float64))
    diff = preds[:, 0] - np.asarray(ys, dtype=np.float64)
    return math.sqrt(float(np.mean(diff * diff)))


# --------------------------------------------------------------------------
# Hybrid networks and the telescoping scan


def _teacher_depth(teacher: Network) -> int:
    if any(not isinstance(b, MeanFieldLayer) for b in teacher.blocks):
        raise DimensionError("teacher must be a pure mean-field chain")
    return teacher.n_blocks


def _student_stage_bounds(student: Network, n: int) -> str:
    """Classify the student layout against an n-layer teacher."""
    if student.n_blocks == n:
        return "theory"
    if n > 1 and student.n_blocks == 3 * n - 2:
        return "practical"
    raise DimensionError(
        f"student with {student.n_blocks} blocks does not match an "
        f"{n}-layer teacher (expected {n} or {3 * n - 2})"
    )


def _student_prefix_blocks(student: Network, layout: str, k: int, n: int) -> list:
    """Blocks computing the student's handoff state after stage k.

    In the practical layout the prefix runs through the up-projection that
    lifts stage k's output into the teacher's dimension; stage n has no
    up-projection (the network output is already in the teacher's space).
    """
    if k == 0:
        return []
    if layout == "theory" or k == n:
        return list(student.blocks[: student.n_blocks if k == n else k])
    return list(student.blocks[: 3 * (k - 1) + 2])


def _student_stage_blocks(student: Network, layout: str, k: int, n: int) -> list:
    """Blocks mapping the stage-(k-1) handoff state to the stage-k one."""
    if layout == "theory":
        return [student.blocks[k - 1]]
    if k == 1:
        return list(student.blocks[:2]) if n > 1 else list(student.blocks)
    if k == n:
        return list(student.blocks[3 * (k - 1) - 1:])
    return list(student.blocks[3 * (k - 1) - 1: 3 * (k - 1) + 2])


def build_hybrid(teacher: Network, student: Network, k: int) -> Network:
    """Hybrid with student stages 1..k and teacher layers k+1..n."""
    n = _teacher_depth(teacher)
    layout = _student_stage_bounds(student, n)
    if k < 0 or k > n:
        raise ConfigError(f"splice index k={k} outside 0..{n}")
    blocks = _student_prefix_blocks(student, layout, k, n) + teacher.blocks[k:]
    try:
        return Network(blocks, teacher.activation)
    except DimensionError as e:
        raise DimensionError(f"handoff misaligned at k={k}: {e}") from e


@dataclass
class HybridScan:
    """Telescoping decomposition of D[student, teacher].

    terms[k-1] is the discrepancy between consecutive hybrids F_k and
    F_{k-1}; amplification[k-1] is the largest realized directional slope
    of the teacher suffix over the same samples, and handoffs[k-1] the
    discrepancy of the handoff states, so term <= amplification * handoff
    holds exactly. skipped[k-1] counts samples with identical handoff
    states (excluded from the ratio).
    """

    terms: list
    total: float
    amplification: list
    handoffs: list
    skipped: list
    provenance: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.terms)

    def to_json_dict(self) -> dict:
        return {
            "terms": self.terms,
            "total": self.total,
            "amplification": self.amplification,
            "handoffs": self.handoffs,
            "skipped": self.skipped,
            "provenance": self.provenance,
        }

    def to_rows(self) -> list[dict]:
        p = self.provenance
        rows = []
        for k in range(1, self.n + 1):
            rows.append({
                "n": p.get("n", self.n),
                "m": p.get("m", ""),
                "M": p.get("M", ""),
                "seed": p.get("seed", ""),
                "k": k,
                "term": self.terms[k - 1],
                "total": self.total,
                "ell_hat": self.amplification[k - 1],
                "predictor": "",
                "residual": "",
            })
        return rows


def hybrid_scan(teacher: Network, student: Network, eval_xs,
                provenance: dict | None = None) -> HybridScan:
    """Evaluate all hybrid gaps D[F_k, F_{k-1}] and the realized suffix ratios."""
    eval_xs = np.asarray(eval_xs, dtype=np.float64)
    if eval_xs.ndim != 2 or eval_xs.shape[0] == 0:
        raise ConfigError("evaluation set must be a non-empty (N, d) array")
    n = _teacher_depth(teacher)
    layout = _student_stage_bounds(student, n)
    act = teacher.activation

    def suffix_out(Z, start):
        for block in teacher.blocks[start:]:
            Z, _ = mf_forward(block.theta0, block.theta1, Z, act)
        return Z

    terms, amps, handoffs, skipped = [], [], [], []
    U_prev = eval_xs
    for k in range(1, n + 1):
        U = U_prev
        for block in _student_stage_blocks(student, layout, k, n):
            if isinstance(block, MeanFieldLayer):
                U, _ = mf_forward(block.theta0, block.theta1, U, act)
            else:
                U = lin_forward(block.a, U)
        tb = teacher.blocks[k - 1]
        V, _ = mf_forward(tb.theta0, tb.theta1, U_prev, act)

        FA = suffix_out(U, k)
        FB = suffix_out(V, k)
        terms.append(_rms_rows(FA - FB))
        handoffs.append(_rms_rows(U - V))
        gaps = np.linalg.norm(U - V, axis=1)
        outs = np.linalg.norm(FA - FB, axis=1)
        live = gaps > 0.0
        skipped.append(int(np.sum(~live)))
        amps.append(float(np.max(outs[live] / gaps[live])) if np.any(live) else 0.0)
        U_prev = U

    teacher_out, _ = network_forward_batch(teacher, eval_xs)
    total = _rms_rows(U_prev - teacher_out)
    return HybridScan(terms, total, amps, handoffs, skipped, provenance or {})


# --------------------------------------------------------------------------
# Lipschitz estimators


@dataclass(frozen=True)
class ProbeConfig:
    """Probe layout for the pairwise (realized-slope) estimator."""

    n_pairs: int = 256          # random data pairs
    n_local_points: int = 32    # base points for local perturbations
    n_local_dirs: int = 4       # random unit directions per base point
    include_axes: bool = True   # also perturb along every coordinate axis
    delta: float = 1e-4
    seed: int = 0


def _probe_pairs(xs: np.ndarray, cfg: ProbeConfig):
    """Stacked (X, X') probe endpoints."""
    n, d = xs.shape
    rng = rng_for(cfg.seed, "lipschitz-probes")
    a_list, b_list = [], []
    if n >= 2 and cfg.n_pairs > 0:
        i = rng.integers(0, n, size=cfg.n_pairs)
        j = rng.integers(0, n, size=cfg.n_pairs)
        a_list.append(xs[i])
        b_list.append(xs[j])
    if cfg.n_local_points > 0:
        base = xs[rng.integers(0, n, size=min(cfg.n_local_points, n))]
        dirs = []
        if cfg.include_axes:
            dirs.append(np.eye(d))
        if cfg.n_local_dirs > 0:
            g = rng.standard_normal((cfg.n_local_dirs, d))
            norms = np.linalg.norm(g, axis=1, keepdims=True)
            norms[norms == 0] = 1.0
            dirs.append(g / norms)
        if dirs:
            D = np.concatenate(dirs)  # (K, d)
            A = np.repeat(base, D.shape[0], axis=0)
            B = A + cfg.delta * np.tile(D, (base.shape[0], 1))
            a_list.append(A)
            b_list.append(B)
    if not a_list:
        raise ConfigError("probe config produces no probes")
    return np.concatenate(a_list), np.concatenate(b_list)


def lipschitz_pairs(f, eval_xs, cfg: ProbeConfig = ProbeConfig()) -> float:
    """Largest realized slope ||f(x)-f(x')|| / ||x-x'|| over the probes.

    A certified lower bound on the true Lipschitz constant. Degenerate
    probes (x == x') are skipped; if every probe degenerates this raises.
    """
    eval_xs = np.asarray(eval_xs, dtype=np.float64)
    if eval_xs.ndim != 2 or eval_xs.shape[0] < 1:
        raise ConfigError("evaluation set must be a non-empty (N, d) array")
    fmap = _batch_map(f)
    A, B = _probe_pairs(eval_xs, cfg)
    gaps = np.linalg.norm(A - B, axis=1)
    live = gaps > 0.0
    if not np.any(live):
        raise DegenerateProbesError("all probe pairs are degenerate")
    fa = np.atleast_2d(fmap(A[live]))
    fb = np.atleast_2d(fmap(B[live]))
    outs = np.linalg.norm(fa - fb, axis=1)
    return float(np.max(outs / gaps[live]))


@dataclass(frozen=True)
class PowerIterConfig:
    max_iters: int = 200
    tol: float = 1e-9
    seed: int = 0


def _jacobian_products(net: Network, x: np.ndarray):
    """Forward (Jv) and reverse (J^T u) products of the Jacobian at x."""
    act = net.activation
    states, pre = [], []
    z = x
    for block in net.blocks:
        states.append(z)
        if isinstance(block, MeanFieldLayer):
            s = block.theta0 @ z
            pre.append(s)
            z = (act.fn(s) @ block.theta1) / block.m
        else:
            pre.append(None)
            z = block.a @ z

    def jvp(v):
        t = v
        for block, s in zip(net.blocks, pre):
            if isinstance(block, MeanFieldLayer):
                t = ((act.deriv(s) * (block.theta0 @ t)) @ block.theta1) / block.m
            else:
                t = block.a @ t
        return t

    def vjp(u):
        for i in range(len(net.blocks) - 1, -1, -1):
            block = net.blocks[i]
            if isinstance(block, MeanFieldLayer):
                u = (((block.theta1 @ u) * act.deriv(pre[i])) @ block.theta0) / block.m
            else:
                u = block.a.T @ u
        return u

    return jvp, vjp


def _spectral_norm_at(net: Network, x, cfg: PowerIterConfig, rng) -> float:
    jvp, vjp = _jacobian_products(net, np.asarray(x, dtype=np.float64))
    v = rng.standard_normal(net.input_dim)
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(cfg.max_iters):
        u = jvp(v)
        s_new = float(np.linalg.norm(u))
        if s_new == 0.0:
            return 0.0
        w = vjp(u)
        wn = float(np.linalg.norm(w))
        if wn == 0.0:
            return s_new
        v = w / wn
        if abs(s_new - sigma) <= cfg.tol * max(s_new, 1.0):
            return s_new
        sigma = s_new
    raise ConvergenceError(
        f"power iteration did not converge in {cfg.max_iters} iterations",
        residual=abs(s_new - sigma),
    )


def lipschitz_jacobian(net: Network, samples, cfg: PowerIterConfig = PowerIterConfig()) -> float:
    """Max over samples of the Jacobian spectral norm (power iteration)."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[0] == 0:
        raise ConfigError("need at least one sample")
    rng = rng_for(cfg.seed, "power-iteration")
    return max(_spectral_norm_at(net, x, cfg, rng) for x in samples)


@dataclass
class LipschitzReport:
    """Suffix-map Lipschitz estimates for an n-layer teacher.

    suffix_estimates[k-1] estimates the map from layer k's output to the
    network output (k = n is the empty suffix, exactly 1). ell_max is the
    bound's amplification factor.
    """

    suffix_estimates: list
    ell_max: float
    estimator: str
    n_samples: int
    provenance: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "suffix_estimates": self.suffix_estimates,
            "ell_max": self.ell_max,
            "estimator": self.estimator,
            "n_samples": self.n_samples,
            "provenance": self.provenance,
        }

    def to_rows(self) -> list[dict]:
        p = self.provenance
        rows = []
        for k, est in enumerate(self.suffix_estimates, start=1):
            rows.append({
                "n": p.get("n", len(self.suffix_estimates)),
                "m": p.get("m", ""),
                "M": p.get("M", ""),
                "seed": p.get("seed", ""),
                "k": k,
                "term": "",
                "total": "",
                "ell_hat": est,
                "predictor": "",
                "residual": "",
            })
        return rows


def suffix_lipschitz_report(teacher: Network, eval_xs,
                            cfg: ProbeConfig = ProbeConfig(),
                            provenance: dict | None = None) -> LipschitzReport:
    """Pairwise suffix estimates ell_k for k = 1..n on the evaluation set.

    Probes for suffix k live in the teacher's layer-k output space (the
    evaluation set pushed forward through the first k layers).
    """
    eval_xs = np.asarray(eval_xs, dtype=np.float64)
    n = _teacher_depth(teacher)
    act = teacher.activation
    estimates = []
    Z = eval_xs
    for k in range(1, n + 1):
        block = teacher.blocks[k - 1]
        Z, _ = mf_forward(block.theta0, block.theta1, Z, act)
        if k == n:
            estimates.append(1.0)
        else:
            estimates.append(lipschitz_pairs(teacher.suffix(k), Z, cfg))
    return LipschitzReport(
        suffix_estimates=estimates,
        ell_max=float(max(estimates)),
        estimator="pairs",
        n_samples=int(eval_xs.shape[0]),
        provenance=provenance or {},
    )


# --------------------------------------------------------------------------
# Per-neuron difference-quotient maps


def _sigma_map(layer: MeanFieldLayer, x: np.ndarray, act: Activation) -> np.ndarray:
    """Per-neuron outputs theta1_j * act(<theta0_j, x>), shape (m, d_out)."""
    return act.fn(layer.theta0 @ x)[:, None] * layer.theta1


def q_ratio(layer: MeanFieldLayer, x, x2, act) -> np.ndarray:
    """Per-neuron difference quotients (sigma(x) - sigma(x')) / ||x - x'||."""
    act = get_activation(act)
    x = np.asarray(x, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    gap = float(np.linalg.norm(x - x2))
    if gap == 0.0:
        raise DegenerateProbesError("q requires x != x'")
    return (_sigma_map(layer, x, act) - _sigma_map(layer, x2, act)) / gap


def q_param_ratio(neuron_a, neuron_b, x, x2, act) -> float:
    """Parameter-space slope of q between two nearby neurons."""
    act = get_activation(act)
    la = MeanFieldLayer(np.atleast_2d(neuron_a.theta0), np.atleast_2d(neuron_a.theta1))
    lb = MeanFieldLayer(np.atleast_2d(neuron_b.theta0), np.atleast_2d(neuron_b.theta1))
    qa = q_ratio(la, x, x2, act)[0]
    qb = q_ratio(lb, x, x2, act)[0]
    tgap = math.sqrt(
        float(np.sum((neuron_a.theta0 - neuron_b.theta0) ** 2))
        + float(np.sum((neuron_a.theta1 - neuron_b.theta1) ** 2))
    )
    if tgap == 0.0:
        raise DegenerateProbesError("q parameter slope requires distinct neurons")
    return float(np.linalg.norm(qa - qb)) / tgap


def layer_lipschitz_gap(wide: MeanFieldLayer, thin: MeanFieldLayer, probe_xs,
                        act, cfg: ProbeConfig = ProbeConfig()) -> float:
    """|L(thin) - L(wide)| with both estimated on identical probes."""
    act = get_activation(act)
    if (wide.d_in, wide.d_out) != (thin.d_in, thin.d_out):
        raise DimensionError("wide and thin layers must share dimensions")

    def as_map(layer):
        return lambda X: mf_forward(layer.theta0, layer.theta1, X, act)[0]

    lw = lipschitz_pairs(as_map(wide), probe_xs, cfg)
    lt = lipschitz_pairs(as_map(thin), probe_xs, cfg)
    return abs(lt - lw)


# --------------------------------------------------------------------------
# Bound report


@dataclass
class GridRow:
    n: int
    m: int
    M: int
    seeds: int
    d_mean: float
    ell_mean: float
    predictor: float = 0.0
    residual: float = 0.0

    def to_rows_dict(self) -> dict:
        return {
            "n": self.n,
            "m": self.m,
            "M": self.M,
            "seed": self.seeds,
            "k": "",
            "term": "",
            "total": self.d_mean,
            "ell_hat": self.ell_mean,
            "predictor": self.predictor,
            "residual": self.residual,
        }


@dataclass
class BoundReport:
    """Fit of measured discrepancies against the ell * n / sqrt(m) predictor."""

    rows: list
    constant: float
    width_slopes: dict          # fixed n -> slope of log d vs log m
    depth_slopes: dict          # fixed m -> slope of log d vs log n
    width_slope: float
    depth_slope: float

    def to_json_dict(self) -> dict:
        return {
            "constant": self.constant,
            "width_slope": self.width_slope,
            "depth_slope": self.depth_slope,
            "width_slopes": {str(k): v for k, v in self.width_slopes.items()},
            "depth_slopes": {str(k): v for k, v in self.depth_slopes.items()},
            "rows": [r.to_rows_dict() for r in self.rows],
        }

    def to_rows(self) -> list[dict]:
        return [r.to_rows_dict() for r in self.rows]


def _ols_slope(xs: np.ndarray, ys: np.ndarray) -> float:
    xm = xs - xs.mean()
    return float((xm @ (ys - ys.mean())) / (xm @ xm))


def bound_report(results) -> BoundReport:
    """Aggregate per-run rows into the scaling-law report.

    ``results`` is an iterable of records with keys n, m, M, seed, d, ell.
    Rows are grouped by (n, m); the single constant C minimizes the squared
    log error of d_mean against C * ell_mean * n / sqrt(m).
    """
    records = list(results)
    if not records:
        raise ConfigError("empty grid")
    groups: dict = {}
    for r in records:
        key = (int(r["n"]), int(r["m"]))
        groups.setdefault(key, []).append(r)
    ns = sorted({k[0] for k in groups})
    ms = sorted({k[1] for k in groups})
    if len(ms) < 3 or len(ns) < 3:
        raise ConfigError(
            f"grid needs at least 3 distinct n and m values, got n={ns}, m={ms}"
        )
    rows = []
    for (n, m) in sorted(groups):
        cell = groups[(n, m)]
        d_mean = float(np.mean([r["d"] for r in cell]))
        ell_mean = float(np.mean([r["ell"] for r in cell]))
        if d_mean <= 0 or ell_mean <= 0:
            raise ConfigError(f"non-positive discrepancy or ell in cell (n={n}, m={m})")
        rows.append(GridRow(
            n=n, m=m, M=int(cell[0].get("M", 0)), seeds=len(cell),
            d_mean=d_mean, ell_mean=ell_mean,
        ))
    log_ratio = [math.log(r.d_mean) - math.log(r.ell_mean * r.n / math.sqrt(r.m)) for r in rows]
    constant = math.exp(float(np.mean(log_ratio)))
    for r in rows:
        r.predictor = constant * r.ell_mean * r.n / math.sqrt(r.m)
        r.residual = math.log(r.d_mean) - math.log(r.predictor)

    width_slopes = {}
    for n in ns:
        sub = [r for r in rows if r.n == n]
        if len(sub) >= 2:
            width_slopes[n] = _ols_slope(
                np.log([r.m for r in sub]), np.log([r.d_mean for r in sub])
            )
    depth_slopes = {}
    for m in ms:
        sub = [r for r in rows if r.m == m]
        if len(sub) >= 2:
            depth_slopes[m] = _ols_slope(
                np.log([r.n for r in sub]), np.log([r.d_mean for r in sub])
            )
    return BoundReport(
        rows=rows,
        constant=constant,
        width_slopes=width_slopes,
        depth_slopes=depth_slopes,
        width_slope=float(np.mean(list(width_slopes.values()))),
        depth_slope=float(np.mean(list(depth_slopes.values()))),
    )
