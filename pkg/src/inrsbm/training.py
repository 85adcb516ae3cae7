"""Training the implicit network and measuring it.

Loss per sample: (clamp(s) - clamp(f))^2, plus eikonal and normal-alignment
penalties for samples with |s| < omega. The input gradient inside the loss is
a central difference, so the whole loss is a function of network outputs at
2*dim + 1 points per near-boundary sample and backprop stays first order.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import EmptyBandError, InputError, TrainingDiverged
from .geometry import FieldSource, MeshSource, TriangleSoup, hybrid_samples, sample_narrowband
from .inr import Mlp, NeuralField
from .sdf import ImplicitField, distance_vector, sdf_gradient

log = logging.getLogger(__name__)

LOSSES = ("igr", "l2_clamped", "l1_clamped", "l2_smooth")


@dataclass
class TrainConfig:
    delta: float = 0.001
    omega: float = 0.01
    lambda_g: float = 0.1
    tau: float = 1.0
    loss: str = "igr"
    alpha: float = 2.0
    batch_size: int = 1024
    steps: int = 2000
    lr: float = 1e-3
    lr_final: float = 1e-5
    momentum: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    n_surface: int = 5600
    n_narrowband: int = 6400
    n_uniform: int = 18000
    narrowband_width: float = None
    widths: tuple = (64, 64, 64, 64)
    skip: int = None
    beta: float = 100.0
    init_radius: float = 0.5
    grad_step: float = None
    val_every: int = 100
    n_val: int = 2000
    val_width: float = None
    divergence_factor: float = 1e3
    divergence_patience: int = 100

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if not (self.delta > 0 and self.omega > 0):
            raise InputError("delta and omega must be positive")
        if self.lambda_g < 0 or self.tau < 0:
            raise InputError("lambda_g and tau must be nonnegative")
        counts = (self.n_surface, self.n_narrowband, self.n_uniform)
        if min(counts) < 0 or sum(counts) == 0:
            raise InputError("sample counts must be nonnegative with a positive total")
        if self.loss not in LOSSES:
            raise InputError(f"unknown loss '{self.loss}' (choose from {LOSSES})")
        if self.steps < 0 or self.batch_size <= 0:
            raise InputError("steps must be >= 0 and batch_size > 0")

    @classmethod
    def full_scale(cls, **kw):
        """8 x 512 network with the 90K/28K/32K hybrid mix."""
        base = dict(widths=(512,) * 8, skip=4, n_uniform=90000, n_surface=28000,
                    n_narrowband=32000)
        base.update(kw)
        return cls(**base)


def clamp(v, delta):
    return np.minimum(delta, np.maximum(-delta, v))


def stencil_points(x, h):
    """Rows: x+h e_0, x-h e_0, x+h e_1, ... for every point (shape (2*dim, n, dim))."""
    dim = x.shape[1]
    st = np.repeat(x[None], 2 * dim, axis=0)
    for i in range(dim):
        st[2 * i, :, i] += h
        st[2 * i + 1, :, i] -= h
    return st


@dataclass
class Batch:
    x: np.ndarray
    s: np.ndarray
    n: np.ndarray = None


@dataclass
class LossParts:
    loss: float
    data: float
    eikonal: float
    normal: float
    skipped_normals: int


def _evaluation_points(batch: Batch, cfg: TrainConfig, h):
    near = np.flatnonzero(np.abs(batch.s) < cfg.omega) if cfg.loss == "igr" else np.empty(0, int)
    st = stencil_points(batch.x[near], h)
    pts = np.concatenate([batch.x, st.reshape(-1, batch.x.shape[1])])
    return near, pts


def _loss_terms(f_all, batch: Batch, cfg: TrainConfig, near, h):
    """Loss value and dL/df for every evaluated point (centre values first)."""
    N = len(batch.s)
    dim = batch.x.shape[1]
    f = f_all[:N]
    s = batch.s
    dldf = np.zeros_like(f_all)
    d = cfg.delta
    if cfg.loss in ("igr", "l2_clamped"):
        r = clamp(s, d) - clamp(f, d)
        data = float(np.sum(r * r) / N)
        dldf[:N] = -2.0 * r * (np.abs(f) < d) / N
    elif cfg.loss == "l1_clamped":
        r = clamp(s, d) - clamp(f, d)
        data = float(np.sum(np.abs(r)) / N)
        dldf[:N] = -np.sign(r) * (np.abs(f) < d) / N
    else:
        w = 1.0 + cfg.alpha ** np.abs(s)
        r = s - f
        data = float(np.sum(w * r * r) / N)
        dldf[:N] = -2.0 * w * r / N
    eik = nrm = 0.0
    skipped = 0
    if len(near):
        st = f_all[N:].reshape(2 * dim, len(near))
        g = ((st[0::2] - st[1::2]) / (2.0 * h)).T
        gn = np.linalg.norm(g, axis=1)
        dg = np.zeros_like(g)
        if cfg.lambda_g:
            e = gn - 1.0
            eik = float(cfg.lambda_g * np.sum(e * e) / N)
            safe = np.where(gn > 0, gn, 1.0)
            dg += (cfg.lambda_g * 2.0 * e / safe / N)[:, None] * g
        if cfg.tau and batch.n is not None:
            nv = batch.n[near]
            valid = np.all(np.isfinite(nv), axis=1)
            ok = valid & (gn >= 1e-8)
            skipped = int((valid & ~ok).sum())
            if ok.any():
                go, no, gno = g[ok], nv[ok], gn[ok]
                dot = np.einsum("ij,ij->i", go, no)
                c = dot / gno
                nrm = float(cfg.tau * np.sum((c - 1.0) ** 2) / N)
                dc = no / gno[:, None] - (dot / gno ** 3)[:, None] * go
                dg[ok] += (cfg.tau * 2.0 * (c - 1.0) / N)[:, None] * dc
        dst = np.empty((2 * dim, len(near)))
        dst[0::2] = dg.T / (2.0 * h)
        dst[1::2] = -dg.T / (2.0 * h)
        dldf[N:] = dst.reshape(-1)
    return LossParts(data + eik + nrm, data, eik, nrm, skipped), dldf


def loss_value(field, batch: Batch, cfg: TrainConfig, h) -> LossParts:
    """Loss for any callable field (used to check the evaluator against analytic SDFs)."""
    near, pts = _evaluation_points(batch, cfg, h)
    return _loss_terms(np.asarray(field(pts), float), batch, cfg, near, h)[0]


def loss_and_gradient(mlp: Mlp, batch: Batch, cfg: TrainConfig, h):
    near, pts = _evaluation_points(batch, cfg, h)
    f_all, cache = mlp.forward(pts, cache=True)
    parts, dldf = _loss_terms(f_all, batch, cfg, near, h)
    return parts, mlp.backward(cache, dldf)


class Adam:
    """Adam with externally supplied step size."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-12):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def cosine_lr(step, total, lr, lr_final):
    if total <= 1:
        return lr
    return lr_final + 0.5 * (lr - lr_final) * (1.0 + math.cos(math.pi * step / (total - 1)))


def as_source(sdf_source, domain):
    if isinstance(sdf_source, TriangleSoup):
        return MeshSource(sdf_source)
    if isinstance(sdf_source, ImplicitField):
        return FieldSource(sdf_source, domain)
    return sdf_source


def domain_edge(domain):
    return float(np.max(np.asarray(domain[1], float) - np.asarray(domain[0], float)))


@dataclass
class TrainResult:
    mlp: Mlp
    best_val_nmse: float
    best_step: int
    history: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def write_log(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "data", "eikonal", "normal", "lr", "val_nmse",
                        "best_val_nmse"])
            for row in self.history:
                w.writerow([row["step"]] + [repr(float(row[k])) for k in
                                            ("loss", "data", "eikonal", "normal", "lr",
                                             "val_nmse", "best_val_nmse")])


def train(sdf_source, domain, cfg: TrainConfig, init: Mlp = None, progress=None) -> TrainResult:
    """Hybrid-sampled minibatch training; returns the checkpoint with the best validation NMSE."""
    source = as_source(sdf_source, domain)
    dim = source.dim
    edge = domain_edge(domain)
    h = cfg.grad_step or 1e-4 * edge
    ss = np.random.SeedSequence(cfg.seed)
    s_data, s_val, s_init, s_batch = ss.spawn(4)
    band = cfg.narrowband_width if cfg.narrowband_width is not None else cfg.delta
    samples = hybrid_samples(source, domain, cfg.n_surface, cfg.n_narrowband, cfg.n_uniform,
                             band, s_data)
    X, S, Nrm = samples.concatenated()
    vwidth = cfg.val_width if cfg.val_width is not None else max(band, 2.0 ** -10)
    xv, sv, _ = sample_narrowband(source, cfg.n_val, vwidth, s_val, domain=domain)

    if init is None:
        mlp = Mlp.geometric_init(dim, cfg.widths, cfg.skip, cfg.beta, cfg.init_radius,
                                 seed=s_init)
    else:
        mlp = init.copy()
    opt = Adam(mlp.params, cfg.momentum, cfg.beta2)
    rng = np.random.default_rng(s_batch)

    def val_nmse(net):
        return float(np.mean((sv - net.forward(xv)) ** 2) / edge)

    best = mlp.copy()
    best_val = val_nmse(mlp)
    best_step = 0
    history = [dict(step=0, loss=math.nan, data=math.nan, eikonal=math.nan, normal=math.nan,
                    lr=cfg.lr, val_nmse=best_val, best_val_nmse=best_val)]
    n = len(S)
    order = rng.permutation(n)
    pos = 0
    first_loss = None
    bad_run = 0
    for step in range(1, cfg.steps + 1):
        if pos + cfg.batch_size > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + cfg.batch_size]
        pos += cfg.batch_size
        batch = Batch(X[idx], S[idx], Nrm[idx])
        parts, grads = loss_and_gradient(mlp, batch, cfg, h)
        if not np.isfinite(parts.loss):
            raise TrainingDiverged(step, f"non-finite loss at step {step}")
        if first_loss is None:
            first_loss = max(parts.loss, 1e-300)
        bad_run = bad_run + 1 if parts.loss > cfg.divergence_factor * first_loss else 0
        if bad_run >= cfg.divergence_patience:
            raise TrainingDiverged(step)
        lr = cosine_lr(step - 1, cfg.steps, cfg.lr, cfg.lr_final)
        opt.step(mlp.params, grads, lr)
        if step % cfg.val_every == 0 or step == cfg.steps:
            v = val_nmse(mlp)
            if v < best_val:
                best_val, best, best_step = v, mlp.copy(), step
            history.append(dict(step=step, loss=parts.loss, data=parts.data,
                                eikonal=parts.eikonal, normal=parts.normal, lr=lr, val_nmse=v,
                                best_val_nmse=best_val))
            if progress:
                progress(history[-1])
    return TrainResult(best, best_val, best_step, history, asdict(cfg))


# ------------------------------------------------------------------ metrics

def grid_points(domain, res):
    lo, hi = np.asarray(domain[0], float), np.asarray(domain[1], float)
    axes = [np.linspace(lo[i], hi[i], res) for i in range(len(lo))]
    return axes


def nmse(field: ImplicitField, oracle, delta, grid_res, domain):
    """Mean squared SDF error over grid points with |s| < delta, divided by the domain edge.

    ``oracle`` is an ImplicitField or a source with ``signed_distance``.
    """
    if grid_res < 2:
        raise InputError("grid_res must be at least 2")
    axes = grid_points(domain, grid_res)
    edge = domain_edge(domain)
    dim = len(axes)
    total, count = 0.0, 0
    # slabs along the first axis keep memory bounded
    rest = np.stack(np.meshgrid(*axes[1:], indexing="ij"), axis=-1).reshape(-1, dim - 1)
    for x0 in axes[0]:
        pts = np.column_stack([np.full(len(rest), x0), rest])
        s = _oracle_values(oracle, pts)
        m = np.abs(s) < delta
        if m.any():
            e = s[m] - field(pts[m])
            total += float(np.sum(e * e))
            count += int(m.sum())
    if count == 0:
        raise EmptyBandError(f"no grid point within the band |s| < {delta}")
    return total / count / edge


def _oracle_values(oracle, pts):
    if isinstance(oracle, ImplicitField):
        return oracle(pts)
    if isinstance(oracle, TriangleSoup):
        oracle = MeshSource(oracle)
    return np.asarray(oracle.signed_distance(pts)[0], float)


def true_distance_vectors(oracle, pts, h=1e-7):
    """Exact value and distance vector (towards the closest boundary point)."""
    if isinstance(oracle, TriangleSoup):
        from .geometry import exact_signed_distance
        s, foot = exact_signed_distance(oracle, pts)
        return np.atleast_1d(s), np.atleast_2d(foot) - np.atleast_2d(pts)
    s = oracle(pts)
    g = sdf_gradient(oracle, pts, h)
    gn = np.linalg.norm(g, axis=-1, keepdims=True)
    return s, -s[:, None] * g / np.where(gn > 0, gn, 1.0)


@dataclass
class SimilarityReport:
    mean: float
    sd: float
    cos: np.ndarray
    values: np.ndarray
    truth: np.ndarray
    log10_abs_err: np.ndarray
    log10_one_minus_cos: np.ndarray
    excluded: int
    nmse_gp: float


def distance_vector_similarity(field: ImplicitField, oracle, gauss_points, h, edge=2.0):
    """Cosine similarity between learned and true distance vectors at given points."""
    pts = np.asarray(gauss_points, float)
    s, d_true = true_distance_vectors(oracle, pts)
    f = field(pts)
    d_f = distance_vector(field, pts, h, floor=0.0, values=f)
    nt = np.linalg.norm(d_true, axis=1)
    nf = np.linalg.norm(d_f, axis=1)
    ok = (nt > 0) & (nf > 0) & np.isfinite(nf)
    cos = np.full(len(pts), np.nan)
    cos[ok] = np.einsum("ij,ij->i", d_true[ok], d_f[ok]) / (nt[ok] * nf[ok])
    with np.errstate(divide="ignore"):
        log_err = np.log10(np.abs(f - s))
        log_cos = np.log10(np.maximum(1.0 - cos, 0.0))
    c = cos[ok]
    return SimilarityReport(float(c.mean()) if len(c) else math.nan,
                            float(c.std()) if len(c) else math.nan, cos, f, s, log_err, log_cos,
                            int((~ok).sum()), float(np.mean((f - s) ** 2) / edge))


def write_metrics_csv(path, pts, report: SimilarityReport):
    pts = np.asarray(pts)
    if pts.shape[1] == 2:
        pts = np.column_stack([pts, np.zeros(len(pts))])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z", "f_theta", "s", "log10_abs_err", "log10_one_minus_cos"])
        for p, f, s, le, lc in zip(pts, report.values, report.truth, report.log10_abs_err,
                                   report.log10_one_minus_cos):
            w.writerow([repr(float(v)) for v in (*p, f, s, le, lc)])


def neural_field(result_or_mlp):
    mlp = result_or_mlp.mlp if isinstance(result_or_mlp, TrainResult) else result_or_mlp
    return NeuralField(mlp)
