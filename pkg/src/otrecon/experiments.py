"""Numerical checks and evaluation behind the command-line tool.

Every function here is deterministic given its config and seed, returns an
in-memory report, and optionally writes CSV/PGM artifacts into ``out_dir``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .datagen import TrainingPair, translated_truth
from .diffnet import reconstruct
from .errors import ContractError
from .grid import DiscreteMeasure, PixelGrid, SeededRng, contact_sheet, read_raw, write_pgm, write_raw
from .tomography import read_sinogram, write_sinogram
from .training import DataStream
from .transport import EntropicOTConfig, TransportCost, build_stencil, max_cost, metric_cost, sinkhorn

# stream ids for the 1-D checks, disjoint from data streams
PROP1_STREAM = (1 << 64) - 2
PROP2_STREAM = (1 << 64) - 3
METRIC_STREAM = (1 << 64) - 4


def write_table(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def write_report(path, items: dict) -> None:
    write_table(path, ("key", "value"), items.items())


# -- smearing under quadratic loss (1-D) ----------------------------------------

@dataclass
class Prop1Report:
    discrepancy: float
    profile: np.ndarray
    empirical: np.ndarray
    convolved: np.ndarray
    samples: int
    bound: int

    def items(self) -> dict:
        return {"cells": self.profile.size, "shift_bound": self.bound, "samples": self.samples,
                "relative_l2_discrepancy": self.discrepancy}


def gaussian_bump(cells: int, width: float) -> np.ndarray:
    x = np.arange(cells) - (cells - 1) / 2
    return np.exp(-0.5 * (x / width) ** 2)


def shifted(profile: np.ndarray, tau: int) -> np.ndarray:
    """``profile`` moved right by ``tau`` cells, zero-filled (not circular)."""
    out = np.zeros_like(profile)
    if tau >= 0:
        out[tau:] = profile[: profile.size - tau]
    else:
        out[:tau] = profile[-tau:]
    return out


def prop1(cfg: ExperimentConfig, seed: int | None = None, out_dir=None) -> Prop1Report:
    """Mean of randomly shifted bumps versus the bump convolved with the shift law.

    Under squared loss the best reconstruction from shifted data is the
    pointwise mean of the shifted targets; its population limit is the
    target convolved with the shift distribution.
    """
    b, n = int(cfg.prop1_bound), int(cfg.prop1_samples)
    if b < 0 or 2 * b >= cfg.prop1_cells:
        raise ContractError("prop1_bound must be in [0, cells / 2)")
    if n < 1:
        raise ContractError("prop1_samples must be >= 1")
    g = gaussian_bump(cfg.prop1_cells, cfg.prop1_width)
    gen = SeededRng(cfg.seed if seed is None else seed, PROP1_STREAM).generator()
    taus = gen.integers(-b, b, size=n, endpoint=True)
    counts = np.bincount(taus + b, minlength=2 * b + 1)
    empirical = sum(c * shifted(g, t) for t, c in zip(range(-b, b + 1), counts) if c) / n
    law = np.full(2 * b + 1, 1.0 / (2 * b + 1))
    convolved = np.convolve(g, law, mode="same")
    disc = float(np.linalg.norm(empirical - convolved) / np.linalg.norm(convolved))
    report = Prop1Report(disc, g, empirical, convolved, n, b)
    if out_dir is not None:
        out = Path(out_dir)
        write_table(out / "prop1_profiles.csv", ("cell", "target", "empirical_mean", "convolution"),
                    zip(range(g.size), g, empirical, convolved))
        write_report(out / "prop1_report.csv", report.items())
    return report


# -- barycenter of shifted deltas (1-D) -----------------------------------------

@dataclass
class Prop2Report:
    x: np.ndarray
    f_uniform: np.ndarray
    max_error_uniform: float
    argmin_uniform: float
    discrete_cases: list           # (mean, argmin) per seeded distribution
    max_discrete_gap: float
    f_quartic: np.ndarray
    argmin_quartic: float
    brute_force: dict              # case -> (sinkhorn argmin, analytic argmin)
    cell: float                    # spacing of the brute-force grid
    grid_step: float               # spacing of the quadrature grid

    @property
    def brute_force_agrees(self) -> bool:
        return all(abs(s - a) <= self.cell + 1e-12 for s, a in self.brute_force.values())

    @property
    def discrete_agrees(self) -> bool:
        return self.max_discrete_gap <= self.grid_step + 1e-12

    def items(self) -> dict:
        out = {"uniform_squared_max_abs_error": self.max_error_uniform,
               "uniform_squared_argmin": self.argmin_uniform,
               "discrete_max_argmin_minus_mean": self.max_discrete_gap,
               "quartic_uniform_argmin": self.argmin_quartic}
        for name, (s, a) in self.brute_force.items():
            out[f"brute_force_{name}_sinkhorn_argmin"] = s
            out[f"brute_force_{name}_analytic_argmin"] = a
        out["brute_force_agrees_within_cell"] = self.brute_force_agrees
        return out


def expected_cost(x: np.ndarray, atoms: np.ndarray, weights: np.ndarray, cost: TransportCost) -> np.ndarray:
    """``F(x) = sum_t c(t, x) P(t)`` for every entry of ``x``."""
    return cost.of_distance(np.abs(x[:, None] - atoms[None, :])) @ weights


def uniform_quadrature(lo: float, hi: float, nodes: int = 64):
    """Gauss-Legendre atoms and weights for the uniform law on ``[lo, hi]``."""
    t, w = np.polynomial.legendre.leggauss(nodes)
    return 0.5 * (hi - lo) * t + 0.5 * (hi + lo), 0.5 * w


def _argmin(x, f) -> float:
    return float(x[int(np.argmin(f))])


def sinkhorn_barycenter_scan(atoms_idx, weights, cells: int, spacing: float, cost: TransportCost,
                             iterations: int, eps_fraction: float, rho: float = 1e-9) -> np.ndarray:
    """``x -> T_eps(P, delta_x)`` on a 1-D grid via the transport module.

    With a Dirac second marginal the only coupling is the product one, so this
    equals ``E_tau[T_eps(delta_tau, delta_x)]`` up to the background floor,
    whatever ``eps`` is. ``eps`` is ``eps_fraction`` times the largest cost on
    the grid; much below 1/700 of it the kernel underflows between distant cells.
    """
    grid = PixelGrid(cells, 1, spacing)
    eps = eps_fraction * max_cost(grid, cost)
    stencil = build_stencil(grid, cost, eps, method="direct")
    p = np.zeros(cells)
    np.add.at(p, atoms_idx, weights)
    mu0 = DiscreteMeasure(grid, p / p.sum())
    ot = EntropicOTConfig(eps, iterations, rho)
    values = np.empty(cells)
    for j in range(cells):
        delta = np.zeros(cells)
        delta[j] = 1.0
        values[j] = sinkhorn(mu0, DiscreteMeasure(grid, delta), stencil, ot).value
    return values


def prop2(cfg: ExperimentConfig, seed: int | None = None, out_dir=None) -> Prop2Report:
    x = np.linspace(-2.0, 2.0, cfg.prop2_points)
    step = float(x[1] - x[0])
    sq = TransportCost.squared()
    quartic = TransportCost.bounded_quartic(cfg.prop2_sigma)

    # (i) uniform law on [-1, 1], squared cost: F(x) = 1/3 + x^2
    atoms, weights = uniform_quadrature(-1.0, 1.0)
    f_uniform = expected_cost(x, atoms, weights, sq)
    max_err = float(np.max(np.abs(f_uniform - (1.0 / 3.0 + x**2))))

    # (ii) seeded asymmetric discrete laws: argmin at the mean
    gen = SeededRng(cfg.seed if seed is None else seed, PROP2_STREAM).generator()
    cases = []
    for _ in range(cfg.prop2_distributions):
        k = int(gen.integers(2, 7))
        support = gen.uniform(-1.5, 1.5, size=k)
        mass = gen.dirichlet(np.ones(k))
        f = expected_cost(x, support, mass, sq)
        cases.append((float(support @ mass), _argmin(x, f)))
    gap = max((abs(m - a) for m, a in cases), default=0.0)

    # (iii) bounded quartic cost, uniform law
    f_quartic = expected_cost(x, atoms, weights, quartic)

    # brute force with the transport module on a coarse grid of [-2, 2]
    cells = int(cfg.prop2_cells)
    spacing = 4.0 / (cells - 1)
    coarse = -2.0 + spacing * np.arange(cells)
    support_idx = np.flatnonzero(np.abs(coarse) <= 1.0 + 1e-12)
    uniform_w = np.full(support_idx.size, 1.0 / support_idx.size)
    brute = {}
    for name, cost, f in (("squared", sq, f_uniform), ("quartic", quartic, f_quartic)):
        scan = sinkhorn_barycenter_scan(support_idx, uniform_w, cells, spacing, cost,
                                        cfg.prop2_sinkhorn_iterations, cfg.prop2_eps_fraction)
        brute[name] = (float(coarse[int(np.argmin(scan))]), _argmin(x, f))

    report = Prop2Report(x, f_uniform, max_err, _argmin(x, f_uniform), cases, gap, f_quartic,
                         _argmin(x, f_quartic), brute, spacing, step)
    if out_dir is not None:
        out = Path(out_dir)
        write_table(out / "prop2_curves.csv", ("x", "F_uniform_squared", "closed_form", "F_uniform_quartic"),
                    zip(x, f_uniform, 1.0 / 3.0 + x**2, f_quartic))
        write_table(out / "prop2_discrete.csv", ("case", "mean", "argmin"),
                    ((i, m, a) for i, (m, a) in enumerate(cases)))
        write_report(out / "prop2_report.csv", report.items())
    return report


# -- metric property of the bounded cost ----------------------------------------

@dataclass
class MetricReport:
    exponents: tuple
    triples: int
    max_triangle_excess: dict      # n -> max(d(x,z) - d(x,y) - d(y,z))
    violations: dict               # n -> count beyond tolerance
    max_asymmetry: dict
    max_self_distance: dict
    tolerance: float = 1e-12

    @property
    def ok(self) -> bool:
        return all(v == 0 for v in self.violations.values()) and \
            all(a <= self.tolerance for a in self.max_asymmetry.values()) and \
            all(s <= self.tolerance for s in self.max_self_distance.values())

    def rows(self):
        for n in self.exponents:
            yield (n, self.triples, self.max_triangle_excess[n], self.violations[n],
                   self.max_asymmetry[n], self.max_self_distance[n])


def metric_check(cfg: ExperimentConfig, seed: int | None = None, out_dir=None,
                 chunk: int = 200_000) -> MetricReport:
    """Sample triples in the plane and test the metric axioms of ``metric_cost``."""
    if cfg.metric_triples < 0:
        raise ContractError("metric_triples must be >= 0")
    excess, viol, asym, selfd = {}, {}, {}, {}
    box = cfg.metric_box
    for n in cfg.metric_exponents:
        if n < 1:
            raise ContractError(f"metric exponent must be >= 1, got {n}")
        # same triples for every exponent
        gen = SeededRng(cfg.seed if seed is None else seed, METRIC_STREAM).generator()
        worst, count, worst_asym, worst_self = -np.inf, 0, 0.0, 0.0
        left = cfg.metric_triples
        while left > 0:
            m = min(chunk, left)
            left -= m
            x, y, z = gen.uniform(-box, box, size=(3, m, 2))
            dxy, dyz, dxz = metric_cost(x, y, n), metric_cost(y, z, n), metric_cost(x, z, n)
            d = dxz - dxy - dyz
            worst = max(worst, float(d.max()))
            count += int(np.count_nonzero(d > 1e-12))
            worst_asym = max(worst_asym, float(np.max(np.abs(dxy - metric_cost(y, x, n)))))
            worst_self = max(worst_self, float(np.max(np.abs(metric_cost(x, x, n)))))
        excess[n], viol[n], asym[n], selfd[n] = worst, count, worst_asym, worst_self
    report = MetricReport(tuple(cfg.metric_exponents), cfg.metric_triples, excess, viol, asym, selfd)
    if out_dir is not None:
        write_table(Path(out_dir) / "metric_report.csv",
                    ("n", "triples", "max_triangle_excess", "violations", "max_asymmetry",
                     "max_self_distance"), report.rows())
    return report


# -- reconstruction metrics -------------------------------------------------------

def _density(image: np.ndarray):
    p = np.maximum(np.asarray(image, dtype=np.float64), 0.0)
    total = p.sum()
    if not total > 0:
        return None, 0.0
    return p / total, total


def centroid(image: np.ndarray) -> np.ndarray:
    """Center of mass of the positive part, in pixel units ``(x, y)``."""
    p, _ = _density(image)
    if p is None:
        return np.array([np.nan, np.nan])
    ys, xs = np.indices(p.shape)
    return np.array([np.sum(p * xs), np.sum(p * ys)])


def spread(image: np.ndarray) -> float:
    """Trace of the second central moment of the positive part (pixel units squared)."""
    p, _ = _density(image)
    if p is None:
        return float("nan")
    ys, xs = np.indices(p.shape)
    cx, cy = np.sum(p * xs), np.sum(p * ys)
    return float(np.sum(p * ((xs - cx) ** 2 + (ys - cy) ** 2)))


@dataclass(frozen=True)
class SampleMetrics:
    l2_error: float
    mass_error: float
    centroid_shift: float
    spread_ratio: float

    FIELDS = ("l2_error", "mass_error", "centroid_shift", "spread_ratio")

    def row(self):
        return tuple(getattr(self, f) for f in self.FIELDS)


def sample_metrics(recon: np.ndarray, truth: np.ndarray) -> SampleMetrics:
    recon = np.asarray(recon, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if recon.shape != truth.shape:
        raise ContractError(f"reconstruction shape {recon.shape} does not match truth {truth.shape}")
    m_f = float(truth.sum())
    return SampleMetrics(
        float(np.mean((recon - truth) ** 2)),
        (float(recon.sum()) - m_f) / m_f if m_f else float("nan"),
        float(np.linalg.norm(centroid(recon) - centroid(truth))),
        spread(recon) / spread(truth),
    )


@dataclass
class EvalReport:
    per_sample: list               # per checkpoint: list[SampleMetrics]
    labels: list

    def mean(self, label: str, name: str) -> float:
        rows = self.per_sample[self.labels.index(label)]
        return float(np.mean([getattr(r, name) for r in rows]))

    def summary_rows(self):
        for label in self.labels:
            yield (label,) + tuple(self.mean(label, f) for f in SampleMetrics.FIELDS)


def evaluate(nets: list, labels: list, pairs: list, out_dir=None) -> EvalReport:
    """Reconstruct every validation pair with every network and tabulate metrics.

    With two networks, also writes a 4-panel PGM (truth, translated truth,
    first reconstruction, second reconstruction) for the first pair.
    """
    for net in nets:
        for p in pairs:
            if net.config.grid != p.truth.grid or net.config.geometry != p.data.geometry:
                raise ContractError("checkpoint geometry does not match the validation data")
    recons = [[reconstruct(net, p.data).image for p in pairs] for net in nets]
    per = [[sample_metrics(r, p.truth.image) for r, p in zip(rs, pairs)] for rs in recons]
    report = EvalReport(per, list(labels))
    if out_dir is not None:
        out = Path(out_dir)
        write_table(out / "eval_samples.csv", ("model", "sample") + SampleMetrics.FIELDS,
                    ((lab, i) + m.row() for lab, rows in zip(labels, per) for i, m in enumerate(rows)))
        write_table(out / "eval_summary.csv", ("model",) + SampleMetrics.FIELDS, report.summary_rows())
        if len(nets) == 2 and pairs:
            panels = [pairs[0].truth.image, translated_truth(pairs[0]).image, recons[0][0], recons[1][0]]
            write_pgm(contact_sheet(panels), out / "eval_panel.pgm")
    return report


# -- datasets -------------------------------------------------------------------

def pair_paths(root, k: int):
    base = Path(root) / "pairs" / f"pair_{k:05d}"
    return base.with_suffix(".truth.otr"), base.with_suffix(".sino.ots")


def generate(cfg: ExperimentConfig, out_dir) -> list:
    """Write ``cfg.num_pairs`` seeded pairs plus a shift manifest and a triptych of pair 0."""
    out = Path(out_dir)
    (out / "pairs").mkdir(parents=True, exist_ok=True)
    stream = cfg.stream()
    rows = []
    for k in range(cfg.num_pairs):
        pair = stream.pair(k)
        truth_path, sino_path = pair_paths(out, k)
        write_raw(pair.truth, truth_path)
        write_sinogram(pair.data, sino_path)
        for i, (c, (dx, dy)) in enumerate(zip(pair.circles, pair.shifts)):
            rows.append((cfg.seed, k, i, c.cx, c.cy, c.radius, c.intensity, dx, dy, pair.rejected))
        if k == 0:
            panels = [pair.truth.image, translated_truth(pair).image, pair.data.values]
            write_pgm(contact_sheet(panels), out / "pair0_triptych.pgm")
    write_table(out / "dataset.csv",
                ("seed", "stream", "circle", "cx", "cy", "radius", "intensity", "dx", "dy", "rejected"), rows)
    return rows


@dataclass(frozen=True)
class StoredPairs:
    """Pairs read from a generated dataset; step ``k`` uses stored pair ``k mod N``.

    Validation pairs still come from the held-out streams of ``stream``.
    """

    root: Path
    count: int
    stream: DataStream

    def pair(self, k: int) -> TrainingPair:
        truth_path, sino_path = pair_paths(self.root, k % self.count)
        return TrainingPair(read_raw(truth_path), read_sinogram(sino_path))

    def validation_set(self, size: int) -> list:
        return self.stream.validation_set(size)


def open_dataset(root, stream: DataStream) -> StoredPairs:
    root = Path(root)
    count = len(list((root / "pairs").glob("pair_*.truth.otr")))
    if count == 0:
        raise ContractError(f"{root}: no stored pairs")
    return StoredPairs(root, count, stream)
