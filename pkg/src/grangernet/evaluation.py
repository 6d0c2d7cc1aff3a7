"""Support-recovery metrics and the simulation experiment harness."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid

from .exceptions import GrangerNetError, ValidationError
from .penalties import GRID_SPAN, Kind, lambda_grid, make_penalty
from .selection import DEFAULT_GAMMA, select_model, sweep
from .solver import SolverOptions
from .assembly import assemble
from .var_core import TARGET_RADIUS, GroundTruthSpec, VarPanel, generate_ground_truth, least_squares, offdiag_mask, simulate_panel

logger = logging.getLogger(__name__)

METRICS = ("F1", "FPR", "TPR", "ACC", "MCC")
PARTS = ("total", "common", "differential")


@dataclass(frozen=True)
class SupportSet:
    """Per-model off-diagonal GC supports, shape (K, n, n)."""

    masks: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.masks, dtype=bool)
        if m.ndim == 2:
            m = m[None]
        m = m & offdiag_mask(m.shape[1])[None]
        object.__setattr__(self, "masks", m)

    @classmethod
    def from_coefs(cls, coefs: np.ndarray) -> "SupportSet":
        """Support ``||B_ij^(k)|| > 0`` of (K, p, n, n) coefficients."""
        return cls(np.any(np.asarray(coefs) != 0, axis=1))

    @property
    def K(self) -> int:
        return self.masks.shape[0]

    def decompose(self) -> tuple[np.ndarray, np.ndarray]:
        return decompose(self)


def decompose(support: SupportSet | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Common part (entrywise AND over models) and per-model differentials."""
    masks = support.masks if isinstance(support, SupportSet) else SupportSet(support).masks
    common = np.logical_and.reduce(masks, axis=0)
    return common, masks & ~common[None]


@dataclass(frozen=True)
class Metrics:
    TP: int
    FP: int
    TN: int
    FN: int
    F1: float
    FPR: float
    TPR: float
    ACC: float
    MCC: float
    undefined: tuple = ()

    def as_dict(self) -> dict:
        d = {m: getattr(self, m) for m in METRICS}
        d.update(TP=self.TP, FP=self.FP, TN=self.TN, FN=self.FN, undefined=";".join(self.undefined))
        return d


def _ratio(num, den, name, undefined):
    if den == 0:
        undefined.append(name)
        return 0.0
    return 100.0 * num / den


def confusion_metrics(TP: int, FP: int, TN: int, FN: int) -> Metrics:
    """F1, FPR, TPR, ACC and MCC in percent; vanishing denominators give 0 and a flag."""
    undefined: list[str] = []
    f1 = _ratio(2 * TP, 2 * TP + FP + FN, "F1", undefined)
    fpr = _ratio(FP, FP + TN, "FPR", undefined)
    tpr = _ratio(TP, TP + FN, "TPR", undefined)
    acc = _ratio(TP + TN, TP + FP + TN + FN, "ACC", undefined)
    den = math.sqrt(float(TP + FP) * (TP + FN) * (TN + FP) * (TN + FN))
    mcc = _ratio(TP * TN - FP * FN, den, "MCC", undefined)
    return Metrics(TP, FP, TN, FN, f1, fpr, tpr, acc, mcc, tuple(undefined))


def classification_metrics(predicted: np.ndarray, truth: np.ndarray) -> Metrics:
    """Metrics over the off-diagonal entries of (…, n, n) boolean masks."""
    predicted = np.asarray(predicted, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if predicted.shape != truth.shape:
        raise ValidationError(f"shape mismatch {predicted.shape} vs {truth.shape}")
    off = np.broadcast_to(offdiag_mask(truth.shape[-1]), truth.shape)
    pr, tr = predicted[off], truth[off]
    TP = int(np.sum(pr & tr))
    FP = int(np.sum(pr & ~tr))
    FN = int(np.sum(~pr & tr))
    TN = int(pr.size - TP - FP - FN)
    return confusion_metrics(TP, FP, TN, FN)


def part_metrics(predicted: SupportSet, truth_common: np.ndarray, truth_diff: np.ndarray) -> dict:
    """Metrics on the total, common and differential parts."""
    common, diff = decompose(predicted)
    total_truth = truth_common[None] | truth_diff
    return {
        "total": classification_metrics(predicted.masks, total_truth),
        "common": classification_metrics(common, truth_common),
        "differential": classification_metrics(diff, truth_diff),
    }


@dataclass(frozen=True)
class Scenario:
    """One simulation setting: truth generator, formulation, grid and solver."""

    kind: str = "dgn"
    q: float = 0.5
    n: int = 20
    p: int = 1
    K: int = 5
    T: int = 100
    common_density: float = 0.1
    differential_density: float = 0.05
    fused_truth: bool | None = None   # default: True for FGN
    target_radius: float = TARGET_RADIUS
    grid_size: int = 12
    lam2_size: int | None = 8
    grid_span: float = GRID_SPAN
    gamma: float = DEFAULT_GAMMA
    max_iter: int = 2000
    eps_rel: float = 1e-5
    eps_abs: float = 1e-7

    def truth_spec(self, seed) -> GroundTruthSpec:
        fused = self.fused_truth if self.fused_truth is not None else Kind.parse(self.kind) is Kind.FGN
        return GroundTruthSpec(self.n, self.p, self.K, self.T, self.common_density, self.differential_density,
                               fused, seed, target_radius=self.target_radius)

    def solver_options(self) -> SolverOptions:
        return SolverOptions(max_iter=self.max_iter, eps_rel=self.eps_rel, eps_abs=self.eps_abs)


def replicate_data(scenario: Scenario, seed: int):
    """Ground truth and simulated panel for one replicate seed."""
    ss = np.random.SeedSequence(seed)
    s_truth, s_sim = ss.spawn(2)
    truth = generate_ground_truth(scenario.truth_spec(None), seed=np.random.default_rng(s_truth))
    series = simulate_panel(truth, seed=np.random.default_rng(s_sim))
    return truth, VarPanel.from_series(series, scenario.p)


def run_replicate(scenario: Scenario, seed: int) -> dict:
    """Estimate, select and score one replicate; returns rows per part."""
    truth, panel = replicate_data(scenario, seed)
    sel = select_model(panel, scenario.kind, scenario.q, gamma=scenario.gamma, grid_size=scenario.grid_size,
                       lam2_size=scenario.lam2_size, span=scenario.grid_span, options=scenario.solver_options())
    predicted = SupportSet(sel.best.support)
    parts = part_metrics(predicted, truth.common, truth.differential)
    return {
        "seed": seed,
        "lam1": sel.best.lam1,
        "lam2": sel.best.lam2,
        "df": sel.best.df,
        "metrics": {part: m.as_dict() for part, m in parts.items()},
    }


def _safe_replicate(args):
    scenario, seed = args
    try:
        return run_replicate(scenario, seed)
    except GrangerNetError as exc:
        logger.warning("replicate %d failed: %s", seed, exc)
        return {"seed": seed, "error": str(exc)}


@dataclass
class ExperimentResult:
    scenario: Scenario
    replicates: list
    failures: list = field(default_factory=list)

    def rows(self) -> list[dict]:
        out = []
        for rep in sorted(self.replicates, key=lambda r: r["seed"]):
            for part in PARTS:
                row = {"seed": rep["seed"], "part": part, "lam1": rep["lam1"], "lam2": rep["lam2"], "df": rep["df"]}
                row.update(rep["metrics"][part])
                out.append(row)
        return out

    def values(self, part: str, metric: str) -> np.ndarray:
        return np.array([r["metrics"][part][metric] for r in sorted(self.replicates, key=lambda r: r["seed"])])

    def summary(self) -> list[dict]:
        """Mean, sd, median and quartiles per part and metric."""
        out = []
        for part in PARTS:
            for metric in METRICS:
                v = self.values(part, metric)
                if v.size == 0:
                    continue
                q1, med, q3 = np.percentile(v, [25, 50, 75])
                out.append({"part": part, "metric": metric, "mean": float(v.mean()),
                            "sd": float(v.std(ddof=1)) if v.size > 1 else 0.0,
                            "median": float(med), "q1": float(q1), "q3": float(q3), "count": int(v.size)})
        return out

    def summary_table(self) -> list[dict]:
        """One row per part with ``mean (sd)`` cells in F1, FPR, TPR, ACC, MCC order."""
        s = {(r["part"], r["metric"]): r for r in self.summary()}
        table = []
        for part in PARTS:
            row = {"part": part}
            for metric in METRICS:
                r = s.get((part, metric))
                row[metric] = f"{r['mean']:.1f} ({r['sd']:.1f})" if r else ""
            table.append(row)
        return table


def run_experiment(scenario: Scenario, replicates: int, seed: int = 0, *, workers: int = 1) -> ExperimentResult:
    """Run ``replicates`` independent replicates with seeds ``seed, seed+1, ...``."""
    jobs = [(scenario, seed + r) for r in range(replicates)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_safe_replicate, jobs))
    else:
        results = [_safe_replicate(j) for j in jobs]
    ok = [r for r in results if "error" not in r]
    failed = [r for r in results if "error" in r]
    if failed:
        logger.warning("%d of %d replicates failed and were excluded", len(failed), replicates)
    return ExperimentResult(scenario, ok, failed)


def write_csv(rows: list[dict], path) -> None:
    if not rows:
        open(path, "w").close()
        return
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


# -- ROC along a single-penalty path ----------------------------------------

def _closed_curve(fpr, tpr) -> tuple[np.ndarray, np.ndarray]:
    x = np.concatenate([[0.0], np.asarray(fpr, float), [100.0]])
    y = np.concatenate([[0.0], np.asarray(tpr, float), [100.0]])
    order = np.lexsort((y, x))
    return x[order], y[order]


def roc_curve(scenario: Scenario, replicates: int, seed: int = 0, *, path_size: int | None = None):
    """Replicate-averaged (FPR, TPR) on the common part along a CGN lambda path.

    Each replicate traces its own lambda path (``path_size`` log-spaced values
    from its critical lambda; one ROC point per value).  The curves are
    averaged vertically: every replicate's TPR is interpolated at the union of
    all FPR breakpoints, so the area of the mean curve is the mean area.
    """
    if Kind.parse(scenario.kind) is not Kind.CGN:
        raise ValidationError("ROC curves are defined for the single-penalty CGN path")
    size = path_size or scenario.grid_size
    curves = []
    for r in range(replicates):
        truth, panel = replicate_data(scenario, seed + r)
        problem = assemble(panel)
        ls = least_squares(panel)
        penalty = make_penalty(ls, "cgn", scenario.q)
        grid = lambda_grid(problem, penalty, size, span=scenario.grid_span)
        cands = sweep(panel, penalty, grid, gamma=scenario.gamma, options=scenario.solver_options(),
                      problem=problem, ls=ls)
        points = [classification_metrics(decompose(SupportSet(c.support))[0], truth.common) for c in cands]
        curves.append(_closed_curve([m.FPR for m in points], [m.TPR for m in points]))
    fpr = np.unique(np.concatenate([x for x, _ in curves]))
    tpr = np.mean([np.interp(fpr, x, y) for x, y in curves], axis=0)
    return fpr, tpr


def roc_auc(fpr: np.ndarray, tpr: np.ndarray) -> float:
    """Trapezoidal area (fraction of 1) with the (0,0) and (100,100) corners added."""
    x, y = _closed_curve(fpr, tpr)
    return float(trapezoid(y, x) / 1e4)


# -- DGN penalty-grid heat maps -----------------------------------------------

def grid_f1(scenario: Scenario, seed: int):
    """F1 of every grid pair on the common and differential parts for one replicate.

    Returns ``(lam1s, lam2s, f1_common, f1_diff)`` with the F1 arrays shaped
    ``(len(lam2s), len(lam1s))``.
    """
    truth, panel = replicate_data(scenario, seed)
    problem = assemble(panel)
    ls = least_squares(panel)
    penalty = make_penalty(ls, scenario.kind, scenario.q)
    grid = lambda_grid(problem, penalty, scenario.grid_size, lam2_size=scenario.lam2_size,
                       span=scenario.grid_span, options=scenario.solver_options())
    cands = sweep(panel, penalty, grid, gamma=scenario.gamma, options=scenario.solver_options(),
                  problem=problem, ls=ls)
    lam1s = sorted({c.lam1 for c in cands}, reverse=True)
    lam2s = sorted({c.lam2 for c in cands}, reverse=True)
    f1c = np.zeros((len(lam2s), len(lam1s)))
    f1d = np.zeros_like(f1c)
    for c in cands:
        a, b = lam1s.index(c.lam1), lam2s.index(c.lam2)
        m = part_metrics(SupportSet(c.support), truth.common, truth.differential)
        f1c[b, a] = m["common"].F1
        f1d[b, a] = m["differential"].F1
    return np.array(lam1s), np.array(lam2s), f1c, f1d


def grid_best(f1: np.ndarray) -> set[tuple[int, int]]:
    """Cells attaining the maximum F1 (the argmax set; plateaus keep every tied cell)."""
    return {(int(a), int(b)) for a, b in np.argwhere(f1 >= f1.max())}


def grid_adjacent(a: set[tuple[int, int]], b: set[tuple[int, int]]) -> bool:
    """Some cell of ``a`` equals or neighbours (8-connectivity) some cell of ``b``."""
    return any(max(abs(u[0] - v[0]), abs(u[1] - v[1])) <= 1 for u in a for v in b)
