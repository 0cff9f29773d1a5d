"""
Pareto reports over (consistency, prompt fidelity) points.

A point dominates another when it is at least as good on both axes and better
on one. Dominance between two methods is summarised per seed over the pairs of
their frontier points that are comparable: a win counts 1, a loss 0 and an
exact tie 0.5 to each side. Seeds without a comparable pair count 0.5.
"""

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass
from itertools import permutations
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import matplotlib
import numpy as np
from matplotlib.figure import Figure
from scipy import stats

from .exceptions import ArtifactError, ReportError

logger = logging.getLogger(__name__)

PARETO_COLUMNS = ('method', 'guidance', 'omega_con', 'seed', 'consistency', 'prompt_fidelity')
BOOTSTRAP_SAMPLES = 1000


@dataclass(frozen=True)
class ParetoPoint:
    method: str
    omega_con: Optional[float]
    consistency: float
    prompt_fidelity: float
    seed: int
    # 'consistency' for consistency-guided points, 'cfg' for plain classifier-free guidance
    guidance: str = 'consistency'

    def __post_init__(self):
        if not (np.isfinite(self.consistency) and np.isfinite(self.prompt_fidelity)):
            raise ReportError(f"non-finite scores for {self.method} seed {self.seed}")

    @property
    def scores(self) -> Tuple[float, float]:
        return self.consistency, self.prompt_fidelity


def dominates(a: ParetoPoint, b: ParetoPoint) -> bool:
    return (
        a.consistency >= b.consistency
        and a.prompt_fidelity >= b.prompt_fidelity
        and a.scores != b.scores
    )


def pareto_frontier(points: Iterable[ParetoPoint]) -> List[ParetoPoint]:
    """Non-dominated points, ordered by consistency then prompt fidelity."""
    points = sorted(points, key=lambda p: (p.consistency, p.prompt_fidelity, p.method, p.seed, p.omega_con or 0.0))
    return [p for p in points if not any(dominates(q, p) for q in points)]


def _pair_fraction(first: Sequence[ParetoPoint], second: Sequence[ParetoPoint]) -> float:
    wins, comparable = 0.0, 0
    for a in pareto_frontier(first):
        for b in pareto_frontier(second):
            if a.scores == b.scores:
                wins += 0.5
            elif dominates(a, b):
                wins += 1.0
            elif not dominates(b, a):
                continue
            comparable += 1
    return wins / comparable if comparable else 0.5


def _by_seed(points: Iterable[ParetoPoint]) -> Dict[int, List[ParetoPoint]]:
    grouped = defaultdict(list)
    for point in points:
        grouped[point.seed].append(point)
    return grouped


def dominance_fraction(first: Sequence[ParetoPoint], second: Sequence[ParetoPoint]) -> float:
    """Mean over shared seeds of how often ``first``'s frontier beats ``second``'s."""
    return float(np.mean(list(_seed_fractions(first, second).values())))


def _seed_fractions(first, second) -> Dict[int, float]:
    a, b = _by_seed(first), _by_seed(second)
    seeds = sorted(set(a) & set(b))
    if not seeds:
        raise ReportError("methods share no seed")
    return {seed: _pair_fraction(a[seed], b[seed]) for seed in seeds}


def bootstrap_interval(values: Sequence[float], level: float = 0.95, seed: int = 0) -> Tuple[float, float]:
    """Percentile interval of the mean under resampling of the per-seed values."""
    values = np.asarray(values, dtype=np.float64)
    rng = np.random.default_rng(seed)
    means = rng.choice(values, size=(BOOTSTRAP_SAMPLES, values.size), replace=True).mean(axis=1)
    tail = 100.0 * (1.0 - level) / 2.0
    low, high = np.percentile(means, [tail, 100.0 - tail])
    return float(low), float(high)


TREND_COLUMNS = ('method', 'seed', 'rho_consistency', 'rho_fidelity', 'degenerate')


def _spearman(omegas, scores) -> Optional[float]:
    if np.ptp(omegas) == 0.0 or np.ptp(scores) == 0.0:
        return None
    return float(stats.spearmanr(omegas, scores)[0])


def guidance_trend(points: Sequence[ParetoPoint]) -> List[dict]:
    """Per method and seed, Spearman correlations of both scores with omega_con.

    A score that does not move with omega_con has no rank correlation: its rho
    is None and the row is marked degenerate.
    """
    rows = []
    grouped = defaultdict(list)
    for point in points:
        if point.guidance == 'consistency':
            grouped[(point.method, point.seed)].append(point)
    for (method, seed), group in sorted(grouped.items()):
        if len(group) < 2:
            continue
        omegas = [p.omega_con for p in group]
        rho_con = _spearman(omegas, [p.consistency for p in group])
        rho_fid = _spearman(omegas, [p.prompt_fidelity for p in group])
        degenerate = rho_con is None or rho_fid is None
        if degenerate:
            logger.warning("%s seed %d: a score is constant over omega_con, no trend", method, seed)
        rows.append({'method': method, 'seed': seed, 'rho_consistency': rho_con, 'rho_fidelity': rho_fid,
                     'degenerate': degenerate})
    return rows


# -- CSV ----------------------------------------------------------------------

def _number(value) -> str:
    return '' if value is None else repr(float(value))


def write_pareto_csv(path, points: Iterable[ParetoPoint]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(PARETO_COLUMNS)
        for p in points:
            writer.writerow([p.method, p.guidance, _number(p.omega_con), p.seed,
                             _number(p.consistency), _number(p.prompt_fidelity)])
    return path


def read_pareto_csv(path) -> List[ParetoPoint]:
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"no Pareto table at {path}")
    with path.open(newline='') as handle:
        reader = csv.DictReader(handle)
        if tuple(reader.fieldnames or ()) != PARETO_COLUMNS:
            raise ArtifactError(f"{path} is not a Pareto table")
        return [
            ParetoPoint(
                method=row['method'],
                omega_con=float(row['omega_con']) if row['omega_con'] else None,
                consistency=float(row['consistency']),
                prompt_fidelity=float(row['prompt_fidelity']),
                seed=int(row['seed']),
                guidance=row['guidance'],
            )
            for row in reader
        ]


def write_rows(path, columns: Sequence[str], rows: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in (row[c] for c in columns)])
    return path


# -- plot -----------------------------------------------------------------------

def plot_pareto(path, points: Sequence[ParetoPoint]) -> Path:
    """One polyline per method through its seed-averaged points; plain CFG as diamonds."""
    path = Path(path)
    figure = Figure(figsize=(6, 4.5))
    axes = figure.add_subplot()
    methods = sorted({p.method for p in points})
    colors = matplotlib.colormaps['tab10']
    for index, method in enumerate(methods):
        color = colors(index % 10)
        curve = defaultdict(list)
        for p in points:
            if p.method == method and p.guidance == 'consistency':
                curve[p.omega_con].append(p.scores)
        omegas = sorted(curve)
        if omegas:
            means = np.array([np.mean(curve[w], axis=0) for w in omegas])
            axes.plot(means[:, 0], means[:, 1], marker='o', color=color, label=method)
            for w, (x, y) in zip(omegas, means):
                axes.annotate(f'{w:g}', (x, y), textcoords='offset points', xytext=(4, 4), fontsize=7)
        plain = np.array([p.scores for p in points if p.method == method and p.guidance == 'cfg'])
        if plain.size:
            axes.scatter(plain[:, 0], plain[:, 1], marker='D', color=color, label=f'{method} (plain CFG)')
    axes.set_xlabel('consistency score (surrogate)')
    axes.set_ylabel('prompt fidelity (surrogate)')
    axes.legend(fontsize=8)
    axes.grid(True, alpha=0.3)
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context({'svg.hashsalt': 'dcolab', 'svg.fonttype': 'none'}):
        figure.savefig(path, format='svg', metadata={'Date': None})
    return path


# -- report ---------------------------------------------------------------------

def pareto_report(points: Sequence[ParetoPoint], out_dir) -> Dict[str, object]:
    """Write pareto.csv, frontier.csv, dominance.csv, trend.csv and pareto.svg under ``out_dir``.

    Returns the dominance summary keyed by (method, other method).
    """
    points = list(points)
    guided = [p for p in points if p.guidance == 'consistency']
    per_method = defaultdict(list)
    for p in guided:
        per_method[p.method].append(p)
    if len(per_method) < 2:
        raise ReportError("a Pareto report needs at least two methods")
    small = sorted(m for m, group in per_method.items() if len(group) < 2)
    if small:
        raise ReportError(f"methods with fewer than two points: {small}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_pareto_csv(out_dir / 'pareto.csv', points)

    frontier_rows = []
    for method in sorted(per_method):
        for seed, group in sorted(_by_seed(per_method[method]).items()):
            for p in pareto_frontier(group):
                frontier_rows.append({'method': method, 'seed': seed, 'omega_con': p.omega_con,
                                      'consistency': p.consistency, 'prompt_fidelity': p.prompt_fidelity})
    write_rows(out_dir / 'frontier.csv', ('method', 'seed', 'omega_con', 'consistency', 'prompt_fidelity'),
                frontier_rows)

    summary, dominance_rows = {}, []
    for first, second in permutations(sorted(per_method), 2):
        fractions = _seed_fractions(per_method[first], per_method[second])
        value = float(np.mean(list(fractions.values())))
        low, high = bootstrap_interval(list(fractions.values()))
        summary[(first, second)] = {'fraction': value, 'ci_low': low, 'ci_high': high}
        dominance_rows.append({'method': first, 'other': second, 'fraction': value,
                               'ci_low': low, 'ci_high': high, 'seeds': len(fractions)})
    write_rows(out_dir / 'dominance.csv', ('method', 'other', 'fraction', 'ci_low', 'ci_high', 'seeds'),
                dominance_rows)
    write_rows(out_dir / 'trend.csv', TREND_COLUMNS, guidance_trend(points))
    plot_pareto(out_dir / 'pareto.svg', points)
    logger.info("wrote Pareto report for %d methods to %s", len(per_method), out_dir)
    return summary
