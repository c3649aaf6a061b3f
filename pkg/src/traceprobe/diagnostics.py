"""Convergence diagnostics, posterior summaries, and structure extraction.

Histogram CSV layout: comment lines ``# kind=...``, ``# absent_mass=...``,
then ``class,mass`` rows (discrete) or ``bin_low,bin_high,mass`` rows
(continuous).  Series CSVs carry a one-line header naming their columns.
Graphs render to DOT with one node per raw address (instances collapsed) and
edge labels giving per-source transition frequencies.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .trace import Kind, Trace
from .values import Integer, Real


class LengthMismatch(ValueError):
    """Chains passed to a multi-chain diagnostic differ in length."""


# --- scalar-series diagnostics ----------------------------------------------


def gelman_rubin(chains) -> float:
    """Potential scale reduction over two or more equal-length scalar chains.

    With per-chain length n, within-chain variance W (mean of per-chain sample
    variances) and B = n * variance of the chain means:

        R-hat = sqrt(((n-1)/n) * W + B/n) / sqrt(W)

    Identical chains give exactly 1.  Zero within-chain variance with distinct
    means gives +inf.
    """
    arrays = [np.asarray(c, dtype=np.float64) for c in chains]
    if len(arrays) < 2:
        raise ValueError("gelman_rubin needs at least two chains")
    n = len(arrays[0])
    for c in arrays[1:]:
        if len(c) != n:
            raise LengthMismatch(f"chain lengths differ: {[len(c) for c in arrays]}")
    if n < 10:
        raise ValueError(f"chains must have length >= 10, got {n}")
    stacked = np.stack(arrays)
    w = float(np.mean(np.var(stacked, axis=1, ddof=1)))
    b = n * float(np.var(np.mean(stacked, axis=1), ddof=1))
    if w == 0.0:
        return 1.0 if b == 0.0 else math.inf
    return math.sqrt(((n - 1) / n) * w + b / n) / math.sqrt(w)


def autocorrelation(series, max_lag: int) -> np.ndarray:
    """Normalized autocorrelation at lags 0..max_lag by direct summation."""
    x = np.asarray(series, dtype=np.float64)
    n = len(x)
    if not 0 <= max_lag < n:
        raise ValueError(f"max_lag must lie in [0, {n - 1}], got {max_lag}")
    centered = x - x.mean()
    denom = float(np.dot(centered, centered))
    out = np.zeros(max_lag + 1)
    out[0] = 1.0
    # the explicit equality test catches constant series whose mean-residuals
    # are identical but nonzero in floating point
    if denom == 0.0 or bool(np.all(x == x[0])):
        return out  # constant series: unit lag-0, zero elsewhere
    for k in range(1, max_lag + 1):
        out[k] = float(np.dot(centered[:-k], centered[k:])) / denom
    return out


def ess_weighted(log_weights) -> float:
    """Kish effective sample size from unnormalized log weights."""
    lw = np.asarray(log_weights, dtype=np.float64)
    lw = lw[np.isfinite(lw)]
    if len(lw) == 0:
        return 0.0
    m = lw.max()
    w = np.exp(lw - m)
    return float(w.sum() ** 2 / np.dot(w, w))


def ess_chain(series) -> float:
    """Autocorrelation-time ESS with Geyer initial-positive truncation."""
    x = np.asarray(series, dtype=np.float64)
    n = len(x)
    if n < 4:
        return float(n)
    rho = autocorrelation(x, min(n - 2, n // 2))
    tau = 1.0
    for m in range(1, (len(rho) - 1) // 2 + 1):
        gamma = rho[2 * m - 1] + rho[2 * m]
        if gamma <= 0.0:
            break
        tau += 2.0 * gamma
    return float(min(n, max(1.0, n / tau)))


# --- marginals and distances ------------------------------------------------


@dataclass
class Marginal:
    """Weighted histogram of one (address, instance) across traces.

    ``masses`` sums to 1 - absent_mass; ``absent_mass`` is the normalized
    weight of traces that never reached the site.
    """

    kind: str  # "discrete" or "continuous"
    masses: np.ndarray
    absent_mass: float
    classes: int | None = None
    edges: np.ndarray | None = None

    def same_bins(self, other: "Marginal") -> bool:
        if self.kind != other.kind:
            return False
        if self.kind == "discrete":
            return self.classes == other.classes
        return (
            self.edges is not None
            and other.edges is not None
            and len(self.edges) == len(other.edges)
            and bool(np.allclose(self.edges, other.edges, rtol=0.0, atol=1e-12))
        )


def _entry_value_as_float(e) -> float:
    if isinstance(e.value, Real):
        return e.value.x
    if isinstance(e.value, Integer):
        return float(e.value.i)
    raise TypeError(f"marginal over non-scalar value {type(e.value).__name__}")


def marginal_histogram(
    traces,
    log_weights,
    address: str,
    instance: int = 1,
    bins: int = 40,
    classes: int | None = None,
    edges=None,
) -> Marginal:
    """Posterior marginal at a site, as a normalized weighted histogram.

    ``classes=K`` makes a discrete histogram over values 0..K-1; otherwise a
    continuous one over ``bins`` equal-width bins spanning the pooled value
    range (or explicit ``edges``).  Traces lacking the site contribute to
    ``absent_mass``.
    """
    traces = list(traces)
    lw = np.asarray(log_weights, dtype=np.float64)
    if len(lw) != len(traces):
        raise ValueError(f"{len(lw)} weights for {len(traces)} traces")
    if len(traces) == 0:
        raise ValueError("marginal of an empty posterior")
    finite = np.isfinite(lw)
    if not finite.any():
        raise ValueError("all posterior weights are zero")
    m = lw[finite].max()
    weights = np.where(finite, np.exp(np.clip(lw - m, -745.0, 0.0)), 0.0)
    weights = weights / weights.sum()

    values = []
    value_weights = []
    absent = 0.0
    for w, t in zip(weights, traces):
        entry = t.find(address, instance)
        if entry is None:
            absent += w
        else:
            values.append(_entry_value_as_float(entry))
            value_weights.append(w)
    values_arr = np.asarray(values)
    vw = np.asarray(value_weights)

    if classes is not None:
        masses = np.zeros(classes)
        for v, w in zip(values_arr, vw):
            k = int(v)
            if 0 <= k < classes:
                masses[k] += w
        return Marginal("discrete", masses, absent, classes=classes)

    if edges is None:
        if len(values_arr) == 0:
            edges = np.linspace(0.0, 1.0, bins + 1)
        else:
            lo, hi = float(values_arr.min()), float(values_arr.max())
            if lo == hi:
                lo, hi = lo - 0.5, hi + 0.5
            edges = np.linspace(lo, hi, bins + 1)
    else:
        edges = np.asarray(edges, dtype=np.float64)
    masses, _ = np.histogram(values_arr, bins=edges, weights=vw)
    return Marginal("continuous", masses, absent, edges=edges)


def tv_distance(h1: Marginal, h2: Marginal) -> float:
    """Total variation distance between same-bin marginals, in [0, 1]."""
    if not h1.same_bins(h2):
        raise ValueError("histograms must share identical bins or classes")
    core = 0.5 * float(np.abs(h1.masses - h2.masses).sum())
    return core + 0.5 * abs(h1.absent_mass - h2.absent_mass)


# --- execution-structure graphs ---------------------------------------------

_CATEGORY_COLOR = {
    "controlled": "red",
    "replaced": "green",
    "observed": "blue",
    "uncontrolled": "yellow",
    "mixed": "gray",
}


@dataclass
class GraphNode:
    address: str
    id: str
    categories: set

    @property
    def category(self) -> str:
        return next(iter(self.categories)) if len(self.categories) == 1 else "mixed"


@dataclass
class TraceGraph:
    nodes: list[GraphNode]
    edge_counts: dict[tuple[str, str], int]

    def edge_frequencies(self) -> dict[tuple[str, str], float]:
        """Transition frequencies normalized per source node."""
        totals: dict[str, int] = {}
        for (src, _), c in self.edge_counts.items():
            totals[src] = totals.get(src, 0) + c
        return {
            (src, dst): c / totals[src] for (src, dst), c in self.edge_counts.items()
        }


def _entry_category(e) -> str:
    if e.kind == Kind.OBSERVED:
        return "observed"
    if e.replaced:
        return "replaced"
    if e.controlled:
        return "controlled"
    return "uncontrolled"


def extract_graph(traces) -> TraceGraph:
    """Aggregate execution structure: one node per raw address (instances
    collapsed), directed edges between consecutively executed addresses."""
    order: list[str] = []
    categories: dict[str, set] = {}
    edge_counts: dict[tuple[str, str], int] = {}
    for t in traces:
        prev = None
        for e in t.entries:
            addr = e.address
            if addr not in categories:
                categories[addr] = set()
                order.append(addr)
            categories[addr].add(_entry_category(e))
            if prev is not None:
                key = (prev, addr)
                edge_counts[key] = edge_counts.get(key, 0) + 1
            prev = addr
    nodes = [
        GraphNode(addr, f"A{i + 1}", categories[addr]) for i, addr in enumerate(order)
    ]
    return TraceGraph(nodes, edge_counts)


def graph_to_dot(graph: TraceGraph) -> str:
    """Render to DOT; nodes are colored by category, edges labeled with
    per-source frequencies."""
    lines = ["digraph execution {", "  rankdir=LR;"]
    id_of = {n.address: n.id for n in graph.nodes}
    for n in graph.nodes:
        color = _CATEGORY_COLOR[n.category]
        label = f"{n.id}\\n{_dot_escape(n.address)}"
        lines.append(
            f'  "{n.id}" [label="{label}", style=filled, fillcolor={color}, '
            f'category={n.category}];'
        )
    freqs = graph.edge_frequencies()
    for (src, dst), freq in sorted(freqs.items(), key=lambda kv: (id_of[kv[0][0]], id_of[kv[0][1]])):
        lines.append(f'  "{id_of[src]}" -> "{id_of[dst]}" [label="{freq:.3f}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def _dot_escape(s: str) -> str:
    return s.replace("\\", "\\\\").replace('"', '\\"')


# --- CSV output -------------------------------------------------------------


def write_series_csv(path, header: str, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(_csv_cell(x) for x in row) + "\n")


def _csv_cell(x) -> str:
    # plain-float repr round-trips exactly and avoids numpy's np.float64(...)
    if isinstance(x, float):
        return repr(float(x))
    return str(x)


def write_marginal_csv(path, m: Marginal) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# kind={m.kind}\n")
        fh.write(f"# absent_mass={float(m.absent_mass)!r}\n")
        if m.kind == "discrete":
            fh.write("class,mass\n")
            for k, mass in enumerate(m.masses):
                fh.write(f"{k},{float(mass)!r}\n")
        else:
            fh.write("bin_low,bin_high,mass\n")
            for k, mass in enumerate(m.masses):
                fh.write(
                    f"{float(m.edges[k])!r},{float(m.edges[k + 1])!r},{float(mass)!r}\n"
                )


def read_marginal_csv(path) -> Marginal:
    kind = None
    absent = 0.0
    masses = []
    lows = []
    highs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                if key.strip() == "kind":
                    kind = val.strip()
                elif key.strip() == "absent_mass":
                    absent = float(val)
                continue
            if line[0].isalpha():  # header row
                continue
            cells = line.split(",")
            if kind == "discrete":
                masses.append(float(cells[1]))
            else:
                lows.append(float(cells[0]))
                highs.append(float(cells[1]))
                masses.append(float(cells[2]))
    if kind == "discrete":
        return Marginal("discrete", np.asarray(masses), absent, classes=len(masses))
    edges = np.asarray(lows + highs[-1:]) if lows else np.asarray([0.0, 1.0])
    return Marginal("continuous", np.asarray(masses), absent, edges=edges)
