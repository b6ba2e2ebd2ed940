"""Optimized Layer Ensembles: evaluate a sample set sharing common prefixes.

Samples are sorted lexicographically and folded into a prefix trie. A
depth-first walk of the trie runs every distinct layer prefix exactly once and
drops each activation as soon as its subtree is done, so at most one
activation per depth (plus the input) is alive at any time.
"""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .ensemble import LayerEnsembleModel, check_sample_set
from .nn import as_tensor


@dataclass
class PlanNode:
    depth: int  # 1..N, 0 for the virtual root
    option: int
    children: list["PlanNode"] = field(default_factory=list)
    leaf_of: int | None = None  # position in the sorted sample list


@dataclass
class ExecutionPlan:
    root: PlanNode
    samples: list[tuple]  # sorted
    N: int
    node_count: int

    @property
    def layer_execs(self) -> int:
        return self.node_count

    @property
    def naive_execs(self) -> int:
        return len(self.samples) * self.N

    def render(self) -> str:
        """Depth-indented ``d:q`` lines, one per trie node."""
        lines = []

        def visit(node):
            for child in node.children:
                lines.append("  " * (child.depth - 1) + f"{child.depth}:{child.option}")
                visit(child)

        visit(self.root)
        return "\n".join(lines)


@dataclass
class ExecStats:
    layer_execs: int
    naive_execs: int
    peak_live_activations: int
    naive_peak_live_activations: int = 0
    peak_live_bytes: int = 0
    naive_peak_live_bytes: int = 0
    wall_ms_ole: float | None = None
    wall_ms_naive: float | None = None

    @property
    def speedup_execs(self) -> float:
        return self.naive_execs / self.layer_execs

    @property
    def speedup_wall(self) -> float | None:
        if not self.wall_ms_ole or self.wall_ms_naive is None:
            return None
        return self.wall_ms_naive / self.wall_ms_ole


class _Tracker:
    """Counts layer applications and simultaneously-live activations."""

    def __init__(self):
        self.execs = 0
        self.live = 0
        self.peak = 0
        self.live_bytes = 0
        self.peak_bytes = 0

    def hold(self, a: np.ndarray):
        self.live += 1
        self.live_bytes += a.nbytes
        self.peak = max(self.peak, self.live)
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)

    def release(self, a: np.ndarray):
        self.live -= 1
        self.live_bytes -= a.nbytes


def sort_samples(samples) -> list[tuple]:
    """Lexicographic ascending order: first index first, later ones break ties."""
    return sorted(tuple(int(q) for q in s) for s in samples)


def build_plan(samples) -> ExecutionPlan:
    """Fold sorted samples into a prefix trie."""
    ordered = sort_samples(samples)
    if not ordered:
        raise ValueError("sample set is empty")
    N = len(ordered[0])
    if any(len(s) != N for s in ordered):
        raise ValueError("samples have inconsistent lengths")
    root = PlanNode(0, -1)
    count = 0
    for t, s in enumerate(ordered):
        node = root
        for d, q in enumerate(s, start=1):
            # Sorted input: a shared prefix is always the most recent child.
            if node.children and node.children[-1].option == q:
                node = node.children[-1]
            else:
                child = PlanNode(d, q)
                node.children.append(child)
                node = child
                count += 1
        if node.leaf_of is not None:
            raise ValueError(f"duplicate sample {s}")
        node.leaf_of = t
    return ExecutionPlan(root, ordered, N, count)


def _walk(model, plan: ExecutionPlan, x, prior: bool, tracker: _Tracker) -> list:
    out = [None] * len(plan.samples)

    def visit(node, h):
        for child in node.children:
            a = model.apply_layer(child.depth - 1, child.option, h, prior=prior)
            tracker.execs += 1
            tracker.hold(a)
            if child.leaf_of is not None:
                out[child.leaf_of] = a
            visit(child, a)
            tracker.release(a)

    tracker.hold(x)
    visit(plan.root, x)
    tracker.release(x)
    return out


def ole_eval(model: LayerEnsembleModel, samples, x, plan: ExecutionPlan | None = None,
             stats: dict | None = None) -> list[np.ndarray]:
    """Outputs of every sample, in sorted-sample order, via the prefix trie.

    Pass ``stats`` (a dict) to receive ``layer_execs`` (per network) and peak
    live activation counts.
    """
    if plan is None:
        plan = build_plan(check_sample_set(model, samples))
    x = as_tensor(x)
    tracker = _Tracker()
    trained = _walk(model, plan, x, False, tracker)
    execs = tracker.execs
    if model.prior_scale != 0.0:
        prior_tracker = _Tracker()
        priors = _walk(model, plan, x, True, prior_tracker)
        tracker.peak = max(tracker.peak, prior_tracker.peak)
        tracker.peak_bytes = max(tracker.peak_bytes, prior_tracker.peak_bytes)
        trained = [model.combine(h, p) for h, p in zip(trained, priors)]
    if stats is not None:
        stats.update(layer_execs=execs, peak_live_activations=tracker.peak,
                     peak_live_bytes=tracker.peak_bytes)
    return trained


def ole_recursive(model: LayerEnsembleModel, samples, x, prior: bool = False, counter=None):
    """Direct recursive form without an explicit trie.

    Groups the sorted samples by their option at the current layer, runs that
    option once per group and recurses on the group's suffixes. Returns the
    (trained or prior) network outputs in sorted order.
    """
    ordered = sort_samples(check_sample_set(model, samples))
    x = as_tensor(x)

    def recurse(suffixes, i, h):
        if i == model.N:
            return [h]
        result = []
        current = suffixes[0][0]
        act = model.apply_layer(i, current, h, prior=prior)
        if counter is not None:
            counter[0] += 1
        group = []
        for s in suffixes:
            if s[0] != current:
                result += recurse(group, i + 1, act)
                current = s[0]
                act = model.apply_layer(i, current, h, prior=prior)
                if counter is not None:
                    counter[0] += 1
                group = []
            group.append(s[1:])
        result += recurse(group, i + 1, act)
        return result

    return recurse(ordered, 0, x)


def naive_eval(model: LayerEnsembleModel, samples, x, stats: dict | None = None) -> list[np.ndarray]:
    """Every sample evaluated independently, all samples advanced layer by layer.

    This is the no-sharing reference: J*N layer applications and J live
    activations at every depth. Output order matches :func:`ole_eval`.
    """
    ordered = sort_samples(check_sample_set(model, samples))
    x = as_tensor(x)
    peak = 0
    peak_bytes = 0

    def run(prior):
        nonlocal peak, peak_bytes
        acts = [x] * len(ordered)
        for i in range(model.N):
            acts = [model.apply_layer(i, s[i], a, prior=prior) for s, a in zip(ordered, acts)]
            # The input stays referenced alongside the per-sample activations.
            peak = max(peak, len(acts) + 1)
            peak_bytes = max(peak_bytes, sum(a.nbytes for a in acts) + x.nbytes)
        return acts

    trained = run(False)
    if model.prior_scale != 0.0:
        priors = run(True)
        trained = [model.combine(h, p) for h, p in zip(trained, priors)]
    if stats is not None:
        stats.update(layer_execs=len(ordered) * model.N, peak_live_activations=peak,
                     peak_live_bytes=peak_bytes)
    return trained


def streaming_eval(model: LayerEnsembleModel, samples, x, prior: bool = False):
    """Evaluate samples in the given order, reusing only the previous sample's path.

    Returns ``(outputs, layer_execs)``. In sorted order the exec count equals
    the trie node count; any other order can only do more work.
    """
    samples = check_sample_set(model, samples)
    x = as_tensor(x)
    path: list[np.ndarray] = []
    prev: tuple = ()
    execs = 0
    outputs = []
    for s in samples:
        common = 0
        while common < len(prev) and prev[common] == s[common]:
            common += 1
        del path[common:]
        h = path[-1] if path else x
        for i in range(common, model.N):
            h = model.apply_layer(i, s[i], h, prior=prior)
            path.append(h)
            execs += 1
        outputs.append(path[-1])
        prev = s
    return outputs, execs


def measure(model: LayerEnsembleModel, samples, x, repetitions: int = 5, timing: bool = True) -> ExecStats:
    """Exec counts, peak live activations and median wall-clock for both evaluators.

    Wall-clock covers plan construction. One warm-up call precedes timing.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    samples = check_sample_set(model, samples)
    x = as_tensor(x)
    ole_stats: dict = {}
    naive_stats: dict = {}
    ole_eval(model, samples, x, stats=ole_stats)
    naive_eval(model, samples, x, stats=naive_stats)
    result = ExecStats(
        layer_execs=ole_stats["layer_execs"],
        naive_execs=naive_stats["layer_execs"],
        peak_live_activations=ole_stats["peak_live_activations"],
        naive_peak_live_activations=naive_stats["peak_live_activations"],
        peak_live_bytes=ole_stats["peak_live_bytes"],
        naive_peak_live_bytes=naive_stats["peak_live_bytes"],
    )
    if timing:
        result.wall_ms_ole = _median_ms(lambda: ole_eval(model, samples, x), repetitions)
        result.wall_ms_naive = _median_ms(lambda: naive_eval(model, samples, x), repetitions)
    return result


def _median_ms(fn, repetitions: int) -> float:
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)
