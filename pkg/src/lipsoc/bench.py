"""Exact-vs-fast weight-gradient benchmark.

Two measurements per configuration:

* per SOC layer: forward, input gradient, exact weight gradient (the
  ``k - 1`` patch accumulations) and fast weight gradient (one accumulation);
* per training step of a LipConvnet whose conv-layer count is the requested
  depth, once with exact and once with fast SOC gradients.  The two variants
  are interleaved rep by rep so slow drift hits both equally.

Statistics are medians and interquartile ranges over the timed reps; every
summary number can be recomputed from the raw per-rep log.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .network import LipConvnetConfig, build_lipconvnet
from .soc import SocLayer, skew_filter_grad
from .train import robust_loss

MIN_REPS = 30
MIN_WARMUP = 5
COMPONENTS = ("forward", "input_grad", "weight_grad_exact", "weight_grad_fast", "step_exact", "step_fast")


@dataclass
class Stats:
    median: float
    iqr: float

    @classmethod
    def of(cls, samples) -> "Stats":
        q1, med, q3 = np.percentile(np.asarray(samples, dtype=np.float64), [25, 50, 75])
        return cls(float(med), float(q3 - q1))


@dataclass
class BenchResult:
    depth: int
    channels: int
    k: int
    batch: int
    stats: dict[str, Stats] = field(default_factory=dict)
    note: str = ""

    @property
    def config_id(self) -> str:
        return f"L{self.depth}-c{self.channels}-k{self.k}-b{self.batch}"

    @property
    def reduction(self) -> float:
        """``(exact - fast) / exact`` of the median step times (NaN if not timed)."""
        if "step_exact" not in self.stats:
            return math.nan
        e, f = self.stats["step_exact"].median, self.stats["step_fast"].median
        return (e - f) / e


@dataclass
class RawSample:
    config_id: str
    component: str
    rep: int
    seconds: float


def _check_reps(reps: int, warmup: int) -> None:
    if reps < MIN_REPS:
        raise ValueError(f"reps must be >= {MIN_REPS} for stable medians, got {reps}")
    if warmup < MIN_WARMUP:
        raise ValueError(f"warmup must be >= {MIN_WARMUP}, got {warmup}")


def _timed(fn) -> float:
    start = time.perf_counter()
    fn()
    return time.perf_counter() - start


def depth_to_n(depth: int) -> int:
    """Conv-layer count ``n + 1`` -> network depth ``n``."""
    if depth < 6 or (depth - 1) % 5:
        raise ValueError(f"conv-layer count must be 1 + a multiple of 5 (6, 11, 16, ...), got {depth}")
    return depth - 1


def time_soc_layer(channels: int, spatial: int, k: int, batch: int, reps: int, warmup: int,
                   seed: int = 0) -> dict[str, list[float]]:
    """Per-rep seconds for the four per-layer components."""
    rng = np.random.default_rng(seed)
    # small weights keep high powers of A finite; values do not affect timing
    layer = SocLayer(0.05 * rng.standard_normal((channels, channels, 3, 3)), k_train=k, k_eval=k)
    x = rng.standard_normal((batch, channels, spatial, spatial))
    g = rng.standard_normal(x.shape)
    out = {c: [] for c in COMPONENTS[:4]}

    def exact_accumulations():
        us, w = layer.cache.us, g
        grad = np.zeros_like(layer.operator)
        for l in range(1, k):
            grad += layer._accumulate(us[l] / math.factorial(l), w)
            w = -layer.apply_operator(w)
        return skew_filter_grad(grad)

    for rep in range(warmup + reps):
        t = {
            "forward": _timed(lambda: layer.forward(x, k, train=True, keep_all=True)),
            "input_grad": _timed(lambda: layer.input_grad(g, k)),
            "weight_grad_exact": _timed(exact_accumulations),
            "weight_grad_fast": _timed(layer.weight_grad_fast),
        }
        if rep >= warmup:
            for c, s in t.items():
                out[c].append(s)
    return out


def time_network_steps(depth: int, channels: int, k: int, batch: int, reps: int, warmup: int,
                       seed: int = 0, spatial: int = 32, blocks: int = 5) -> dict[str, list[float]]:
    cfg = LipConvnetConfig(depth=depth_to_n(depth), base_channels=channels, blocks=blocks,
                           in_shape=(3, spatial, spatial), classes=10, k_train=k, k_eval=k)
    net = build_lipconvnet(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(batch,) + cfg.in_shape)
    labels = np.arange(batch) % cfg.classes
    out = {"step_exact": [], "step_fast": []}

    def step(exact):
        net.set_exact_grad(exact)
        return _timed(lambda: robust_loss(net, x, labels, rho=36 / 255, gamma=0.0))

    for rep in range(warmup + reps):
        e, f = step(True), step(False)
        if rep >= warmup:
            out["step_exact"].append(e)
            out["step_fast"].append(f)
    return out


def bench_grad(depths, ks, reps: int = MIN_REPS, warmup: int = MIN_WARMUP, channels: int = 4,
               batch: int = 8, spatial: int = 32, seed: int = 0, network: bool = True,
               log=None) -> tuple[list[BenchResult], list[RawSample]]:
    """Benchmark every (depth, k).  The per-layer numbers use the base-channel
    SOC layer at full resolution; they do not depend on depth and are timed
    once per k."""
    _check_reps(reps, warmup)
    results, raw = [], []
    layer_cache: dict[int, dict[str, list[float]]] = {}
    for k in ks:
        for depth in depths:
            res = BenchResult(depth, channels, k, batch)
            try:
                depth_to_n(depth)
                if k not in layer_cache:
                    layer_cache[k] = time_soc_layer(channels, spatial, k, batch, reps, warmup, seed)
                samples = dict(layer_cache[k])
                if network:
                    samples.update(time_network_steps(depth, channels, k, batch, reps, warmup, seed, spatial))
            except MemoryError as exc:
                res.note = f"skipped: {exc}"
                results.append(res)
                continue
            for comp, vals in samples.items():
                res.stats[comp] = Stats.of(vals)
                raw.extend(RawSample(res.config_id, comp, i, v) for i, v in enumerate(vals))
            results.append(res)
            if log is not None:
                log(res)
    return results, raw


def fit_slope(ks, seconds) -> float:
    """Least-squares slope of ``seconds`` against ``k``."""
    ks = np.asarray(ks, dtype=np.float64)
    if len(ks) < 2:
        raise ValueError("need at least two k values to fit a slope")
    return float(np.polyfit(ks, np.asarray(seconds, dtype=np.float64), 1)[0])


def slope_ratio(results: list[BenchResult]) -> tuple[float, float, float]:
    """(fast slope, exact slope, ratio) of the per-layer weight-gradient medians vs k."""
    by_k = {}
    for r in results:
        if r.stats:
            by_k.setdefault(r.k, r)
    ks = sorted(by_k)
    fast = fit_slope(ks, [by_k[k].stats["weight_grad_fast"].median for k in ks])
    exact = fit_slope(ks, [by_k[k].stats["weight_grad_exact"].median for k in ks])
    return fast, exact, fast / exact


def summarize_raw(raw: list[RawSample]) -> dict[tuple[str, str], Stats]:
    groups: dict[tuple[str, str], list[float]] = {}
    for s in raw:
        groups.setdefault((s.config_id, s.component), []).append(s.seconds)
    return {key: Stats.of(v) for key, v in groups.items()}


# -- emission ---------------------------------------------------------------

def results_csv(results: list[BenchResult], manifest_id: str) -> str:
    head = ["config_id", "depth", "channels", "k", "batch"]
    for c in COMPONENTS:
        head += [f"{c}_median", f"{c}_iqr"]
    lines = [f"# manifest={manifest_id}", ",".join(head + ["reduction", "note"])]
    for r in results:
        row = [r.config_id, str(r.depth), str(r.channels), str(r.k), str(r.batch)]
        for c in COMPONENTS:
            st = r.stats.get(c)
            row += [f"{st.median:.9e}", f"{st.iqr:.9e}"] if st else ["", ""]
        row += ["" if math.isnan(r.reduction) else f"{r.reduction:.6f}", r.note.replace(",", ";")]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def raw_csv(raw: list[RawSample], manifest_id: str) -> str:
    lines = [f"# manifest={manifest_id}", "config_id,component,rep,seconds"]
    lines += [f"{s.config_id},{s.component},{s.rep},{s.seconds:.9e}" for s in raw]
    return "\n".join(lines) + "\n"


def results_markdown(results: list[BenchResult], manifest_id: str) -> str:
    lines = [f"Manifest `{manifest_id}`", "",
             "| Conv layers | k | Exact gradient (s/step) | Fast gradient (s/step) | Reduction |",
             "|---|---|---|---|---|"]
    for r in results:
        if "step_exact" not in r.stats:
            lines.append(f"| {r.depth} | {r.k} | - | - | {r.note or 'not timed'} |")
            continue
        e, f = r.stats["step_exact"].median, r.stats["step_fast"].median
        lines.append(f"| {r.depth} | {r.k} | {e:.4f} | {f:.4f} | {-100 * r.reduction:.2f}% |")
    lines += ["", "| k | Weight grad exact (ms/layer) | Weight grad fast (ms/layer) |", "|---|---|---|"]
    seen = set()
    for r in results:
        if r.k in seen or not r.stats:
            continue
        seen.add(r.k)
        lines.append(f"| {r.k} | {1e3 * r.stats['weight_grad_exact'].median:.3f} "
                     f"| {1e3 * r.stats['weight_grad_fast'].median:.3f} |")
    return "\n".join(lines) + "\n"
