"""Analyses on a trained system: error/accuracy correlation, the component
ablation ladder, adaptation curves and a greedy local-search baseline.

This is the one place that reads test labels; inference results are scored
here after the fact.
"""

import csv
from dataclasses import dataclass, field, replace
import hashlib
import json
import math
from pathlib import Path

import numpy as np

from . import numerics as nx
from .heatmap import render_batch
from .inference import (
    AdaptConfig, AdaptationDiverged, decode_maps, distal_pck, merge_results, sai_run, sci_infer,
)
from .networks import feedback_error, gamma_forward, phi_forward
from .synth import baseline_pck
from .training import TrainConfig, TrainingDiverged, train_all

MIN_BATCHES = 30


def pearson(x, y):
    """Sample correlation coefficient, clipped to [-1, 1]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("pearson needs two equal-length 1-d samples of size >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    den = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if den == 0:
        raise ValueError("pearson undefined for a constant sample")
    return float(np.clip(float(dx @ dy) / den, -1.0, 1.0))


def config_digest(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.9g}" if isinstance(v, float) else v for v in r])


# -- correlation ----------------------------------------------------------------------

@dataclass
class CorrelationReport:
    points: list            # (batch mean |e_s|, batch distal PCK)
    r: float
    batches: int
    digest: str

    def write(self, out):
        write_csv(Path(out) / "correlation_points.csv", ["batch", "mean_es", "pck"],
                  [(i, e, p) for i, (e, p) in enumerate(self.points)])
        write_csv(Path(out) / "correlation.csv", ["batches", "pearson_r", "config_digest"],
                  [(self.batches, self.r, self.digest)])


def correlation_report(net, split, batch=64, n_batches=None, threads=None, min_batches=MIN_BATCHES):
    """Per-batch mean post-correction |e_s| against batch distal PCK."""
    total = len(split) // batch
    n_batches = total if n_batches is None else min(n_batches, total)
    if n_batches < min_batches:
        raise ValueError(f"{n_batches} batches of {batch}; need at least {min_batches}")
    sub = split.subset(np.arange(n_batches * batch))
    res = sci_infer(net, sub.unlabeled(), batch=batch, threads=threads)
    pts = []
    for b in range(n_batches):
        s = slice(b * batch, (b + 1) * batch)
        pts.append((float(res.norm_post[s].mean()),
                    distal_pck(res.corrected[s], sub.gt[s], sub.scale[s], net.schema)))
    e, p = zip(*pts)
    digest = config_digest({"batch": batch, "n_batches": n_batches, "net": net.digests()})
    return CorrelationReport(pts, pearson(e, p), n_batches, digest)


# -- ablation ---------------------------------------------------------------------------

LADDER = ("baseline", "correction", "feedback", "joint", "adaptive")


@dataclass
class AblationRow:
    variant: str
    pck: float
    delta: float            # vs the baseline row
    status: str = "ok"


def _sci_pck(net, split, threads=None):
    res = sci_infer(net, split.unlabeled(), threads=threads)
    return distal_pck(res.corrected, split.gt, split.scale, net.schema)


def run_ablation(dataset, cfg=TrainConfig(), adapt=AdaptConfig(), pretrained=None,
                 split="test", threads=None, out=None):
    """Five-row ladder on one split; one pretraining run is shared by rows 2-5.

    Returns (rows, {variant: trained net}). A failed sub-run marks its row
    (and the adaptive row, when the joint run fails) and the others proceed.
    """
    test = dataset.split(split)
    schema = dataset.schema
    base = baseline_pck(test, schema)
    if pretrained is None:
        pretrained, _, _ = train_all(dataset, cfg, pretrain_only=True,
                                     out=None if out is None else Path(out) / "pretrain")
    rows, nets = [AblationRow("baseline", base, 0.0)], {}
    for name, variant in zip(LADDER[1:4], ("zero_feedback", "frozen_gamma", "joint")):
        try:
            sub = None if out is None else Path(out) / variant
            net, _, _ = train_all(dataset, replace(cfg, variant=variant), out=sub, init=pretrained)
            nets[name] = net
            p = _sci_pck(net, test, threads)
            rows.append(AblationRow(name, p, p - base))
        except TrainingDiverged:
            rows.append(AblationRow(name, float("nan"), float("nan"), "failed"))
    if "joint" in nets:
        try:
            recs = sai_run(nets["joint"], test.unlabeled(), adapt, threads=threads)
            res = merge_results(recs)
            p = distal_pck(res.corrected, test.gt, test.scale, schema)
            rows.append(AblationRow("adaptive", p, p - base))
        except AdaptationDiverged:
            rows.append(AblationRow("adaptive", float("nan"), float("nan"), "failed"))
    else:
        rows.append(AblationRow("adaptive", float("nan"), float("nan"), "failed"))
    if out is not None:
        write_ablation(Path(out) / "ablation.csv", rows)
    return rows, nets


def write_ablation(path, rows):
    write_csv(path, ["variant", "pck", "delta", "status"],
              [(r.variant, r.pck, r.delta, r.status) for r in rows])


def ladder_monotone(rows):
    ok = [r.pck for r in rows if r.status == "ok"]
    return len(ok) == len(rows) and all(b >= a for a, b in zip(ok, ok[1:]))


# -- local search -----------------------------------------------------------------------

_MOVES = np.array([(dx, dy) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if dx or dy], float)


@dataclass
class LocalSearchResult:
    coords: np.ndarray      # (N, G, 2)
    trace: np.ndarray       # (T + 1,) mean |e_s| after t iterations
    norms: np.ndarray       # (N, G) final |e_s|
    gamma_calls: np.ndarray  # (N, G) Gamma evaluations per instance


def local_search_refine(net, heatmaps, iterations=5, sigma=2.0, batch=256):
    """Greedy 8-neighbour descent on the distal location, scored by |e_s|.

    Starts at the decoded (uncorrected) prediction; each iteration re-renders
    the distal map at the eight 1 px moves, keeps the best if it lowers
    |e_s| and stops an instance once no move helps. The correction net is
    not used.
    """
    heatmaps = np.asarray(heatmaps)
    n = len(heatmaps)
    size = heatmaps.shape[-2:]
    parts = []
    for s in range(0, n, batch):
        parts.append(_search(net, heatmaps[s:s + batch], iterations, sigma, size))
    coords = np.concatenate([p[0] for p in parts])
    norms = np.concatenate([p[2] for p in parts])
    calls = np.concatenate([p[3] for p in parts])
    trace = np.concatenate([p[1] for p in parts], axis=1).mean(axis=1)
    G = len(net.schema.groups)
    return LocalSearchResult(coords.reshape(n, G, 2), trace, norms.reshape(n, G),
                             calls.reshape(n, G))


def _search(net, maps, T, sigma, size):
    inp = net.schema.gather(maps)
    anchor, context = inp["anchor"], inp["context"]
    with nx.no_grad():
        pred = phi_forward(net, inp["proximals"]).data
    cur = decode_maps(pred, len(pred))[:, 0]
    # a map with no positive response starts from the frame centre
    cur = np.where(np.isnan(cur), (np.array(size[::-1]) - 1) / 2.0, cur)
    cur = np.clip(cur, 0, np.array(size[::-1]) - 1)

    def score(ix, pts):
        m = render_batch(pts, sigma, size)[:, None]
        with nx.no_grad():
            _, norm = feedback_error(anchor[ix], gamma_forward(net, context[ix], m))
        return norm.data.astype(np.float64)

    m = len(cur)
    best = score(np.arange(m), cur)
    calls = np.ones(m, np.int64)
    trace = [best.copy()]
    active = np.ones(m, bool)
    for _ in range(T):
        ids = np.flatnonzero(active)
        if len(ids) == 0:
            trace.append(best.copy())
            continue
        props = np.clip(cur[ids, None, :] + _MOVES[None], 0, np.array(size[::-1]) - 1)
        sc = score(np.repeat(ids, 8), props.reshape(-1, 2)).reshape(len(ids), 8)
        calls[ids] += 8
        k = np.argmin(sc, axis=1)
        top = sc[np.arange(len(ids)), k]
        better = top < best[ids]
        mv = ids[better]
        cur[mv] = props[better, k[better]]
        best[mv] = top[better]
        active[ids[~better]] = False
        trace.append(best.copy())
    return cur, np.array(trace), best, calls


# -- adaptation curves --------------------------------------------------------------------

@dataclass
class CurveReport:
    loss: np.ndarray        # (batches, E + 1)
    pck: np.ndarray         # (batches, E + 1)
    seconds: np.ndarray     # (batches, E)
    digests: list = field(default_factory=list)

    def table(self):
        """(epoch, mean loss, mean PCK) rows; epoch 0 is pure SCI."""
        return [(t, float(self.loss[:, t].mean()), float(self.pck[:, t].mean()))
                for t in range(self.loss.shape[1])]

    def batch_pass(self, ratio=0.8):
        """Per batch: final loss <= ratio * initial and final PCK >= initial."""
        return (self.loss[:, -1] <= ratio * self.loss[:, 0]) & (self.pck[:, -1] >= self.pck[:, 0])

    def write(self, out):
        out = Path(out)
        write_csv(out / "curves.csv", ["epoch", "loss", "pck"], self.table())
        write_csv(out / "curves_batches.csv", ["batch", "epoch", "loss", "pck"],
                  [(b, t, float(self.loss[b, t]), float(self.pck[b, t]))
                   for b in range(len(self.loss)) for t in range(self.loss.shape[1])])


def adaptation_curves(net, split, cfg=AdaptConfig(), n_batches=None, threads=None):
    """Per-batch SAI traces with PCK measured after every update."""
    n = len(split) if n_batches is None else min(len(split), n_batches * cfg.batch)
    sub = split.subset(np.arange(n))

    def diag(idx, coords):
        return distal_pck(coords, sub.gt[idx], sub.scale[idx], net.schema)

    recs = sai_run(net, sub.unlabeled(), cfg, threads=threads, diagnostics=diag)
    return CurveReport(np.array([r.trace.loss for r in recs]),
                       np.array([r.trace.pck for r in recs]),
                       np.array([r.trace.seconds for r in recs]).reshape(len(recs), -1),
                       [r.base_digest for r in recs])


# -- plots ------------------------------------------------------------------------------

def svg_plot(path, series, title="", xlabel="", ylabel="", scatter=False, size=(480, 320)):
    """Minimal static chart. ``series`` maps a label to (xs, ys)."""
    w, h = size
    pad = 48
    xs = np.concatenate([np.asarray(v[0], float) for v in series.values()])
    ys = np.concatenate([np.asarray(v[1], float) for v in series.values()])
    x0, x1 = xs.min(), xs.max() if xs.max() > xs.min() else xs.min() + 1
    y0, y1 = ys.min(), ys.max() if ys.max() > ys.min() else ys.min() + 1
    px = lambda x: pad + (x - x0) / (x1 - x0) * (w - 2 * pad)
    py = lambda y: h - pad - (y - y0) / (y1 - y0) * (h - 2 * pad)
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-size="11">',
           f'<rect width="{w}" height="{h}" fill="white"/>',
           f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>',
           f'<text x="{w / 2}" y="{pad / 2}" text-anchor="middle">{title}</text>',
           f'<text x="{w / 2}" y="{h - 10}" text-anchor="middle">{xlabel}</text>',
           f'<text x="12" y="{h / 2}" transform="rotate(-90 12 {h / 2})" text-anchor="middle">{ylabel}</text>',
           f'<text x="{pad}" y="{h - pad + 14}" text-anchor="middle">{x0:.3g}</text>',
           f'<text x="{w - pad}" y="{h - pad + 14}" text-anchor="middle">{x1:.3g}</text>',
           f'<text x="{pad - 4}" y="{h - pad}" text-anchor="end">{y0:.3g}</text>',
           f'<text x="{pad - 4}" y="{pad + 4}" text-anchor="end">{y1:.3g}</text>']
    for i, (label, (sx, sy)) in enumerate(series.items()):
        c = colors[i % len(colors)]
        pts = [(px(a), py(b)) for a, b in zip(np.asarray(sx, float), np.asarray(sy, float))]
        if scatter:
            out += [f'<circle cx="{a:.1f}" cy="{b:.1f}" r="2.5" fill="{c}"/>' for a, b in pts]
        else:
            d = " ".join(f"{a:.1f},{b:.1f}" for a, b in pts)
            out.append(f'<polyline points="{d}" fill="none" stroke="{c}"/>')
        out.append(f'<text x="{w - pad}" y="{pad + 14 * (i + 1)}" fill="{c}" text-anchor="end">{label}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
