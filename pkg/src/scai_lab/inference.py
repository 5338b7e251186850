"""Single correction pass and per-batch test-time adaptation of the correction net.

Nothing in this module reads ground truth. Adaptation can report PCK per
epoch, but only through an explicit ``diagnostics`` callback supplied by the
caller; its value never reaches a gradient.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import os
import time

import numpy as np

from . import numerics as nx
from .heatmap import decode_batch, pck
from .networks import c_forward, feedback_error, gamma_forward, params_hash, phi_forward, pipeline


@dataclass(frozen=True)
class AdaptConfig:
    epochs: int = 10
    lr: float = 1e-4
    batch: int = 64
    restore: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch <= 0 or self.lr <= 0:
            raise ValueError("batch and lr must be positive")


@dataclass
class AdaptTrace:
    """``loss[t]`` / ``pck[t]`` are measured after t updates; index 0 is pure SCI.

    ``seconds`` has one entry per update, so ``len(seconds) == epochs``.
    """
    loss: list = field(default_factory=list)
    pck: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    @property
    def epochs(self):
        return len(self.seconds)


@dataclass
class InferenceResult:
    pred: np.ndarray        # (N, G, 2) decoded uncorrected distal coords
    corrected: np.ndarray   # (N, G, 2) decoded corrected distal coords
    norm_pre: np.ndarray    # (N, G) |e_s| from the uncorrected prediction
    norm_post: np.ndarray   # (N, G) |e_s| after correction


def resolve_threads(threads=None):
    if threads is None:
        threads = int(os.environ.get("SCAI_LAB_THREADS", "1"))
    return max(1, int(threads))


def decode_maps(maps, n):
    """Decode (n * G, 1, H, W) maps to (n, G, 2); negative values are clamped first."""
    m = np.maximum(np.asarray(maps)[:, 0], 0)
    coords, _ = decode_batch(m)
    return coords.reshape(n, -1, 2)


def distal_pck(coords, gt, scale, schema, tau=0.1):
    """PCK of (N, G, 2) group-distal coords against (N, K, 2) ground truth."""
    return pck(coords, np.asarray(gt)[:, schema.distal_ids], np.asarray(scale)[:, None], tau)


def _batches(n, size):
    return [np.arange(s, min(s + size, n)) for s in range(0, n, size)]


def _sci_batch(net, heatmaps):
    n = len(heatmaps)
    inputs = net.schema.gather(heatmaps)
    with nx.no_grad():
        out = pipeline(net, inputs)
    return InferenceResult(
        decode_maps(out["pred"].data, n), decode_maps(out["corrected"].data, n),
        out["norm_pre"].data.reshape(n, -1).astype(np.float64),
        out["norm_post"].data.reshape(n, -1).astype(np.float64))


def _concat(results):
    return InferenceResult(*(np.concatenate([getattr(r, f) for r in results])
                             for f in ("pred", "corrected", "norm_pre", "norm_post")))


def sci_infer(net, data, batch=256, threads=None):
    """Single-pass correction over an unlabeled view (anything with ``heatmaps``)."""
    maps = data.heatmaps
    if maps.shape[1] != net.schema.K:
        raise ValueError(f"data has {maps.shape[1]} keypoints, network schema has {net.schema.K}")
    idx = _batches(len(maps), batch)
    with ThreadPoolExecutor(resolve_threads(threads)) as ex:
        parts = list(ex.map(lambda i: _sci_batch(net, maps[i]), idx))
    return _concat(parts)


class AdaptationDiverged(RuntimeError):
    pass


def sai_adapt(net, heatmaps, cfg=AdaptConfig(), diagnostics=None):
    """Tune a private copy of the correction net on one unlabeled batch.

    Minimises the batch mean of the post-correction |e_s| with a fresh Adam
    state; ``net`` itself is never modified, so every call starts from the
    same restored weights. ``diagnostics(coords) -> float`` is evaluated on the
    corrected coords after every update when given.

    Returns (adapted corr net, AdaptTrace, InferenceResult after adaptation).
    """
    heatmaps = np.asarray(heatmaps)
    n = len(heatmaps)
    if n == 0:
        raise ValueError("empty adaptation batch")
    inputs = net.schema.gather(heatmaps)
    anchor, context = inputs["anchor"], inputs["context"]
    with nx.no_grad():
        pred = phi_forward(net, inputs["proximals"]).data
        e_pre, norm_pre = feedback_error(anchor, gamma_forward(net, context, pred))
    e_pre, norm_pre = e_pre.data, norm_pre.data.astype(np.float64)

    corr = net.corr.copy()
    params = {p.name: p for p in corr.params}
    state = nx.AdamState(lr=cfg.lr)
    trace = AdaptTrace()
    view = _View(net, corr)

    def forward():
        delta, corrected = c_forward(view, pred, e_pre)
        recon = gamma_forward(net, context, corrected)
        _, norms = feedback_error(anchor, recon)
        return corrected, norms, nx.mean(norms)

    for t in range(cfg.epochs + 1):
        t0 = time.perf_counter()
        with nx.Tape() as tape:
            corrected, norms, loss = forward()
            if t < cfg.epochs:
                g = nx.grad(loss, corr.params)
        value = float(loss.data)
        if not np.isfinite(value):
            raise AdaptationDiverged(f"adaptation loss became {value} at epoch {t}")
        trace.loss.append(value)
        coords = decode_maps(corrected.data, n)
        if diagnostics is not None:
            trace.pck.append(diagnostics(coords))
        if t < cfg.epochs:
            nx.adam_step(params, g, state)
            trace.seconds.append(time.perf_counter() - t0)
        del tape
    result = InferenceResult(decode_maps(pred, n), coords, norm_pre.reshape(n, -1),
                             norms.data.reshape(n, -1).astype(np.float64))
    return corr, trace, result


class _View:
    """Network triple with the correction net swapped for an adapted copy."""

    def __init__(self, net, corr):
        self.phi, self.gamma, self.corr = net.phi, net.gamma, corr


def net_digest(net):
    """Hash over all three networks' parameters."""
    state = {}
    for role in ("phi", "gamma", "corr"):
        state.update(getattr(net, role).state())
    return params_hash(state)


@dataclass
class BatchRecord:
    batch: int
    base_digest: str
    trace: AdaptTrace
    result: InferenceResult


def sai_run(net, data, cfg=AdaptConfig(), threads=None, diagnostics=None, order=None):
    """Adapt batch by batch over ``data.heatmaps``; returns BatchRecords in batch order.

    With ``cfg.restore`` every batch starts from the checkpoint weights (and
    batches may run concurrently). Without it the adapted correction net is
    carried into the next batch, which forces serial execution.
    ``diagnostics(batch_index, coords)`` is forwarded per batch.
    """
    idx = _batches(len(data.heatmaps), cfg.batch)
    order = list(range(len(idx))) if order is None else list(order)

    def diag_for(b):
        if diagnostics is None:
            return None
        return lambda coords: diagnostics(idx[b], coords)

    def one(b, current):
        digest = net_digest(current)
        corr, trace, res = sai_adapt(current, data.heatmaps[idx[b]], cfg, diag_for(b))
        return BatchRecord(b, digest, trace, res), corr

    if cfg.restore:
        with ThreadPoolExecutor(resolve_threads(threads)) as ex:
            recs = list(ex.map(lambda b: one(b, net)[0], order))
    else:
        recs, current = [], net.copy()
        for b in order:
            rec, corr = one(b, current)
            current.corr = corr
            recs.append(rec)
    return sorted(recs, key=lambda r: r.batch)


def merge_results(records):
    return _concat([r.result for r in sorted(records, key=lambda r: r.batch)])
