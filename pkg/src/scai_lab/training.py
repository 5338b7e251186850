"""Losses and the three-stage training protocol.

Stages: pretrain phi on (A, B, C) -> D, pretrain gamma on (B, C, D*) -> A,
then train the correction net (and, for the full variant, gamma) with phi
frozen. Inputs are detector heatmaps; targets are ground-truth renders.
"""

import csv
from dataclasses import asdict, dataclass, field, replace
import json
from pathlib import Path

import numpy as np

from . import numerics as nx
from .heatmap import render_batch
from .inference import decode_maps, distal_pck
from .networks import NetSpec, SCAINet, gamma_forward, load_checkpoint, pipeline, save_checkpoint
from .numerics import ShapeError

VARIANTS = ("zero_feedback", "frozen_gamma", "joint")
STAGES = ("phi", "gamma", "corr")


@dataclass(frozen=True)
class LossWeights:
    a: float = 0.85
    b: float = 0.65
    lam: float = 0.45

    def __post_init__(self):
        if min(self.a, self.b, self.lam) < 0 or not all(np.isfinite([self.a, self.b, self.lam])):
            raise ValueError(f"loss weights must be finite and non-negative: {self}")


@dataclass(frozen=True)
class TrainConfig:
    epochs_phi: int = 10
    epochs_gamma: int = 10
    epochs_joint: int = 3
    batch: int = 16             # samples per step; each contributes one instance per group
    lr_pretrain: float = 1e-3
    lr_joint: float = 1e-3
    seed: int = 0
    weights: LossWeights = LossWeights()
    net: NetSpec = NetSpec()
    variant: str = "joint"
    train_limit: int = 0        # 0 = whole split
    val_limit: int = 256        # val samples scored after each epoch

    def __post_init__(self):
        for k in ("epochs_phi", "epochs_gamma", "epochs_joint", "batch"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        if "net" in d:
            d["net"] = NetSpec(**d["net"])
        return cls(**d)


# -- losses -------------------------------------------------------------------------

def _norm_loss(x, target, kind):
    x, target = nx.constant(x), nx.constant(target)
    if x.shape != target.shape:
        raise ShapeError(f"{kind}: {x.shape} vs {target.shape}")
    if x.data.ndim < 2:
        return nx.l2norm(nx.sub(x, target))
    return nx.mean(nx.l2norm(nx.sub(x, target), batched=True))


def loss_prediction(pred, target):
    """|pred - target|_2 per instance, averaged over the leading axis."""
    return _norm_loss(pred, target, "loss_prediction")


def loss_feedback(recon, anchor_target):
    return _norm_loss(recon, anchor_target, "loss_feedback")


def loss_correction(corrected, distal_target, recon, recon_pre, anchor_target, w=LossWeights()):
    """Returns (total, (l0, l1, l2)) with total = a l0 + b l1 + lam (l1 - l2).

    ``recon_pre`` (from the uncorrected prediction) is treated as a constant.
    """
    if not isinstance(w, LossWeights):
        w = LossWeights(*w)
    l0 = _norm_loss(corrected, distal_target, "loss_correction")
    l1 = _norm_loss(recon, anchor_target, "loss_correction")
    with nx.no_grad():
        l2 = _norm_loss(nx.constant(nx.constant(recon_pre).data), anchor_target, "loss_correction")
    total = nx.add(nx.add(nx.scale(l0, w.a), nx.scale(l1, w.b)),
                   nx.scale(nx.sub(l1, l2), w.lam))
    return total, (l0, l1, l2)


# -- run directory --------------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    pass


class RunDir:
    """Config snapshot, per-stage metrics CSV and checkpoints under one folder."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)

    def ckpt(self, stage):
        return self.path / f"{stage}.ckpt"

    def write_json(self, name, obj):
        (self.path / name).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def write_metrics(self, stage, rows):
        if not rows:
            return
        with open(self.path / f"{stage}_metrics.csv", "w", newline="") as f:
            wr = csv.DictWriter(f, fieldnames=list(rows[0]))
            wr.writeheader()
            for r in rows:
                wr.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()})


# -- helpers -------------------------------------------------------------------------

def targets(split, idx, hm):
    """Ground-truth renders (n, K, H, W) for samples ``idx``."""
    return render_batch(split.gt[idx], hm.sigma, (hm.size, hm.size), dtype=np.float32)


def _limit(split, n):
    return split if not n or n >= len(split) else split.subset(np.arange(n))


def _check(value, stage, epoch, step):
    if not np.isfinite(value):
        raise TrainingDiverged(f"{stage}: loss {value} at epoch {epoch} step {step}")


def _epoch_order(cfg, stage, epoch, n):
    return np.random.default_rng([cfg.seed, STAGES.index(stage), epoch]).permutation(n)


def _steps(cfg, stage, epoch, n):
    order = _epoch_order(cfg, stage, epoch, n)
    return [np.sort(order[s:s + cfg.batch]) for s in range(0, n, cfg.batch)]


def evaluate(net, split, hm, batch=128):
    """Mean L_phi, L_gamma (on GT distal input), L_C parts and distal PCK."""
    sums = dict(l_phi=0.0, l_gamma=0.0, l0=0.0, l1=0.0, l2=0.0)
    pred_c, corr_c = [], []
    n = len(split)
    for s in range(0, n, batch):
        idx = np.arange(s, min(s + batch, n))
        inp = net.schema.gather(split.heatmaps[idx])
        tgt = net.schema.gather(targets(split, idx, hm))
        with nx.no_grad():
            out = pipeline(net, inp)
            rg = gamma_forward(net, inp["context"], tgt["distal"])
            k = len(idx)
            sums["l_phi"] += k * float(loss_prediction(out["pred"], tgt["distal"]).data)
            sums["l_gamma"] += k * float(loss_feedback(rg, tgt["anchor"]).data)
            sums["l0"] += k * float(loss_prediction(out["corrected"], tgt["distal"]).data)
            sums["l1"] += k * float(loss_feedback(out["recon"], tgt["anchor"]).data)
            sums["l2"] += k * float(loss_feedback(out["recon_pre"], tgt["anchor"]).data)
        pred_c.append(decode_maps(out["pred"].data, len(idx)))
        corr_c.append(decode_maps(out["corrected"].data, len(idx)))
    res = {k: v / n for k, v in sums.items()}
    res["pck_pred"] = distal_pck(np.concatenate(pred_c), split.gt, split.scale, net.schema)
    res["pck_corr"] = distal_pck(np.concatenate(corr_c), split.gt, split.scale, net.schema)
    return res


# -- stages ---------------------------------------------------------------------------

def _pretrain(net, role, train, val, cfg, hm, state=None, start_epoch=0, on_epoch=None):
    module = net.nets[role]
    params = {p.name: p for p in module.params}
    state = state or nx.AdamState(lr=cfg.lr_pretrain)
    epochs = cfg.epochs_phi if role == "phi" else cfg.epochs_gamma
    train = _limit(train, cfg.train_limit)
    rows = []
    for epoch in range(start_epoch, epochs):
        tot = 0.0
        steps = _steps(cfg, role, epoch, len(train))
        for step, idx in enumerate(steps):
            inp = net.schema.gather(train.heatmaps[idx])
            tgt = net.schema.gather(targets(train, idx, hm))
            with nx.Tape():
                if role == "phi":
                    loss = loss_prediction(module(inp["proximals"]), tgt["distal"])
                else:
                    loss = loss_feedback(module(nx.concat([inp["context"], tgt["distal"]])),
                                         tgt["anchor"])
                g = nx.grad(loss, module.params)
            value = float(loss.data)
            _check(value, role, epoch, step)
            tot += value
            nx.adam_step(params, g, state)
        ev = evaluate(net, val, hm)
        rows.append({"epoch": epoch + 1, "train_loss": tot / len(steps),
                     "val_loss": ev["l_phi" if role == "phi" else "l_gamma"],
                     "val_pck": ev["pck_pred"]})
        if on_epoch:
            on_epoch(epoch + 1, state, rows)
    return state, rows


def pretrain_phi(net, train, val, cfg, hm, **kw):
    """Fit phi on detector proximals -> ground-truth distal renders."""
    return _pretrain(net, "phi", train, val, cfg, hm, **kw)


def pretrain_gamma(net, train, val, cfg, hm, **kw):
    """Fit gamma on (detector B, C, ground-truth D) -> ground-truth anchor."""
    return _pretrain(net, "gamma", train, val, cfg, hm, **kw)


def joint_train(net, train, val, cfg, hm, states=None, start_epoch=0, on_epoch=None):
    """Train the correction net (and gamma for the ``joint`` variant), phi frozen.

    Per step both updates use gradients from the same forward pass: C follows
    the weighted correction loss, gamma its own reconstruction loss on the
    corrected input.
    """
    variant = cfg.variant
    corr_p = {p.name: p for p in net.corr.params}
    gam_p = {p.name: p for p in net.gamma.params}
    states = states or {"corr": nx.AdamState(lr=cfg.lr_joint)}
    if variant == "joint":
        states.setdefault("gamma", nx.AdamState(lr=cfg.lr_joint))
    train = _limit(train, cfg.train_limit)
    rows = []
    for epoch in range(start_epoch, cfg.epochs_joint):
        acc = np.zeros(4)
        steps = _steps(cfg, "corr", epoch, len(train))
        for step, idx in enumerate(steps):
            inp = net.schema.gather(train.heatmaps[idx])
            tgt = net.schema.gather(targets(train, idx, hm))
            with nx.Tape():
                with nx.no_grad():
                    pred = net.phi(inp["proximals"])
                out = pipeline(_Frozen(net, pred), inp, zero_feedback=variant == "zero_feedback")
                total, (l0, l1, l2) = loss_correction(out["corrected"], tgt["distal"], out["recon"],
                                                      out["recon_pre"], tgt["anchor"], cfg.weights)
                g_c = nx.grad(total, net.corr.params)
                g_g = nx.grad(l1, net.gamma.params) if variant == "joint" else None
            vals = [float(t.data) for t in (total, l0, l1, l2)]
            _check(vals[0], "corr", epoch, step)
            acc += vals
            nx.adam_step(corr_p, g_c, states["corr"])
            if g_g is not None:
                nx.adam_step(gam_p, g_g, states["gamma"])
        acc /= len(steps)
        ev = evaluate(net, val, hm)
        acc = [float(v) for v in acc]
        rows.append({"epoch": epoch + 1, "train_loss": acc[0], "train_l0": acc[1],
                     "train_l1": acc[2], "train_l2": acc[3], "val_l0": ev["l0"],
                     "val_l1": ev["l1"], "val_l2": ev["l2"],
                     "val_pck_pred": ev["pck_pred"], "val_pck": ev["pck_corr"]})
        if on_epoch:
            on_epoch(epoch + 1, states, rows)
    return states, rows


class _Frozen:
    """Net view whose phi returns a precomputed prediction."""

    def __init__(self, net, pred):
        self.gamma, self.corr = net.gamma, net.corr
        self.phi = lambda x: pred


# -- orchestration ------------------------------------------------------------------

def _stage(run, net, stage, fn, cfg, meta, resume):
    """Run one stage with per-epoch checkpoints; resumes from ``{stage}.partial``."""
    partial = run.path / f"{stage}.partial"
    final = run.ckpt(stage)
    start, states, rows = 0, None, []
    if resume and final.exists():
        loaded, _, m, h = load_checkpoint(final)
        for role in ("phi", "gamma", "corr"):
            net.nets[role].load_state(loaded.nets[role].state())
        return h, m.get("rows", [])
    if resume and partial.exists():
        loaded, states, m, _ = load_checkpoint(partial)
        for role in ("phi", "gamma", "corr"):
            net.nets[role].load_state(loaded.nets[role].state())
        start, rows = m["epoch"], m["rows"]
        if stage != "corr":
            states = states[stage]

    def on_epoch(epoch, st, new_rows):
        allrows = rows + new_rows
        st_d = st if isinstance(st, dict) else {stage: st}
        save_checkpoint(partial, net, st_d, dict(meta, stage=stage, epoch=epoch, rows=allrows))

    kw = dict(start_epoch=start, on_epoch=on_epoch)
    if stage == "corr":
        st, new = fn(net, *cfg, states=states, **kw)
    else:
        st, new = fn(net, *cfg, state=states, **kw)
    rows = rows + new
    st_d = st if isinstance(st, dict) else {stage: st}
    h = save_checkpoint(final, net, st_d, dict(meta, stage=stage, epoch=len(rows), rows=rows))
    run.write_metrics(stage, rows)
    if partial.exists():
        partial.unlink()
    return h, rows


def train_all(dataset, cfg=TrainConfig(), out=None, resume=True, init=None, pretrain_only=False):
    """Full protocol; returns (net, {stage: content hash}, {stage: metrics rows}).

    ``init`` may supply an already pretrained net (phi and gamma stages are
    then skipped), which is how the ablation reuses one pretraining run;
    ``pretrain_only`` stops before the correction stage.
    """
    run = RunDir(out) if out is not None else None
    train, val = dataset.split("train"), _limit(dataset.split("val"), cfg.val_limit)
    hm = dataset.config.heatmap
    meta = {"seed": cfg.seed, "train_config": cfg.to_dict(),
            "weights": asdict(cfg.weights), "variant": cfg.variant}
    hashes, rows = {}, {}
    if init is None:
        net = SCAINet(dataset.schema, cfg.net, cfg.seed)
        stages = [("phi", pretrain_phi), ("gamma", pretrain_gamma), ("corr", joint_train)]
        if pretrain_only:
            stages = stages[:2]
    else:
        net = init.copy()
        stages = [("corr", joint_train)]
    for stage, fn in stages:
        args = (train, val, cfg, hm)
        if run is None:
            kw = {}
            st, r = fn(net, *args, **kw)
            rows[stage] = r
            hashes[stage] = net.nets[stage].digest()
        else:
            if stage == "corr":
                run.write_json("pretrained_digests.json", net.digests())
            hashes[stage], rows[stage] = _stage(run, net, stage, fn, args, meta, resume)
    if run is not None:
        run.write_json("train_config.json", cfg.to_dict())
    return net, hashes, rows
