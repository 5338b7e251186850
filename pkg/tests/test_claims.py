"""Measured training and feedback-network claims on the default run.

These share the acceptance fixture, so they cost little beyond it. Claims
that do not hold at desk scale are marked xfail(strict=True) with the
measured value, so a future change that makes them hold is noticed.
"""

import csv
from dataclasses import replace

import numpy as np
import pytest

from scai_lab import numerics as nx
from scai_lab import synth
from scai_lab.heatmap import render_batch
from scai_lab.networks import SCAINet, feedback_error, gamma_forward, load_checkpoint
from scai_lab.training import (
    LossWeights, TrainConfig, evaluate, pretrain_phi, targets, train_all,
)

pytestmark = pytest.mark.slow


def _rows(path):
    with open(path) as f:
        return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(f)]


def _untrained(run):
    return SCAINet(run.ds.schema, run.train_cfg.net, run.train_cfg.seed)


def _gamma_err(net, split, hm, distal=None):
    """Mean |gamma(context, distal) - anchor target| with GT distal by default."""
    inp = net.schema.gather(split.heatmaps)
    tgt = net.schema.gather(targets(split, np.arange(len(split)), hm))
    d = tgt["distal"] if distal is None else distal
    with nx.no_grad():
        _, n = feedback_error(tgt["anchor"], gamma_forward(net, inp["context"], d))
    return float(n.data.mean())


@pytest.fixture(scope="module")
def pre(default_run):
    return load_checkpoint(default_run.root / "ablation" / "pretrain" / "gamma.ckpt")[0]


@pytest.mark.xfail(strict=True, reason="L2 between sigma-1 heatmaps punishes sub-pixel offsets; "
                                       "measured drop is about 29%")
def test_phi_training_loss_halves(default_run):
    hm = default_run.ds.config.heatmap
    train = default_run.ds.split("train").subset(np.arange(500))
    initial = evaluate(_untrained(default_run), train, hm)["l_phi"]
    final = _rows(default_run.root / "ablation" / "pretrain" / "phi_metrics.csv")[-1]["train_loss"]
    assert final <= 0.5 * initial


def test_gamma_val_loss_halves(default_run, pre):
    val = default_run.ds.split("val")
    hm = default_run.ds.config.heatmap
    assert _gamma_err(pre, val, hm) <= 0.5 * _gamma_err(_untrained(default_run), val, hm)


@pytest.mark.xfail(strict=True, reason="anchor is not determined by context plus distal; measured "
                                       "gain over the untrained net is about 3x")
def test_gamma_ten_times_better_than_untrained(default_run, pre):
    val = default_run.ds.split("val")
    hm = default_run.ds.config.heatmap
    assert _gamma_err(pre, val, hm) * 10 <= _gamma_err(_untrained(default_run), val, hm)


def test_distal_jitter_raises_feedback_error(default_run, pre):
    val = default_run.ds.split("val").subset(np.arange(1000 // 6 + 1))
    hm = default_run.ds.config.heatmap
    d = val.gt[:, default_run.ds.schema.distal_ids].reshape(-1, 2)
    rng = np.random.default_rng(0)
    jit = render_batch(d + rng.normal(0, 8, d.shape), hm.sigma, (hm.size, hm.size))[:, None]
    assert _gamma_err(pre, val, hm, jit) > _gamma_err(pre, val, hm)


def test_joint_stage_lowers_feedback_error_and_raises_pck(default_run):
    last = _rows(default_run.root / "ablation" / "joint" / "corr_metrics.csv")[-1]
    assert last["val_l1"] < last["val_l2"]
    assert last["val_pck"] > last["val_pck_pred"]


def test_lambda_widens_the_feedback_gap(default_run, pre):
    ds, cfg = default_run.ds, default_run.train_cfg
    val = ds.split("val")
    hm = ds.config.heatmap

    def gap(net):
        r = evaluate(net, val, hm)
        return r["l2"] - r["l1"]

    flat, _, _ = train_all(ds, replace(cfg, weights=LossWeights(0.85, 0.65, 0.0)), init=pre)
    assert gap(flat) < gap(default_run.net)


@pytest.mark.xfail(strict=True, reason="plateaus near 0.43x the initial loss after 20 epochs; "
                                       "the small net cannot render sub-pixel tips precisely enough")
def test_noiseless_phi_fits(tmp_path):
    quiet = synth.NoiseConfig(proximal_sigma=0, distal_sigma=0, occlusion_rate=(0,) * 6)
    kin = synth.Kinematics(elbow_noise_deg=0, knee_noise_deg=0, forearm=(0.42, 0.42), shin=(0.5, 0.5))
    cfg = synth.DataConfig(train_noise=quiet, test_noise=replace(quiet, distal_sigma=0.5),
                           kinematics=kin, sizes={"train": 2000, "val": 500, "test": 64})
    synth.make_dataset(cfg, tmp_path)
    ds = synth.Dataset(tmp_path)
    tc = TrainConfig(epochs_phi=20)
    net = SCAINet(ds.schema, tc.net, tc.seed)
    val, hm = ds.split("val"), ds.config.heatmap
    initial = evaluate(net, val, hm)["l_phi"]
    pretrain_phi(net, ds.split("train"), val, tc, hm)
    assert evaluate(net, val, hm)["l_phi"] < 0.1 * initial
