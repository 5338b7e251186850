import numpy as np
import pytest

from scai_lab import numerics as nx
from scai_lab import synth
from scai_lab.inference import (
    AdaptConfig, AdaptationDiverged, distal_pck, merge_results, net_digest, sai_adapt, sai_run,
    sci_infer,
)
from scai_lab.networks import NetSpec, SCAINet, pipeline

TINY = NetSpec(hidden=3, layers=2, kernel=3)


class View:
    def __init__(self, maps):
        self.heatmaps = maps


def _net(seed=0, zero_corr=False):
    net = SCAINet(synth.coco_like(), TINY, seed=seed)
    rng = np.random.default_rng(seed + 100)
    roles = ("phi", "gamma") if zero_corr else ("phi", "gamma", "corr")
    for r in roles:
        m = net.nets[r]
        m.load_state({k: rng.normal(0, 0.3, v.shape).astype(v.dtype) for k, v in m.state().items()})
    return net


def _maps(n, seed=0, size=10):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(1, size - 2, size=(n, 12, 2))
    from scai_lab.heatmap import render_batch
    return render_batch(pts, 1.0, (size, size))


def test_zero_init_correction_changes_nothing():
    net = _net(zero_corr=True)
    res = sci_infer(net, View(_maps(5)))
    np.testing.assert_array_equal(res.corrected, res.pred)
    np.testing.assert_array_equal(res.norm_pre, res.norm_post)


def test_sci_matches_pipeline_and_batches():
    net = _net(1)
    maps = _maps(7, 1)
    res = sci_infer(net, View(maps), batch=3)
    with nx.no_grad():
        out = pipeline(net, net.schema.gather(maps))
    np.testing.assert_allclose(res.norm_post.ravel(), out["norm_post"].data, rtol=1e-6)
    assert res.pred.shape == (7, 6, 2) and res.norm_pre.shape == (7, 6)
    np.testing.assert_array_equal(sci_infer(net, View(maps), batch=7).corrected, res.corrected)


def test_runs_on_unlabeled_view(tmp_path):
    synth.make_dataset(synth.DataConfig(sizes={"train": 4, "val": 4, "test": 6}, env_block=2), tmp_path)
    u = synth.Dataset(tmp_path).split("test").unlabeled()
    assert not hasattr(u, "gt")
    net = _net(2)
    sci_infer(net, u)
    sai_run(net, u, AdaptConfig(epochs=1, batch=4))


def test_schema_mismatch_rejected():
    net = _net()
    with pytest.raises(ValueError):
        sci_infer(net, View(np.zeros((2, 11, 8, 8), np.float32)))


def test_zero_epochs_is_sci():
    net = _net(3)
    maps = _maps(6, 3)
    corr, trace, res = sai_adapt(net, maps, AdaptConfig(epochs=0))
    ref = sci_infer(net, View(maps))
    np.testing.assert_array_equal(res.corrected, ref.corrected)
    assert trace.epochs == 0 and trace.seconds == [] and len(trace.loss) == 1
    assert trace.loss[0] == pytest.approx(ref.norm_post.mean(), rel=1e-6)
    assert corr.digest() == net.corr.digest()


def test_adaptation_freezes_phi_gamma_and_leaves_net_untouched():
    net = _net(4)
    before = {k: n.digest() for k, n in net.nets.items()}
    corr, trace, _ = sai_adapt(net, _maps(8, 4), AdaptConfig(epochs=3, lr=1e-2))
    assert {k: n.digest() for k, n in net.nets.items()} == before
    assert corr.digest() != before["corr"]
    assert trace.epochs == 3 and len(trace.loss) == 4


def test_adaptation_lowers_loss_on_small_problem():
    net = _net(5)
    _, trace, _ = sai_adapt(net, _maps(8, 5), AdaptConfig(epochs=20, lr=1e-2))
    assert trace.loss[-1] < trace.loss[0]


def test_diagnostics_do_not_change_results():
    net = _net(6)
    maps = _maps(8, 6)
    seen = []
    _, t1, r1 = sai_adapt(net, maps, AdaptConfig(epochs=3, lr=1e-2))
    _, t2, r2 = sai_adapt(net, maps, AdaptConfig(epochs=3, lr=1e-2),
                          diagnostics=lambda c: seen.append(c) or 0.5)
    assert t1.loss == t2.loss and t2.pck == [0.5] * 4 and len(seen) == 4
    np.testing.assert_array_equal(r1.corrected, r2.corrected)


def test_restore_protocol_and_permutation_invariance():
    net = _net(7)
    data = View(_maps(20, 7))
    cfg = AdaptConfig(epochs=2, lr=1e-2, batch=6)
    recs = sai_run(net, data, cfg)
    assert [r.batch for r in recs] == [0, 1, 2, 3]
    assert {r.base_digest for r in recs} == {net_digest(net)}
    rev = sai_run(net, data, cfg, order=[3, 1, 0, 2])
    par = sai_run(net, data, cfg, threads=3)
    for other in (rev, par):
        for a, b in zip(recs, other):
            assert a.trace.loss == b.trace.loss
            np.testing.assert_array_equal(a.result.corrected, b.result.corrected)
            np.testing.assert_array_equal(a.result.norm_post, b.result.norm_post)
    assert merge_results(recs).pred.shape == (20, 6, 2)


def test_without_restore_the_correction_net_carries_over():
    net = _net(8)
    recs = sai_run(net, View(_maps(12, 8)), AdaptConfig(epochs=2, lr=1e-2, batch=4, restore=False))
    digests = [r.base_digest for r in recs]
    assert digests[0] == net_digest(net) and len(set(digests)) == 3


def test_adaptation_errors():
    net = _net()
    with pytest.raises(ValueError):
        sai_adapt(net, np.zeros((0, 12, 8, 8), np.float32), AdaptConfig())
    with pytest.raises(ValueError):
        AdaptConfig(epochs=-1)
    bad = _maps(4, 9)
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(AdaptationDiverged):
        sai_adapt(net, bad, AdaptConfig(epochs=1))


def test_distal_pck_uses_group_distals():
    schema = synth.coco_like()
    gt = np.zeros((2, 12, 2))
    coords = gt[:, schema.distal_ids].copy()
    coords[0, 0] += 5
    assert distal_pck(coords, gt, np.ones(2) * 10, schema) == pytest.approx(11 / 12)
