"""``scai-lab`` command line: gen-data, train, eval.

Every command writes the resolved config next to its outputs. If a command
fails, whatever it had written is moved under ``<out>/failed/`` together
with the error message and the exit status is nonzero.
"""

from pathlib import Path
import shutil
import sys
import time
import traceback

import click
import numpy as np

from . import config as cfgmod
from . import evaluation as ev
from .inference import distal_pck, merge_results, resolve_threads, sai_run, sci_infer
from .networks import load_checkpoint
from .synth import Dataset, baseline_pck, make_dataset
from .training import train_all


def _common(f):
    f = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                     help="Override a config key, e.g. train.epochs_joint=2.")(f)
    f = click.option("--threads", type=int, default=None,
                     help="Worker threads (fallback: SCAI_LAB_THREADS).")(f)
    f = click.option("--out", type=click.Path(file_okay=False), required=True)(f)
    f = click.option("--seed", type=int, default=None, help="Global seed for all sections.")(f)
    f = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))(f)
    return f


def _resolve(config_path, seed, overrides):
    try:
        cfg = cfgmod.load(config_path, overrides)
    except cfgmod.ConfigError as exc:
        raise click.UsageError(str(exc)) from exc
    return cfg.with_seed(cfg.seed if seed is None else seed)


def _threads(cli_threads, cfg):
    if cli_threads is not None:
        return resolve_threads(cli_threads)
    return resolve_threads(cfg.threads or None)


def _data_dir(cfg, out):
    return Path(cfg.dataset) if cfg.dataset else Path(out) / "data"


def _guard(out, work, name):
    """Run ``work(dest)``; on failure move ``dest`` under ``out/failed``."""
    out = Path(out)
    dest = out / name if name else out
    try:
        work(dest)
    except Exception as exc:
        failed = out / "failed"
        failed.mkdir(parents=True, exist_ok=True)
        if name and dest.exists():
            shutil.move(str(dest), str(failed / name))
        elif not name:
            for p in list(out.iterdir()):
                if p.name != "failed":
                    shutil.move(str(p), str(failed / p.name))
        (failed / "error.txt").write_text(traceback.format_exc())
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


@click.group()
def main():
    """Self-correcting keypoint refinement experiments on synthetic skeletons."""


@main.command("gen-data")
@_common
def gen_data(config_path, seed, out, threads, overrides):
    """Generate the train / val / shifted-test splits."""
    cfg = _resolve(config_path, seed, overrides)

    def work(dest):
        dest.mkdir(parents=True, exist_ok=True)
        make_dataset(cfg.data, dest, workers=_threads(threads, cfg))
        cfgmod.dump(cfg, dest / "config.json")
        click.echo(f"dataset written to {dest}")

    _guard(out, work, "")


@main.command()
@_common
@click.option("--no-resume", is_flag=True, help="Ignore partial checkpoints in --out.")
def train(config_path, seed, out, threads, overrides, no_resume):
    """Pretrain phi and gamma, then train the correction stage."""
    cfg = _resolve(config_path, seed, overrides)

    def work(dest):
        dest.mkdir(parents=True, exist_ok=True)
        data = _data_dir(cfg, dest)
        if not (data / "manifest.json").exists():
            make_dataset(cfg.data, data, workers=_threads(threads, cfg))
        cfgmod.dump(cfg, dest / "config.json")
        _, hashes, rows = train_all(Dataset(data), cfg.train, out=dest, resume=not no_resume)
        for stage, h in hashes.items():
            click.echo(f"{stage}: {len(rows[stage])} epochs, checkpoint {h[:16]}")

    _guard(out, work, "")


@main.command("eval")
@_common
@click.option("--mode", type=click.Choice(cfgmod.EVAL_MODES), required=True)
def eval_cmd(config_path, seed, out, threads, overrides, mode):
    """Score a trained run directory; reports go to <out>/eval/<mode>/."""
    cfg = _resolve(config_path, seed, overrides)
    nthreads = _threads(threads, cfg)
    run = Path(out)

    def work(dest):
        dest.mkdir(parents=True, exist_ok=True)
        cfgmod.dump(cfg, dest / "config.json")
        ds = Dataset(_data_dir(cfg, run))
        split = ds.split(cfg.eval.split)
        if mode == "ablate":
            pre = run / "gamma.ckpt"
            pretrained = load_checkpoint(pre)[0] if pre.exists() else None
            rows, _ = ev.run_ablation(ds, cfg.train, cfg.adapt, pretrained, cfg.eval.split,
                                      nthreads, out=dest)
            for r in rows:
                click.echo(f"{r.variant:>10s}  {r.pck:.4f}  {r.delta:+.4f}  {r.status}")
            return
        ckpt = run / "corr.ckpt"
        if not ckpt.exists():
            raise FileNotFoundError(f"{ckpt} not found; run `scai-lab train` first")
        net = load_checkpoint(ckpt)[0]
        if net.schema != ds.schema:
            raise ValueError("dataset schema differs from the checkpoint's")
        MODES[mode](net, split, cfg, nthreads, dest)

    _guard(run, work, f"eval/{mode}")


def _subset(split, n):
    return split if not n or n >= len(split) else split.subset(np.arange(n))


def _mode_sci(net, split, cfg, threads, dest):
    split = _subset(split, cfg.eval.samples)
    res = sci_infer(net, split.unlabeled(), threads=threads)
    row = (len(split), baseline_pck(split, net.schema),
           distal_pck(res.pred, split.gt, split.scale, net.schema),
           distal_pck(res.corrected, split.gt, split.scale, net.schema),
           float(res.norm_pre.mean()), float(res.norm_post.mean()))
    ev.write_csv(dest / "sci.csv", ["samples", "pck_baseline", "pck_uncorrected",
                                    "pck_corrected", "mean_es_pre", "mean_es_post"], [row])
    click.echo("pck uncorrected {2:.4f} corrected {3:.4f}  |e_s| {4:.4f} -> {5:.4f}".format(*row))


def _mode_sai(net, split, cfg, threads, dest):
    split = _subset(split, cfg.eval.samples)
    t0 = time.perf_counter()
    recs = sai_run(net, split.unlabeled(), cfg.adapt, threads=threads)
    elapsed = time.perf_counter() - t0
    rows = []
    size = cfg.adapt.batch
    for r in recs:
        s = slice(r.batch * size, r.batch * size + len(r.result.pred))
        gt, sc = split.gt[s], split.scale[s]
        rows.append((r.batch, r.base_digest[:16], r.trace.loss[0], r.trace.loss[-1],
                     distal_pck(r.result.pred, gt, sc, net.schema),
                     distal_pck(r.result.corrected, gt, sc, net.schema)))
    ev.write_csv(dest / "sai_batches.csv",
                 ["batch", "base_digest", "loss_first", "loss_last", "pck_uncorrected", "pck_adapted"], rows)
    ev.write_csv(dest / "sai_trace.csv", ["batch", "epoch", "loss"],
                 [(r.batch, t, v) for r in recs for t, v in enumerate(r.trace.loss)])
    ev.write_csv(dest / "timing.csv", ["batches", "seconds"], [(len(recs), elapsed)])
    res = merge_results(recs)
    click.echo(f"adapted pck {distal_pck(res.corrected, split.gt, split.scale, net.schema):.4f}"
               f" over {len(recs)} batches")


def _mode_correlate(net, split, cfg, threads, dest):
    rep = ev.correlation_report(net, split, cfg.eval.batch, cfg.eval.n_batches, threads)
    rep.write(dest)
    if cfg.eval.plots:
        e, p = zip(*rep.points)
        ev.svg_plot(dest / "correlation.svg", {f"r = {rep.r:.3f}": (e, p)},
                    "batch |e_s| vs PCK", "mean |e_s|", "PCK", scatter=True)
    click.echo(f"pearson r = {rep.r:.4f} over {rep.batches} batches")


def _mode_local_search(net, split, cfg, threads, dest):
    split = _subset(split, cfg.eval.search_samples)
    ls = ev.local_search_refine(net, split.heatmaps, cfg.eval.search_iterations, cfg.eval.search_sigma)
    sci = sci_infer(net, split.unlabeled(), threads=threads)
    rows = [("learned", float(sci.norm_post.mean()), 2.0,
             distal_pck(sci.corrected, split.gt, split.scale, net.schema)),
            ("local_search", float(ls.norms.mean()), float(ls.gamma_calls.mean()),
             distal_pck(ls.coords, split.gt, split.scale, net.schema))]
    ev.write_csv(dest / "local_search.csv", ["method", "mean_es", "gamma_calls", "pck"], rows)
    ev.write_csv(dest / "local_search_trace.csv", ["iteration", "mean_es"], list(enumerate(ls.trace)))
    for r in rows:
        click.echo(f"{r[0]:>12s}  |e_s| {r[1]:.4f}  gamma calls {r[2]:.1f}  pck {r[3]:.4f}")


def _mode_curves(net, split, cfg, threads, dest):
    rep = ev.adaptation_curves(net, split, cfg.adapt, cfg.eval.n_batches, threads)
    rep.write(dest)
    if cfg.eval.plots:
        t = np.arange(rep.loss.shape[1])
        ev.svg_plot(dest / "curves_loss.svg", {"loss": (t, rep.loss.mean(0))},
                    "adaptation loss", "epoch", "mean |e_s|")
        ev.svg_plot(dest / "curves_pck.svg", {"pck": (t, rep.pck.mean(0))},
                    "adaptation PCK", "epoch", "PCK")
    ok = rep.batch_pass()
    click.echo(f"{ok.sum()}/{len(ok)} batches: loss <= 0.8x initial and PCK not lower")


MODES = {"sci": _mode_sci, "sai": _mode_sai, "correlate": _mode_correlate,
         "local-search": _mode_local_search, "curves": _mode_curves}


if __name__ == "__main__":
    main()
