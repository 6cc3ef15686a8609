"""Operator surface: dataset generation, training, rendering, evaluation,
ablation sweeps, and gradient checks.

Every command is reproducible from (config file, seed); each training run
gets its own directory holding the effective config echo, the metrics
CSV, checkpoints, and the report figures. Exit codes: 0 ok, 2 config
error, 3 diverged, 4 check failed. Setting DN4DGS_THREADS=1 pins the
numerical libraries to one thread for bitwise-deterministic runs.
"""

from __future__ import annotations

import os

_t = os.environ.get("DN4DGS_THREADS")
if _t:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ.setdefault(_var, _t)

import argparse
import csv
import dataclasses
import sys

import numpy as np

from . import diffcore as dc
from . import gradcheck, report, synthdata, training
from .config import ConfigError, RunConfig, parse_config, write_config
from .rasterizer import render
from .training import DivergedLoss, VersionMismatch

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_CHECK_FAILED = 4


def build_pipeline_from_config(cfg: RunConfig, dataset, dtype=np.float32,
                               seed=None):
    cfg.tam.c1 = cfg.encoder.c1
    return training.build_pipeline(
        dataset, cfg.encoder, cfg.tam, cfg.dsam,
        seed=cfg.schedule.seed if seed is None else seed, dtype=dtype,
        use_nss=cfg.model.use_nss, use_tam=cfg.model.use_tam,
        use_dsam=cfg.model.use_dsam, freeze_stage1=cfg.model.freeze_stage1,
        hidden=cfg.model.hidden)


def _load_run(ckpt_path, config_path=None, data_path=None, dtype=np.float32):
    """Rebuild (cfg, pipeline, phase) from a checkpoint + config echo."""
    run_dir = os.path.dirname(os.path.abspath(ckpt_path))
    if config_path is None:
        config_path = os.path.join(run_dir, "config.ini")
    cfg = parse_config(config_path)
    data = data_path or cfg.run.data
    if not data:
        raise ConfigError("no dataset path: pass --data or use a config echo")
    dataset = synthdata.load_dataset(data)
    pipe = build_pipeline_from_config(cfg, dataset, dtype=dtype)
    training.restore_params(pipe.all_params(), training.load_checkpoint(ckpt_path))
    return cfg, pipe, pipe.final_phase(cfg.schedule)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args):
    synthdata.generate(args.seed, args.preset, args.out,
                       image_format=args.image_format)
    n = len(synthdata.load_dataset(args.out).frames)
    print(f"wrote {n} frames to {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = parse_config(args.config)
    cfg.run.data = os.path.abspath(args.data)
    cfg.run.out = os.path.abspath(args.out)
    dataset = synthdata.load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    write_config(cfg, os.path.join(args.out, "config.ini"))
    pipe = build_pipeline_from_config(cfg, dataset)
    result = training.train(pipe, cfg.schedule, cfg.loss, args.out)
    report.save_training_curves(result.metrics,
                                os.path.join(args.out, "metrics.png"),
                                stage1_iters=cfg.schedule.stage1_iters)
    last = result.metrics[-1] if result.metrics else {}
    print(f"finished {cfg.schedule.total_iters} iters; "
          f"holdout PSNR {last.get('psnr_holdout', 'n/a')}; "
          f"checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_render(args):
    cfg, pipe, phase = _load_run(args.ckpt, args.config, args.data)
    dataset = pipe.dataset
    if not 0 <= args.camera < len(dataset.cameras):
        raise ConfigError(f"camera id {args.camera} out of range")
    if not 0.0 <= args.t <= 1.0:
        raise ConfigError(f"t={args.t} outside [0, 1]")
    cam = dataset.cameras[args.camera]
    with dc.no_grad():
        out = render(pipe.model.nss_forward(pipe.cloud, args.t, phase),
                     cam, dataset.background)
    from . import images
    images.save_image(args.out, out.rgb.value)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args):
    cfg, pipe, phase = _load_run(args.ckpt, args.config, args.data)
    dataset = pipe.dataset
    frames = {"holdout": dataset.holdout_frames, "train": dataset.train_frames,
              "all": dataset.frames}[args.split]
    rows = training.evaluate(pipe, phase, frames)

    run_dir = os.path.dirname(os.path.abspath(args.ckpt))
    csv_path = os.path.join(run_dir, "eval.csv")
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", "t", "psnr", "ssim"])
        for r in rows:
            w.writerow([r["frame"], repr(r["t"]), repr(r["psnr"]), repr(r["ssim"])])
    report.save_eval_plot(rows, os.path.join(run_dir, "eval.png"))

    print("frame,t,psnr,ssim")
    for r in rows:
        print(f"{r['frame']},{r['t']!r},{r['psnr']!r},{r['ssim']!r}")
    mean_psnr = float(np.mean([r["psnr"] for r in rows]))
    mean_ssim = float(np.mean([r["ssim"] for r in rows]))
    print(f"# mean psnr={mean_psnr!r} ssim={mean_ssim!r}")

    truth = synthdata.load_truth(dataset.root)
    if truth is not None:
        dists = []
        for t in dataset.times:
            with dc.no_grad():
                deformed = pipe.model.nss_forward(pipe.cloud, float(t), phase)
            dists.append(synthdata.chamfer(deformed.mu.value,
                                           truth.positions_at(float(t))))
        print(f"# chamfer_to_gt mean={float(np.mean(dists))!r} "
              f"median={float(np.median(dists))!r}")
    return EXIT_OK


ABLATION_GRIDS = {
    # Table-style component toggles: (nss, tam, dsam)
    "components": [(False, False, False), (True, False, False),
                   (False, True, False), (True, True, False),
                   (False, True, True), (True, False, True),
                   (True, True, True)],
    "k": [4, 16, 32],
    "dt": [0.5, 1.0, 2.0],
    "ydim": [0, 4, 16, 32, 64],
    "stage1": [0.0, 0.25, 0.5, 0.75, 1.0],
}


def _ablation_cells(grid, base: RunConfig):
    cells = []
    for value in ABLATION_GRIDS[grid]:
        cfg = dataclasses.replace(
            base,
            model=dataclasses.replace(base.model),
            encoder=dataclasses.replace(base.encoder),
            tam=dataclasses.replace(base.tam),
            dsam=dataclasses.replace(base.dsam),
            loss=dataclasses.replace(base.loss),
            schedule=dataclasses.replace(base.schedule),
            scene=dataclasses.replace(base.scene),
            run=dataclasses.replace(base.run),
        )
        if grid == "components":
            nss, tam, dsam = value
            cfg.model.use_nss, cfg.model.use_tam, cfg.model.use_dsam = nss, tam, dsam
            label = f"nss={int(nss)},tam={int(tam)},dsam={int(dsam)}"
        elif grid == "k":
            cfg.dsam.k = value
            label = f"k={value}"
        elif grid == "dt":
            cfg.tam.dt = value
            label = f"dt={value}x"
        elif grid == "ydim":
            cfg.tam.y_dim = value
            label = f"ydim={value}"
        else:  # stage1
            cfg.schedule.stage1_iters = int(round(value * cfg.schedule.total_iters))
            label = f"stage1={cfg.schedule.stage1_iters}"
        cells.append((label, cfg))
    return cells


def cmd_ablate(args):
    base = parse_config(args.config)
    dataset = synthdata.load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for idx, (label, cfg) in enumerate(_ablation_cells(args.grid, base)):
        cell_dir = os.path.join(args.out, f"cell_{idx:02d}")
        os.makedirs(cell_dir, exist_ok=True)
        cfg.run.data = os.path.abspath(args.data)
        cfg.run.out = os.path.abspath(cell_dir)
        write_config(cfg, os.path.join(cell_dir, "config.ini"))
        pipe = build_pipeline_from_config(cfg, dataset)
        training.train(pipe, cfg.schedule, cfg.loss, cell_dir)
        phase = pipe.final_phase(cfg.schedule)
        evals = training.evaluate(pipe, phase)
        rows.append({
            "grid": args.grid, "label": label,
            "nss": int(cfg.model.use_nss), "tam": int(cfg.model.use_tam),
            "dsam": int(cfg.model.use_dsam), "k": cfg.dsam.k,
            "y_dim": cfg.tam.y_dim, "dt": cfg.tam.dt,
            "stage1_iters": cfg.schedule.stage1_iters,
            "psnr": float(np.mean([r["psnr"] for r in evals])),
            "ssim": float(np.mean([r["ssim"] for r in evals])),
        })
        print(f"{label}: psnr={rows[-1]['psnr']:.3f} ssim={rows[-1]['ssim']:.4f}")

    csv_path = os.path.join(args.out, "ablation.csv")
    cols = ["grid", "label", "nss", "tam", "dsam", "k", "y_dim", "dt",
            "stage1_iters", "psnr", "ssim"]
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)
    report.save_ablation_plot(rows, os.path.join(args.out, "ablation.png"))
    print(f"wrote {csv_path}")
    return EXIT_OK


def cmd_grad_check(args):
    scopes = list(gradcheck.SCOPES) if args.scope == "all" else [args.scope]
    worst = 0.0
    print("scope,group,max_rel_err")
    for scope in scopes:
        errs = gradcheck.run_scope(scope, eps=args.eps)
        for name, err in errs.items():
            print(f"{scope},{name},{err:.3e}")
            worst = max(worst, err)
    status = "ok" if worst < gradcheck.REL_ERR_LIMIT else "FAILED"
    print(f"# max_rel_err={worst:.3e} limit={gradcheck.REL_ERR_LIMIT} {status}")
    return EXIT_OK if worst < gradcheck.REL_ERR_LIMIT else EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------

def make_parser():
    p = argparse.ArgumentParser(prog="splatlab")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--preset", choices=sorted(synthdata.PRESETS), default="toy")
    g.add_argument("--out", required=True)
    g.add_argument("--image-format", choices=["ppm", "png"], default="ppm")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train on a dataset")
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("render", help="render one view at an arbitrary t")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--camera", type=int, required=True)
    r.add_argument("--t", type=float, required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--config", default=None)
    r.add_argument("--data", default=None)
    r.set_defaults(fn=cmd_render)

    e = sub.add_parser("eval", help="per-frame metrics table")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", default=None)
    e.add_argument("--config", default=None)
    e.add_argument("--split", choices=["holdout", "train", "all"],
                   default="holdout")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="train a grid of component toggles")
    a.add_argument("--config", default=None)
    a.add_argument("--data", required=True)
    a.add_argument("--grid", choices=sorted(ABLATION_GRIDS), required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_ablate)

    c = sub.add_parser("grad-check", help="finite-difference gradient audit")
    c.add_argument("--scope", choices=sorted(gradcheck.SCOPES) + ["all"],
                   default="all")
    c.add_argument("--eps", type=float, default=1e-5)
    c.set_defaults(fn=cmd_grad_check)
    return p


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, VersionMismatch, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedLoss as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
