"""Experiment command line.

Every subcommand reads a config file, creates a run directory (timestamped
under [paths] out_dir, or exactly --out when given), snapshots the config
there, and writes CSVs, images, and a summary.json. CSV cells use shortest
round-trip float formatting, so identical config and seed reproduce every
CSV byte-for-byte.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from datetime import datetime, timezone

import numpy as np

from .analysis import (EmpiricalCdf, adversarial_attack, estimate_cdfs,
                       generalization_bound, input_difference_curve,
                       input_pair_sampler, loss_energy_regression,
                       param_difference_curve, param_pair_sampler,
                       patch_losses, eigen_extract, stability_bound_input,
                       stability_bound_params)
from .config import ExperimentConfig, load_config, save_config
from .dataset import Dataset, make_synthetic_images
from .errors import ConfigError, FormatError, NumericError
from .flow import NagConfig, run_flow
from .imageio import PSNR_CAP, load_image, luma, psnr, save_image
from .regularizer import load_checkpoint, tdv_energy, tdv_grad
from .training import LossFn, format_cell, train

# rng stream tags: observation noise, genbound patches, genbound noise
_OBS, _PATCHES, _XI_FIXED = 2, 4, 5


def _write_csv(path, header, rows):
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(format_cell(c) for c in row) + "\n")


def _img_ext(cfg: ExperimentConfig) -> str:
    return "ppm" if cfg.channels == 3 else "pgm"


def _psnr_y(x: np.ndarray, ref: np.ndarray) -> float:
    return psnr(luma(x), luma(ref))


def _load_dir_images(cfg: ExperimentConfig) -> list[np.ndarray]:
    names = sorted(n for n in os.listdir(cfg.data_dir)
                   if n.lower().endswith((".pgm", ".ppm")))
    if not names:
        raise ConfigError(f"no PGM/PPM images in '{cfg.data_dir}'")
    images = [load_image(os.path.join(cfg.data_dir, n)) for n in names]
    for name, img in zip(names, images):
        if img.shape[0] != cfg.channels:
            raise ConfigError(
                f"'{name}' has {img.shape[0]} channels, task needs "
                f"{cfg.channels}")
    return images


def _train_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.data_dir:
        images = _load_dir_images(cfg)
    else:
        images = make_synthetic_images(count=16, size=96,
                                       channels=cfg.channels, seed=cfg.seed)
    return Dataset(images, patch_size=cfg.patch_size)


def _center_crop(img: np.ndarray, size: int) -> np.ndarray:
    _, h, w = img.shape
    if h < size or w < size:
        raise ConfigError(f"image {h}x{w} smaller than image_size {size}")
    top, left = (h - size) // 2, (w - size) // 2
    return img[:, top:top + size, left:left + size]


def _eval_images(cfg: ExperimentConfig) -> list[np.ndarray]:
    if cfg.data_dir:
        return [_center_crop(img, cfg.image_size)
                for img in _load_dir_images(cfg)]
    return make_synthetic_images(count=4, size=cfg.image_size,
                                 channels=cfg.channels, seed=cfg.seed + 1)


def _observation(cfg: ExperimentConfig, op, y: np.ndarray,
                 index: int) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, _OBS, index])
    return op.forward(y[None])[0] + cfg.sigma * rng.standard_normal(
        op.data_shape)


def _checkpoint(cfg: ExperimentConfig):
    if not cfg.checkpoint:
        raise ConfigError("this command needs [paths] checkpoint")
    params, T, _ = load_checkpoint(cfg.checkpoint)
    if params.arch != cfg.arch():
        raise ConfigError("checkpoint architecture does not match config")
    return params, T


# ------------------------------------------------------------ subcommands


def cmd_train(cfg: ExperimentConfig, run_dir: str) -> dict:
    dataset = _train_dataset(cfg)
    op = cfg.operator(cfg.patch_size, cfg.patch_size)
    T, _, log = train(dataset, op, cfg.train_config(), cfg.loss_fn(),
                      out_dir=run_dir)
    summary = {"T": T, "iterations": cfg.iterations,
               "checkpoint": "checkpoint_final.tdvc"}
    if log:
        summary["initial_cost"] = log[0]["cost"]
        summary["final_cost"] = log[-1]["cost"]
    return summary


def _reconstruct_one(cfg, op, params, T, steps, y, index):
    z = _observation(cfg, op, y, index)
    flow = run_flow(z[None], T, params, op, steps)
    return flow.states[0][0], flow.states[-1][0]


def cmd_reconstruct(cfg: ExperimentConfig, run_dir: str) -> dict:
    params, T = _checkpoint(cfg)
    op = cfg.operator(cfg.image_size, cfg.image_size)
    images = _eval_images(cfg)
    ext = _img_ext(cfg)
    rows = []
    for i, y in enumerate(images):
        x0, x_s = _reconstruct_one(cfg, op, params, T, cfg.steps, y, i)
        save_image(y, os.path.join(run_dir, f"reference_{i:03d}.{ext}"))
        save_image(x0, os.path.join(run_dir, f"init_{i:03d}.{ext}"))
        save_image(x_s, os.path.join(run_dir, f"recon_{i:03d}.{ext}"))
        p0, ps = _psnr_y(x0, y), _psnr_y(x_s, y)
        rows.append([i, p0, ps, int(p0 == PSNR_CAP or ps == PSNR_CAP)])
    _write_csv(os.path.join(run_dir, "psnr.csv"),
               ["image", "psnr_init", "psnr_recon", "capped"], rows)
    return {"T": T, "steps": cfg.steps, "images": len(images),
            "mean_psnr_init": float(np.mean([r[1] for r in rows])),
            "mean_psnr_recon": float(np.mean([r[2] for r in rows]))}


def cmd_sweep_t(cfg: ExperimentConfig, run_dir: str) -> dict:
    """Evaluate multiples of the trained stopping time, scaling the step
    count with T so the step size stays fixed."""
    params, t_star = _checkpoint(cfg)
    op = cfg.operator(cfg.image_size, cfg.image_size)
    y = _eval_images(cfg)[0]
    ext = _img_ext(cfg)
    rows = []
    for factor in cfg.sweep_factors:
        T = factor * t_star
        steps = max(1, round(cfg.steps * factor))
        x0, x_s = _reconstruct_one(cfg, op, params, T, steps, y, 0)
        save_image(x_s, os.path.join(run_dir, f"recon_f{factor:g}.{ext}"))
        rows.append([factor, T, steps, _psnr_y(x_s, y)])
    _write_csv(os.path.join(run_dir, "sweep_psnr.csv"),
               ["factor", "T", "steps", "psnr"], rows)
    best = max(rows, key=lambda r: r[3])
    return {"T_star": float(t_star), "best_factor": float(best[0]),
            "best_psnr": float(best[3])}


def cmd_stability(cfg: ExperimentConfig, run_dir: str) -> dict:
    params, T = _checkpoint(cfg)
    op = cfg.operator(cfg.image_size, cfg.image_size)
    if cfg.data_dir:
        images = _load_dir_images(cfg)
    else:
        images = make_synthetic_images(count=16, size=max(96, cfg.image_size),
                                       channels=cfg.channels, seed=cfg.seed)
    dataset = Dataset(images, patch_size=cfg.image_size)
    a_init = op.init_opnorm
    base = 4 * cfg.seed  # four disjoint sampler streams per run seed

    cdf_x, = estimate_cdfs(input_pair_sampler(dataset, op, cfg.sigma, base),
                           T, params, op, cfg.steps, cfg.n_samples)
    pcdf_x, pcdf_th = estimate_cdfs(
        param_pair_sampler(dataset, op, cfg.sigma, cfg.eps_ball, params,
                           base + 1),
        T, params, op, cfg.steps, cfg.n_samples)

    bound_rows, curve_rows, freqs = [], [], {}
    trial_in = input_pair_sampler(dataset, op, cfg.sigma, base + 2)
    curves = []
    for i in range(cfg.n_trials):
        y, xi, xi_t = trial_in(i)
        curve, z_gap = input_difference_curve(y, xi, xi_t, T, params, op,
                                              cfg.steps)
        curves.append((curve, z_gap))
        curve_rows.extend([i, s, v, z_gap] for s, v in enumerate(curve))
    for delta in cfg.deltas:
        unit = stability_bound_input(delta, cdf_x, T, cfg.steps, op,
                                     a_init, 1.0)
        bound_rows.extend(["input", delta, s, v]
                          for s, v in enumerate(unit.values))
        hits = sum(bool(np.any(c > unit.values * gap)) for c, gap in curves)
        freqs[f"input_delta_{delta:g}"] = hits / cfg.n_trials
    _write_csv(os.path.join(run_dir, "curves_input.csv"),
               ["sample", "s", "gap", "z_gap"], curve_rows)

    trial_par = param_pair_sampler(dataset, op, cfg.sigma, cfg.eps_ball,
                                   params, base + 3)
    pcurve_rows, pcurves = [], []
    for i in range(cfg.n_trials):
        y, xi, tilde = trial_par(i)
        curve, gap = param_difference_curve(y, xi, tilde, T, params, op,
                                            cfg.steps)
        pcurves.append((curve, gap))
        pcurve_rows.extend([i, s, v, gap] for s, v in enumerate(curve))
    for delta in cfg.deltas:
        unit = stability_bound_params(delta, pcdf_x, pcdf_th, T, cfg.steps,
                                      op, 1.0)
        bound_rows.extend(["params", delta, s, v]
                          for s, v in enumerate(unit.values))
        hits = sum(bool(np.any(c > unit.values * gap)) for c, gap in pcurves)
        freqs[f"params_delta_{delta:g}"] = hits / cfg.n_trials
    _write_csv(os.path.join(run_dir, "curves_params.csv"),
               ["sample", "s", "gap", "theta_gap"], pcurve_rows)
    _write_csv(os.path.join(run_dir, "bounds.csv"),
               ["mode", "delta", "s", "unit_gap_bound"], bound_rows)

    margin = {d: float(d + 3.0 * np.sqrt(d * (1 - d) / cfg.n_trials))
              for d in cfg.deltas}
    return {"T": T, "n_samples": cfg.n_samples, "n_trials": cfg.n_trials,
            "violation_frequency": freqs,
            "frequency_threshold": {f"delta_{d:g}": margin[d]
                                    for d in cfg.deltas}}


def cmd_eigen(cfg: ExperimentConfig, run_dir: str) -> dict:
    params, _ = _checkpoint(cfg)
    x_init = _eval_images(cfg)[0]
    trace = []
    result = eigen_extract(x_init, params,
                           cfg=NagConfig(max_steps=cfg.eigen_steps),
                           callback=lambda it, x, fx: trace.append([it, fx]))
    _write_csv(os.path.join(run_dir, "eigen_trace.csv"),
               ["iter", "objective"], trace)
    ext = _img_ext(cfg)
    save_image(x_init, os.path.join(run_dir, f"eigen_init.{ext}"))
    save_image(result.x, os.path.join(run_dir, f"eigen.{ext}"))
    grad_norm = float(np.linalg.norm(tdv_grad(result.x, params)))
    rel = np.sqrt(2.0 * result.residual) / grad_norm if grad_norm else 0.0
    return {"eigenvalue": float(result.eigenvalue),
            "objective": float(result.residual),
            "relative_residual": float(rel), "iterations": len(trace)}


def cmd_attack(cfg: ExperimentConfig, run_dir: str) -> dict:
    params, T = _checkpoint(cfg)
    op = cfg.operator(cfg.image_size, cfg.image_size)
    y = _eval_images(cfg)[0]
    rng = np.random.default_rng([cfg.seed, _OBS, 0])
    xi = cfg.sigma * rng.standard_normal(op.data_shape)
    ext = _img_ext(cfg)
    rows, warm = [], None
    losses = {}
    for eps in (0.0,) + tuple(sorted(cfg.attack_eps)):
        d, out = adversarial_attack(y, xi, eps, T, params, op, cfg.steps,
                                    steps=cfg.attack_steps, xi_init=warm)
        warm = d
        val = float(np.sum((out - y) ** 2))
        losses[f"eps_{eps:g}"] = val
        rows.append([eps, val, float(np.linalg.norm(d)), _psnr_y(out, y)])
        save_image(out, os.path.join(run_dir, f"attacked_eps{eps:g}.{ext}"))
    _write_csv(os.path.join(run_dir, "attack.csv"),
               ["eps", "loss", "perturbation_norm", "psnr"], rows)
    return {"T": T, "losses": losses}


def cmd_genbound(cfg: ExperimentConfig, run_dir: str) -> dict:
    params, T = _checkpoint(cfg)
    op = cfg.operator(cfg.image_size, cfg.image_size)
    if cfg.data_dir:
        images = _load_dir_images(cfg)
    else:
        images = make_synthetic_images(count=16, size=max(96, cfg.image_size),
                                       channels=cfg.channels, seed=cfg.seed)
    dataset = Dataset(images, patch_size=cfg.image_size)
    xi = cfg.sigma * np.random.default_rng(
        [cfg.seed, _XI_FIXED]).standard_normal(op.data_shape)
    patch_set = []
    for i in range(cfg.n_samples):
        rng = np.random.default_rng([cfg.seed, _PATCHES, i])
        patch_set.append((dataset.sample(rng), xi))

    energies = np.array([tdv_energy(y, params) for y, _ in patch_set])
    losses = patch_losses(patch_set, T, params, op, cfg.steps)
    _write_csv(os.path.join(run_dir, "loss_vs_energy.csv"),
               ["patch", "energy", "loss"],
               [[i, e, l] for i, (e, l) in enumerate(zip(energies, losses))])
    regression = loss_energy_regression(losses, energies)

    cdf = EmpiricalCdf.from_samples(energies)
    ext = _img_ext(cfg)
    rows, bounds = [], {}
    for q in cfg.q_levels:
        h_q = cdf.quantile(q)
        keep = energies <= h_q
        # warm start at the worst feasible patch: ascent only improves it
        start = patch_set[int(np.flatnonzero(keep)[
            np.argmax(losses[keep])])][0]
        y_q, bound = generalization_bound(
            patch_set, q, xi, T, params, op, cfg.steps,
            barrier_weight=cfg.barrier_weight,
            cfg=NagConfig(max_steps=cfg.solver_steps), y_init=start)
        e_emp = float(losses[keep].mean())
        bound = float(bound)
        rows.append([q, h_q, e_emp, bound + e_emp, bound])
        bounds[f"q_{q:g}"] = bound
        save_image(y_q, os.path.join(run_dir, f"worst_q{q:g}.{ext}"))
    _write_csv(os.path.join(run_dir, "genbound.csv"),
               ["q", "h_q", "empirical_risk", "worst_loss", "bound"], rows)
    return {"T": T, "n_patches": cfg.n_samples, "bounds": bounds,
            "loss_energy_fit": regression}


def cmd_report(run_dir: str) -> str:
    cfg_path = os.path.join(run_dir, "config.cfg")
    sum_path = os.path.join(run_dir, "summary.json")
    with open(sum_path, "r", encoding="ascii") as f:
        summary = json.load(f)
    with open(cfg_path, "r", encoding="ascii") as f:
        cfg_text = f.read()
    lines = [f"run directory: {run_dir}",
             f"command: {summary.get('command', '?')}", "", "summary:"]
    lines += [f"  {k} = {v}" for k, v in sorted(summary.items())
              if k != "command"]
    lines += ["", "config snapshot:"]
    lines += ["  " + ln for ln in cfg_text.splitlines()]
    csvs = sorted(n for n in os.listdir(run_dir) if n.endswith(".csv"))
    if csvs:
        lines += ["", "tables: " + ", ".join(csvs)]
    text = "\n".join(lines) + "\n"
    with open(os.path.join(run_dir, "report.txt"), "w",
              encoding="ascii") as f:
        f.write(text)
    return text


_HANDLERS = {
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "sweep-T": cmd_sweep_t,
    "stability": cmd_stability,
    "eigen": cmd_eigen,
    "attack": cmd_attack,
    "genbound": cmd_genbound,
}


def _make_run_dir(out_flag, cfg: ExperimentConfig, command: str) -> str:
    if out_flag:
        os.makedirs(out_flag, exist_ok=True)
        return out_flag
    root = cfg.out_dir or "runs"
    stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
    path = os.path.join(root, f"{command}-{stamp}")
    k = 1
    while os.path.exists(path):
        k += 1
        path = os.path.join(root, f"{command}-{stamp}-{k}")
    os.makedirs(path)
    return path


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tdv",
        description="TDV regularizer experiments: training, reconstruction, "
                    "and stability/eigenfunction/attack/generalization "
                    "analyses.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "fit (T, theta) on patches via sampled optimal control",
        "reconstruct": "run the learned flow on evaluation images",
        "sweep-T": "evaluate multiples of the trained stopping time",
        "stability": "Monte-Carlo input/parameter stability bounds",
        "eigen": "extract a nonlinear eigenfunction of the regularizer",
        "attack": "worst-case data perturbations of growing radius",
        "genbound": "empirical generalization bound over patch sets",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="config file path")
        p.add_argument("--out", help="exact run directory (default: "
                                     "timestamped under [paths] out_dir)")
    rep = sub.add_parser("report", help="summarize an existing run directory")
    rep.add_argument("run_dir")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "report":
            sys.stdout.write(cmd_report(args.run_dir))
            return 0
        cfg = load_config(args.config)
        run_dir = _make_run_dir(args.out, cfg, args.command)
        save_config(cfg, os.path.join(run_dir, "config.cfg"))
        summary = _HANDLERS[args.command](cfg, run_dir)
        summary["command"] = args.command
        with open(os.path.join(run_dir, "summary.json"), "w",
                  encoding="ascii") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
            f.write("\n")
        print(f"{args.command}: wrote {run_dir}")
        return 0
    except ConfigError as err:
        print(f"tdv: config error: {err}", file=sys.stderr)
        return 2
    except NumericError as err:
        print(f"tdv: numerical failure: {err}", file=sys.stderr)
        return 3
    except (FormatError, OSError) as err:
        print(f"tdv: i/o error: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
