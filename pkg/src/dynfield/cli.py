"""Command-line experiment driver.

Every command reads a YAML configuration layered over a built-in profile,
writes into ``<output root>/<command>/`` and echoes the resolved
configuration to ``<output root>/config.yaml``. Reports contain only
deterministic quantities; wall times go to separate ``timing.csv`` files.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import analysis as an
from . import classical as cl
from . import config as cf
from . import io
from . import operators as ops
from . import pounet as pn
from . import training as tr
from .phantom import GridImage, phantom_default, render

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------------
# small helpers


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, columns, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(columns)] + [",".join(_fmt(r[c]) for c in columns) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def write_png(path: Path, frame: np.ndarray, lo: float, hi: float) -> Path:
    from PIL import Image

    if hi > lo:
        g = np.clip((frame - lo) / (hi - lo), 0.0, 1.0)
    else:
        g = np.zeros_like(frame)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(g * 255).astype(np.uint8), mode="L").save(path, optimize=False)
    return path


def render_frames(img: GridImage, out_dir: Path, window=None, prefix: str = "frame") -> tuple[float, float]:
    """Numbered grayscale PNGs sharing one window across the sequence."""
    lo, hi = window if window is not None else (float(img.values.min()), float(img.values.max()))
    for k in range(img.n_frames):
        write_png(out_dir / f"{prefix}_{k:03d}.png", img.frame(k), lo, hi)
    return lo, hi


class Run:
    """Resolved configuration plus the output layout of one invocation."""

    def __init__(self, cfg: cf.ExperimentConfig):
        self.cfg = cfg
        self.hash = cfg.digest()
        self.root = cfg.output_root()
        self.timing = []

    def dir(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.mkdir(parents=True, exist_ok=True)
        return p

    def echo_config(self):
        self.dir()
        (self.root / "config.yaml").write_text(self.cfg.to_yaml())

    def check_hash(self, meta: dict, path):
        h = meta.get("config_hash", "")
        if h != self.hash:
            raise UsageError(f"{path} was produced with config hash {h!r}, current is {self.hash!r}; "
                             "rerun the upstream command or use a separate output root")

    def timed(self, label, fn, *args, **kw):
        t0 = time.perf_counter()
        out = fn(*args, **kw)
        self.timing.append({"step": label, "seconds": time.perf_counter() - t0})
        return out

    def write_timing(self, sub: str):
        write_csv(self.dir(sub) / "timing.csv", ("step", "seconds"), self.timing)

    @property
    def cache(self) -> Path:
        return self.dir("cache")

    @property
    def n_side(self) -> int:
        return self.cfg.system.pixels_per_side_Ns

    @property
    def n_gen(self) -> int:
        return self.n_side * self.cfg.generation_factor


# ----------------------------------------------------------------------------
# phantom


def make_phantom(cfg: cf.ExperimentConfig):
    return phantom_default(cfg.phantom_seed, cfg.system.fov_size_L, cfg.system.acquisition_T)


def cmd_phantom(run: Run) -> dict:
    cfg = run.cfg
    ph = make_phantom(cfg)
    out = run.dir("phantom")
    gen = run.timed("render_generation", render, ph, cfg.system, cfg.supersample, run.n_gen)
    rec = run.timed("render_reconstruction", render, ph, cfg.system, cfg.supersample, run.n_side)
    io.save_grid_image(out / "truth_gen.img", gen, run.hash)
    io.save_grid_image(out / "truth.img", rec, run.hash)
    render_frames(rec, out / "preview")
    run.write_timing("phantom")
    return {"generation": gen, "reconstruction": rec}


def load_truth(run: Run, which: str = "truth") -> GridImage:
    path = run.root / "phantom" / f"{which}.img"
    if not path.exists():
        cmd_phantom(run)
    img, meta = io.load_grid_image(path)
    run.check_hash(meta, path)
    return img


# ----------------------------------------------------------------------------
# simulate


def simulate_point(run: Run, value) -> tuple[ops.Sinogram, ops.Sinogram]:
    cfg = run.cfg
    sysp = cfg.point_system(value)
    gen = load_truth(run, "truth_gen")
    op = run.timed(f"operator_{cfg.point_name(value)}", io.cached_operator, run.cache, sysp, run.n_gen)
    clean = ops.Sinogram(ops.forward_all(op, gen.values), 0.0, sysp)
    noisy = ops.add_noise(clean, sysp.relative_noise, cfg.noise_seed)
    out = run.dir("simulate", cfg.point_name(value))
    io.save_sinogram(out / "clean.sino", clean, run.hash)
    io.save_sinogram(out / "noisy.sino", noisy, run.hash, relative_noise=sysp.relative_noise)
    return clean, noisy


def cmd_simulate(run: Run) -> list:
    rows = []
    for v in run.cfg.sweep_values:
        clean, noisy = simulate_point(run, v)
        rows.append({"point": run.cfg.point_name(v), "S": clean.system.views_per_frame_S,
                     "relative_noise": clean.system.relative_noise, "sigma": noisy.sigma,
                     "n_measurements": noisy.n_measurements, "clean_max": float(np.max(np.abs(clean.frames)))})
    write_csv(run.dir("simulate") / "report.csv",
              ("point", "S", "relative_noise", "sigma", "n_measurements", "clean_max"), rows)
    run.write_timing("simulate")
    return rows


def load_noisy(run: Run, value) -> ops.Sinogram:
    path = run.root / "simulate" / run.cfg.point_name(value) / "noisy.sino"
    if not path.exists():
        simulate_point(run, value)
    d, meta = io.load_sinogram(path)
    run.check_hash(meta, path)
    return d


# ----------------------------------------------------------------------------
# embed


EMBED_COLUMNS = ("method", "rank", "params", "rrmse", "ssim", "eckart_young_rrmse")


def cmd_embed(run: Run) -> list:
    cfg, es = run.cfg, run.cfg.embed
    sysd = cfg.system
    truth = load_truth(run)
    N, K = truth.values.shape
    out = run.dir("embed")
    ph = make_phantom(cfg)
    xi0 = tr.build_template(sysd, cfg.train)
    xi, rep = run.timed("nf_embedding", tr.embed_field, ph, xi0, epochs=es.epochs,
                        steps_per_epoch=es.steps_per_epoch, samples=es.samples, lr_eta0=es.lr_eta0,
                        lr_total_decay=es.lr_total_decay, c_samples=es.c_samples, seed=cfg.train.seed)
    nf_img = an.render_field(xi, sysd)
    io.save_pounet(out / "nf.pounet", xi, run.hash)
    io.save_grid_image(out / "nf.img", nf_img, run.hash)
    (out / "training.csv").write_text(rep.to_csv())
    n_nf = pn.count_params(xi)
    r_eq = an.equivalent_rank(n_nf, N, K)
    spec = an.singular_spectrum(truth)
    total = float(np.sum(spec**2))
    rows = [{"method": "nf", "rank": r_eq, "params": n_nf, "rrmse": an.rrmse(nf_img, truth),
             "ssim": an.ssim(nf_img, truth), "eckart_young_rrmse": None}]
    ranks = sorted(set(es.ranks) | ({r_eq} if r_eq >= 1 else set()))
    ss_imgs = {}
    for r in ranks:
        approx = an.truncated_svd(truth, r)
        img = GridImage(approx.reconstruct(), truth.pixel_pitch, truth.frame_times)
        ss_imgs[r] = img
        rows.append({"method": "ss", "rank": r, "params": approx.n_params, "rrmse": an.rrmse(img, truth),
                     "ssim": an.ssim(img, truth), "eckart_young_rrmse": float(np.sqrt(np.sum(spec[r:] ** 2) / total))})
    write_csv(out / "report.csv", EMBED_COLUMNS, rows)
    # time-activity curves
    pts = np.asarray(es.tac_points, dtype=float)
    series = {"truth": an.time_activity(truth, pts, sysd), "nf": an.time_activity(nf_img, pts, sysd)}
    for r, img in ss_imgs.items():
        series[f"ss{r}"] = an.time_activity(img, pts, sysd)
    cols = ["time"] + [f"{name}_p{i}" for name in series for i in range(len(pts))]
    tac_rows = []
    for k, t in enumerate(truth.frame_times):
        row = {"time": float(t)}
        for name, s in series.items():
            for i in range(len(pts)):
                row[f"{name}_p{i}"] = float(s[i, k])
        tac_rows.append(row)
    write_csv(out / "tac.csv", cols, tac_rows)
    render_frames(nf_img, out / "frames_nf", (float(truth.values.min()), float(truth.values.max())))
    run.write_timing("embed")
    return rows


# ----------------------------------------------------------------------------
# reconstruct


RECON_COLUMNS = ("point", "method", "S", "relative_noise", "gamma", "residual2", "threshold", "flagged",
                 "rrmse", "ssim", "params", "rank")


def _pw_solver(run: Run, d: ops.Sinogram, regularizer: str):
    cfg = run.cfg
    op = io.cached_operator(run.cache, d.system, run.n_side)
    step = 1.0 / cl.lipschitz_estimate(op, d.sigma if d.sigma > 0 else 1.0, seed=cfg.train.seed)
    ps = cfg.prox

    def solve(gamma):
        prob = cl.ProxProblem(op, d, gamma, regularizer, step=step, max_iter=ps.max_iter,
                              tv_inner_iter=ps.tv_inner_iter, time_weight=ps.time_weight, n_side=run.n_side,
                              tol=ps.tol)
        F, rep = cl.fista(prob)
        r = cl.apply_blocks(op, F) - d.frames
        return (F, rep), float(np.sum(r * r))

    return solve


def _nf_solver(run: Run, d: ops.Sinogram, out: Path):
    cfg = run.cfg
    tcfg = cfg.train
    dd = tr.noiseless_sigma(d)
    xi0 = tr.build_template(d.system, tcfg)
    srep = None
    if tcfg.static_init:
        xi0, srep = tr.init_static(dd, d.system, xi0, tcfg, cfg.c2d_quadrature)
    problem = tr.FidelityProblem(dd, cfg.c2d_quadrature)

    def solve(gamma):
        ck = out / "checkpoints" / f"gamma_{gamma:.6g}"

        def save(it, xi):
            io.save_pounet(ck / f"iter_{it:03d}.pounet", xi, run.hash, gamma=gamma, iteration=it)

        xi, rep = tr.reconstruct_nf(d, d.system, tcfg.replace(tv_weight_gamma=gamma), cfg.c2d_quadrature,
                                    init=xi0, checkpoint=save)
        rep.static_rows = srep.rows if srep is not None else []
        res2 = 2 * dd.sigma**2 * problem.fidelity(xi)
        return (xi, rep), res2

    return solve


def reconstruct_job(cfg: cf.ExperimentConfig, value, method: str) -> tuple[dict, list]:
    """One (sweep point, method) job; writes its own subdirectory and returns the report row."""
    run = Run(cfg)
    d = load_noisy(run, value)
    truth = load_truth(run)
    N, K = truth.values.shape
    name = cfg.point_name(value)
    out = run.dir("reconstruct", name, method)
    if method == "nf-tv":
        solve = _nf_solver(run, d, out)
    elif method in ("pw-tv", "pw-nn"):
        solve = _pw_solver(run, d, "tv" if method == "pw-tv" else "nuclear")
    else:
        raise UsageError(f"method {method!r} has no reconstruction (use the embed command for ss)")
    g = cfg.grids.get(method)
    if g is None:
        raise UsageError(f"no gamma grid configured for {method}")
    grid = cl.geometric_grid(g.center, g.n, g.ratio)
    sigma = d.sigma if d.sigma > 0 else 1.0
    t0 = time.perf_counter()
    gamma, (sol, srep), mrep = cl.morozov_search(solve, sigma, d.n_measurements, grid)
    seconds = time.perf_counter() - t0
    write_csv(out / "morozov.csv", ("gamma", "residual2", "threshold", "satisfied"),
              [{"gamma": gm, "residual2": r2, "threshold": mrep.threshold, "satisfied": r2 <= mrep.threshold}
               for gm, r2 in mrep.tried])
    if method == "nf-tv":
        img = an.render_field(sol, d.system, run.n_side)
        io.save_pounet(out / "nf.pounet", sol, run.hash)
        (out / "training.csv").write_text(srep.to_csv())
        if srep.static_rows:
            (out / "training_static.csv").write_text(srep.to_csv(srep.static_rows))
        params, rank = pn.count_params(sol), None
    else:
        img = GridImage(sol, truth.pixel_pitch, truth.frame_times)
        if method == "pw-nn":
            rank = srep.rank
            params = an.ss_param_count(rank, N, K)
        else:
            params, rank = N * K, None
    io.save_grid_image(out / "recon.img", img, run.hash, gamma=gamma, method=method)
    render_frames(img, out / "frames", (float(truth.values.min()), float(truth.values.max())))
    row = {"point": name, "method": method, "S": d.system.views_per_frame_S,
           "relative_noise": d.system.relative_noise, "gamma": gamma, "residual2": mrep.tried[-1][1],
           "threshold": mrep.threshold, "flagged": mrep.flagged, "rrmse": an.rrmse(img, truth),
           "ssim": an.ssim(img, truth), "params": params, "rank": rank}
    write_csv(out / "report.csv", RECON_COLUMNS, [row])
    return row, [{"step": f"{name}/{method}", "seconds": seconds}]


def cmd_reconstruct(run: Run, methods=None, points=None) -> list:
    cfg = run.cfg
    methods = tuple(methods or [m for m in cfg.methods if m != "ss"])
    values = cfg.sweep_values if points is None else _select_points(cfg, points)
    for v in values:  # shared inputs are produced up front so jobs never race on them
        load_noisy(run, v)
        if any(m.startswith("pw") for m in methods):
            io.cached_operator(run.cache, cfg.point_system(v), run.n_side)
    jobs = [(v, m) for v in values for m in methods]
    if cfg.jobs > 1 and len(jobs) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(reconstruct_job, [cfg] * len(jobs), *zip(*jobs)))
    else:
        results = [reconstruct_job(cfg, v, m) for v, m in jobs]
    rows = [r for r, _ in results]
    for _, t in results:
        run.timing.extend(t)
    write_csv(run.dir("reconstruct") / "report.csv", RECON_COLUMNS, rows)
    run.write_timing("reconstruct")
    return rows


def _select_points(cfg, points):
    names = {cfg.point_name(v): v for v in cfg.sweep_values}
    out = []
    for p in points:
        if p not in names:
            raise UsageError(f"unknown sweep point {p!r}; available: {', '.join(names)}")
        out.append(names[p])
    return out


# ----------------------------------------------------------------------------
# svd, render, metrics


def cmd_svd(run: Run) -> list:
    truth = load_truth(run)
    s = an.singular_spectrum(truth)
    total = float(np.sum(s**2))
    rows = [{"index": i + 1, "singular_value": float(v), "energy_fraction": float(np.sum(s[: i + 1] ** 2) / total),
             "tail_rrmse": float(np.sqrt(np.sum(s[i + 1:] ** 2) / total))} for i, v in enumerate(s)]
    write_csv(run.dir("svd") / "spectrum.csv", ("index", "singular_value", "energy_fraction", "tail_rrmse"), rows)
    return rows


def _load_any_image(path) -> tuple[GridImage, dict]:
    try:
        return io.load_grid_image(path)
    except (OSError, io.FormatError) as exc:
        raise UsageError(f"cannot read image {path}: {exc}") from exc


def cmd_render(path, out_dir, window=None, prefix="frame") -> tuple[float, float]:
    img, _ = _load_any_image(path)
    if window is not None and not window[1] >= window[0]:
        raise UsageError("window must satisfy min <= max")
    return render_frames(img, Path(out_dir), window, prefix)


def cmd_metrics(ref, others, allow_mixed: bool = False) -> list:
    ref_img, ref_meta = _load_any_image(ref)
    rows = []
    for p in others:
        img, meta = _load_any_image(p)
        if img.values.shape != ref_img.values.shape:
            raise UsageError(f"shape mismatch: {p} has {img.values.shape}, reference has {ref_img.values.shape}")
        if not allow_mixed and meta.get("config_hash", "") != ref_meta.get("config_hash", ""):
            raise UsageError(f"config hash mismatch between {ref} and {p} (pass --allow-mixed to compare anyway)")
        rows.append({"file": str(p), "rrmse": an.rrmse(img, ref_img), "ssim": an.ssim(img, ref_img)})
    return rows


# ----------------------------------------------------------------------------
# argument parsing


def _parse_set(items) -> dict:
    """``a.b=value`` pairs into a nested dict; values are parsed as YAML scalars."""
    out: dict = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(val)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynfield", description="Dynamic neural-field CRT reconstruction experiments")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument("--profile", choices=sorted(cf.PROFILES), help="base profile (default: desk)")
    common.add_argument("--output", help=f"output root (the {cf.OUTPUT_ENV} environment variable takes precedence)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry, e.g. train.width=48")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("phantom", parents=[common], help="render ground truth at generation and reconstruction resolution")
    sub.add_parser("simulate", parents=[common], help="clean and noisy sinograms for every sweep point")
    sub.add_parser("embed", parents=[common], help="fit the neural field to the phantom and compare low-rank baselines")
    r = sub.add_parser("reconstruct", parents=[common], help="Morozov-selected reconstructions for every sweep point")
    r.add_argument("--methods", nargs="+", choices=["nf-tv", "pw-tv", "pw-nn"])
    r.add_argument("--points", nargs="+", help="subset of sweep point names, e.g. S2 S8")
    sub.add_parser("svd", parents=[common], help="singular spectrum of the ground truth")
    rd = sub.add_parser("render", help="grayscale PNG frames of an image file")
    rd.add_argument("image")
    rd.add_argument("--out", required=True, help="output directory")
    rd.add_argument("--window", nargs=2, type=float, metavar=("MIN", "MAX"))
    rd.add_argument("--prefix", default="frame")
    m = sub.add_parser("metrics", help="RRMSE and SSIM of image files against a reference")
    m.add_argument("reference")
    m.add_argument("images", nargs="+")
    m.add_argument("--out", help="CSV path (default: stdout)")
    m.add_argument("--allow-mixed", action="store_true", help="compare files with different config hashes")
    return p


def _make_run(args) -> Run:
    overrides = _parse_set(args.set)
    if args.output:
        overrides["output"] = args.output
    cfg = cf.load(args.config, args.profile, overrides)
    run = Run(cfg)
    run.echo_config()
    return run


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        if args.command == "render":
            cmd_render(args.image, args.out, tuple(args.window) if args.window else None, args.prefix)
        elif args.command == "metrics":
            rows = cmd_metrics(args.reference, args.images, args.allow_mixed)
            text = "file,rrmse,ssim\n" + "".join(f"{r['file']},{_fmt(r['rrmse'])},{_fmt(r['ssim'])}\n" for r in rows)
            if args.out:
                Path(args.out).parent.mkdir(parents=True, exist_ok=True)
                Path(args.out).write_text(text)
            else:
                sys.stdout.write(text)
        else:
            run = _make_run(args)
            if args.command == "phantom":
                cmd_phantom(run)
            elif args.command == "simulate":
                cmd_simulate(run)
            elif args.command == "embed":
                cmd_embed(run)
            elif args.command == "reconstruct":
                cmd_reconstruct(run, args.methods, args.points)
            elif args.command == "svd":
                cmd_svd(run)
            print(f"{args.command}: wrote {run.root / args.command}")
    except (UsageError, cf.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (tr.TrainingError, cl.SolverError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
