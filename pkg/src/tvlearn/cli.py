"""Command line front end.

Four subcommands cover the whole working loop: ``noise`` corrupts clean
images reproducibly, ``learn`` estimates a spatially varying fidelity
weight from training pairs, ``denoise`` applies a weight (field or
constant) to a single image, and ``eval`` scores a candidate
reconstruction against a clean reference.

Exit codes: 0 success, 2 usage error, 3 solver failure, 4 I/O or data
format error.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

from . import data as data_io
from .denoise import tv_denoise
from .errors import DataFormatError, SolverError
from .grid import GridSpec, ScalarField
from .huber import HuberParams
from .metrics import psnr, ssim
from .schwarz import dd_solve, write_dd_csv
from .ssn import SsnConfig, consistent_initial_state
from .system import ModelParams, ProblemData

# ---------------------------------------------------------------------------
# argument parsing


def _add_out_dir(sp):
    sp.add_argument(
        "--out-dir",
        required=True,
        metavar="DIR",
        help="directory for all output files (created if missing)",
    )


def _parse_region(text: str):
    toks = text.replace(",", " ").split()
    if len(toks) != 5:
        raise argparse.ArgumentTypeError(
            f"region needs 'i0 j0 di dj sigma', got {text!r}"
        )
    try:
        rect = tuple(int(t) for t in toks[:4])
        sigma = float(toks[4])
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))
    return rect, sigma


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tvlearn",
        description="Learn and apply spatially varying TV denoising weights.",
    )
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    q = sub.add_parser(
        "noise",
        help="add reproducible Gaussian noise to images",
        description="Corrupt a single image, or every pair image of a "
        "manifest, with seeded Gaussian noise.  Outputs are deterministic "
        "for fixed flags.",
    )
    src = q.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest", metavar="INI", help="training manifest")
    src.add_argument("--image", metavar="FILE", help="single clean image")
    q.add_argument("--sigma", type=float, default=0.05, help="base noise level")
    q.add_argument("--seed", type=int, default=0, help="noise stream seed")
    q.add_argument(
        "--region",
        action="append",
        default=[],
        type=_parse_region,
        metavar="'I0 J0 DI DJ SIGMA'",
        help="extra noise inside a window; repeatable",
    )
    _add_out_dir(q)
    q.set_defaults(func=cmd_noise)

    q = sub.add_parser(
        "learn",
        help="learn a weight field from a training manifest",
        description="Solve the training problem on overlapping strips and "
        "write the learned weight raster, a per-strip report CSV, preview "
        "images, and diagnostic figures.",
    )
    q.add_argument("--manifest", required=True, metavar="INI")
    q.add_argument("--subdomains", type=int, default=2, metavar="M")
    q.add_argument("--overlap", type=int, default=20, metavar="L")
    q.add_argument(
        "--kind",
        choices=("classical", "optimized"),
        default="optimized",
        help="transmission condition family",
    )
    q.add_argument("--outer-iters", type=int, default=2)
    q.add_argument("--threads", type=int, default=1, help="parallel strip solves")
    q.add_argument(
        "--mode",
        choices=("exact", "projected"),
        default="projected",
        help="Newton linearization variant",
    )
    q.add_argument("--tol", type=float, default=1e-8, help="residual tolerance")
    q.add_argument("--max-iter", type=int, default=50, help="Newton cap per strip")
    q.add_argument(
        "--lambda-init", type=float, default=1.0, help="initial constant weight"
    )
    q.add_argument(
        "--gap-tol",
        type=float,
        default=None,
        help="stop outer loop once the overlap gap drops below this",
    )
    q.add_argument(
        "--verbose", action="store_true", help="stream per-iteration logs"
    )
    _add_out_dir(q)
    q.set_defaults(func=cmd_learn)

    q = sub.add_parser(
        "denoise",
        help="denoise one image with a fixed weight",
        description="Apply a learned weight raster, or a constant, to a "
        "single image.",
    )
    q.add_argument("--image", required=True, metavar="FILE")
    q.add_argument(
        "--lambda",
        dest="lam",
        required=True,
        metavar="RASTER|CONST",
        help="weight raster file, or a constant if the value parses as a number",
    )
    q.add_argument("--clean", metavar="FILE", help="reference for the metrics row")
    q.add_argument("--gamma", type=float, default=50.0)
    q.add_argument("--mu", type=float, default=1e-13)
    q.add_argument("--beta", type=float, default=1e-9)
    q.add_argument("--h", type=float, default=1.0, help="grid spacing")
    _add_out_dir(q)
    q.set_defaults(func=cmd_denoise)

    q = sub.add_parser(
        "eval",
        help="score a candidate image against a clean reference",
        description="Print a CSV row with SSIM and PSNR of candidate vs "
        "clean; optionally append it to a file.",
    )
    q.add_argument("--clean", required=True, metavar="FILE")
    q.add_argument("--candidate", required=True, metavar="FILE")
    q.add_argument("--out", metavar="CSV", help="also write the CSV here")
    q.set_defaults(func=cmd_eval)

    return p


# ---------------------------------------------------------------------------
# subcommands


def _pair_stub(pair_id: str, index: int) -> str:
    tag = pair_id.rsplit("#", 1)[0]
    return f"{tag}_{index:02d}"


def cmd_noise(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    if args.manifest is not None:
        pairs, _, _, _ = data_io.load_manifest(args.manifest)
        for index, pair in enumerate(pairs):
            out = os.path.join(args.out_dir, _pair_stub(pair.id, index) + "_noisy.png")
            data_io.save_image(pair.noisy, out)
            print(f"[noise] wrote {out}")
        return 0
    img = data_io.load_image(args.image)
    spec = data_io.NoiseSpec(
        base_sigma=args.sigma, seed=args.seed, regions=list(args.region)
    )
    spec.check_inside(img.grid)
    noisy = data_io.add_noise(img, spec)
    stem, ext = os.path.splitext(os.path.basename(args.image))
    out = os.path.join(args.out_dir, f"{stem}_noisy{ext}")
    data_io.save_image(noisy, out)
    print(f"[noise] wrote {out}")
    return 0


def _render_figures(out_dir: str, lam: ScalarField, records, m_sub: int) -> None:
    """Weight heatmap and convergence panels, rendered headless."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.4, 3.6))
    image = ax.imshow(lam.values, origin="upper", cmap="viridis")
    fig.colorbar(image, ax=ax, shrink=0.85, label="weight")
    ax.set_title("learned fidelity weight")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "lambda_map.png"), dpi=150)
    plt.close(fig)

    outers = sorted({r.outer_iter for r in records})
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.2, 3.2))
    for j in range(m_sub):
        res = [r.residual for r in records if r.subdomain == j]
        ax1.semilogy(outers, res, marker="o", label=f"strip {j}")
    ax1.set_xlabel("outer iteration")
    ax1.set_ylabel("final Newton residual")
    ax1.set_xticks(outers)
    ax1.legend(fontsize=8)
    gaps = [
        max(r.gap_lambda for r in records if r.outer_iter == k) for k in outers
    ]
    if max(gaps) > 0.0:
        ax2.semilogy(outers, gaps, marker="s", color="tab:red")
    else:
        ax2.plot(outers, gaps, marker="s", color="tab:red")
    ax2.set_xlabel("outer iteration")
    ax2.set_ylabel("overlap gap")
    ax2.set_xticks(outers)
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "convergence.png"), dpi=150)
    plt.close(fig)


def cmd_learn(args) -> int:
    t0 = time.perf_counter()
    pairs, _, params, grid = data_io.load_manifest(args.manifest)
    problem = ProblemData(
        f=[p.noisy for p in pairs], u_dag=[p.clean for p in pairs]
    )
    os.makedirs(args.out_dir, exist_ok=True)
    config = SsnConfig(
        tol=args.tol,
        max_iter=args.max_iter,
        mode=args.mode,
        lambda_init=args.lambda_init,
        log_stream=sys.stdout if args.verbose else None,
    )
    print(
        f"[learn] {len(pairs)} pairs on a {grid.m}x{grid.l} grid (h={grid.h:g}), "
        f"M={args.subdomains} overlap={args.overlap} kind={args.kind} "
        f"mode={args.mode}"
    )
    y0 = consistent_initial_state(problem, params, args.lambda_init)
    y, records = dd_solve(
        y0,
        problem,
        params,
        M=args.subdomains,
        L=args.overlap,
        kind=args.kind,
        outer_iters=args.outer_iters,
        config=config,
        gap_tol=args.gap_tol,
        threads=args.threads,
    )

    raster = os.path.join(args.out_dir, "lambda.bin")
    data_io.save_lambda(y.lam, raster)
    with open(os.path.join(args.out_dir, "report.csv"), "w") as fh:
        write_dd_csv(records, fh)
    for index, pair in enumerate(pairs):
        out = os.path.join(args.out_dir, _pair_stub(pair.id, index) + "_denoised.png")
        data_io.save_image(y.u[index], out)
    _render_figures(args.out_dir, y.lam, records, args.subdomains)

    last_outer = max(r.outer_iter for r in records)
    final = [r for r in records if r.outer_iter == last_outer]
    converged = all(r.residual <= config.tol for r in final)
    for r in final:
        print(
            f"[learn] strip {r.subdomain}: {r.ssn_iters} Newton iterations, "
            f"residual {r.residual:.3e}"
        )
    wall = time.perf_counter() - t0
    print(
        f"[learn] converged={str(converged).lower()} "
        f"gap={max(r.gap_lambda for r in final):.3e} "
        f"weight range [{y.lam.values.min():.3g}, {y.lam.values.max():.3g}] "
        f"wall={wall:.1f}s"
    )
    print(f"[learn] wrote {raster}")
    return 0


def cmd_denoise(args) -> int:
    img = data_io.load_image(args.image)
    params = ModelParams(
        mu=args.mu, beta=args.beta, huber=HuberParams(args.gamma), n_train=1
    )
    try:
        lam = float(args.lam)
        lam_label = f"{lam:g}"
    except ValueError:
        field = data_io.load_lambda(args.lam, h=args.h)
        if field.grid.shape != img.grid.shape:
            raise DataFormatError(
                f"{args.lam}: weight raster shape {field.grid.shape} does not "
                f"match image shape {img.grid.shape}"
            )
        lam = field
        lam_label = os.path.basename(args.lam)
    if args.h != 1.0:
        g = GridSpec(img.grid.m, img.grid.l, args.h)
        img = ScalarField(g, img.values)
        if isinstance(lam, ScalarField):
            lam = ScalarField(g, lam.values)
    u = tv_denoise(img, lam, params)

    os.makedirs(args.out_dir, exist_ok=True)
    stem, ext = os.path.splitext(os.path.basename(args.image))
    out = os.path.join(args.out_dir, f"{stem}_denoised{ext}")
    data_io.save_image(u, out)

    if args.clean is not None:
        ref = data_io.load_image(args.clean)
        ref = ScalarField(img.grid, ref.values)
        ref_label = os.path.basename(args.clean)
    else:
        ref = img
        ref_label = "input"
    row = f"{stem},{lam_label},{ref_label},{ssim(ref, u):.6f},{psnr(ref, u):.4f}"
    header = "image,lambda,reference,ssim,psnr"
    with open(os.path.join(args.out_dir, "metrics.csv"), "w") as fh:
        fh.write(header + "\n" + row + "\n")
    print(header)
    print(row)
    print(f"[denoise] wrote {out}")
    return 0


def cmd_eval(args) -> int:
    clean = data_io.load_image(args.clean)
    cand = data_io.load_image(args.candidate)
    if clean.grid.shape != cand.grid.shape:
        raise DataFormatError(
            f"shape mismatch: {args.clean} is {clean.grid.shape}, "
            f"{args.candidate} is {cand.grid.shape}"
        )
    header = "clean,candidate,ssim,psnr"
    row = (
        f"{os.path.basename(args.clean)},{os.path.basename(args.candidate)},"
        f"{ssim(clean, cand):.6f},{psnr(clean, cand):.4f}"
    )
    print(header)
    print(row)
    if args.out:
        exists = os.path.exists(args.out)
        with open(args.out, "a") as fh:
            if not exists:
                fh.write(header + "\n")
            fh.write(row + "\n")
    return 0


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except SolverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except DataFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
