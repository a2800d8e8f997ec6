"""``quantlab`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data-format error,
4 numeric or optimisation failure. ``QUANTLAB_THREADS`` caps BLAS threads.
"""

import argparse
import csv
import glob
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .activations import ActivationBatch, SyntheticSpec, channel_stats, generate_synthetic, read_dump, write_dump
from .asot import AsotConfig, select_threshold
from .config import parse_config, parse_grid
from .errors import ConfigError, QuantlabError, SelectionError
from .infometrics import bound_F, critical_kappa, tau_closed_form, token_metrics, MetricsReport
from .lac import DeskBlock, LacConfig, optimize_clipping
from .pipeline import REPORT_FILES, run_to_directory
from .psot import OrthoTransform, PsotConfig, peak_stats, read_transform, train_psot, write_transform
from .quantizer import QuantizerSpec, dequantize_tokens, quantize_tokens

log = logging.getLogger("quantlab")


def _expand(patterns):
    paths = []
    for pat in patterns:
        hits = sorted(glob.glob(pat))
        if not hits and not glob.has_magic(pat):
            hits = [pat]
        if not hits:
            raise ConfigError(f"no files match {pat!r}")
        paths.extend(hits)
    return paths


def _load(patterns):
    return [read_dump(p, sample_id=i) for i, p in enumerate(_expand(patterns))]


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def _guard(path, force):
    if path and Path(path).exists() and not force:
        raise ConfigError(f"{path} exists; use --force to overwrite")


# -- subcommands ------------------------------------------------------------------

def cmd_gen(a):
    spec = SyntheticSpec(family=a.family, dim=a.dim, n_tokens=a.n_tokens * a.samples, scale=a.scale,
                         outlier_rate=a.outlier_rate, outlier_gain=a.outlier_gain,
                         outlier_mode=a.outlier_mode, seed=a.seed)
    batch, truth = generate_synthetic(spec, return_truth=True)
    parts = np.split(batch.data, a.samples)
    if a.samples == 1:
        outs = [a.out]
    else:
        stem, suffix = os.path.splitext(a.out)
        outs = [f"{stem}_{r:03d}{suffix or '.actd'}" for r in range(a.samples)]
    for path in outs:
        _guard(path, a.force)
    for path, part in zip(outs, parts):
        write_dump(ActivationBatch(part), path)
    if a.truth_out:
        _guard(a.truth_out, a.force)
        _write_csv(a.truth_out, ["index"], [[int(i)] for i in truth])
    print(f"wrote {len(outs)} sample(s) of {a.n_tokens}x{a.dim}")


_SCHEME_ALIASES = {"affine": "affine_per_token", "affine_per_token": "affine_per_token",
                   "centered": "centered_clamped", "centered_clamped": "centered_clamped"}


def cmd_quantize(a):
    spec = QuantizerSpec(bits=a.bits, scheme=_SCHEME_ALIASES[a.scheme], alpha=a.alpha, beta=a.beta)
    batch = read_dump(a.input)
    X = np.asarray(batch.data, dtype=np.float64)
    if a.transform:
        X = read_transform(a.transform).apply(X)
    qb = quantize_tokens(X, spec)
    Xq = dequantize_tokens(qb)
    per_token = np.mean((Xq - X) ** 2, axis=1)
    mse = float(per_token.mean())
    if a.report:
        _guard(a.report, a.force)
        _write_csv(a.report, ["token", "s", "z", "mse"],
                   [(i, p.s, p.z, float(e)) for i, (p, e) in enumerate(zip(qb.params, per_token))])
    if a.out:
        _guard(a.out, a.force)
        write_dump(ActivationBatch(Xq), a.out)
    print(f"mse {mse!r}")


def cmd_metrics(a):
    X = np.concatenate([np.asarray(b.data, dtype=np.float64) for b in _load(a.input)])
    if a.transform:
        X = read_transform(a.transform).apply(X)
    rows, pooled = token_metrics(X, a.bits, a.theta_ratio)
    header = ["token"] + MetricsReport.columns()
    table = [[i] + list(r.as_row().values()) for i, r in enumerate(rows)]
    table.append(["pooled"] + list(pooled.as_row().values()))
    if a.out:
        _guard(a.out, a.force)
        _write_csv(a.out, header, table)
    peak, bn = peak_stats(X)
    print(f"tokens {len(rows)}  mean_peak {peak:.6g}  mean_bn {bn:.6g}  "
          f"pooled_kl {pooled.kl_direct:.6g}  pooled_bound {pooled.bound:.6g}")


def cmd_bounds(a):
    grid = parse_grid(a.kappa_grid)
    rows = [(k, tau_closed_form(a.family, k), bound_F(a.family, a.bits, k)) for k in grid]
    k_star = critical_kappa(a.family, a.bits)
    if a.out:
        _guard(a.out, a.force)
        _write_csv(a.out, ["kappa", "tau", "bound"], rows)
    print(f"critical kappa ({a.family}, {a.bits} bits): {k_star:.6f}")


def _read_weights(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["weight"]:
            raise ConfigError(f"{path}: expected a single 'weight' column")
        return np.array([float(r[0]) for r in reader])


def cmd_psot(a):
    batches = _load(a.input)
    cfg = PsotConfig(temperature=a.temperature, learning_rate=a.lr, epochs=a.epochs,
                     batch_size=a.batch_size, blocks=a.blocks, init=a.init, seed=a.seed,
                     max_step=a.max_step, fd_check=a.fd_check)
    weights = _read_weights(a.weights) if a.weights else None
    _guard(a.out, a.force)
    transform, trace = train_psot(batches, weights, cfg)
    write_transform(transform, a.out)
    if a.trace_out:
        _guard(a.trace_out, a.force)
        _write_csv(a.trace_out, ["epoch", "loss"], list(enumerate(trace)))
    print(f"loss {trace[0]:.6g} -> {trace[-1]:.6g}")


def cmd_asot(a):
    batches = _load(a.input)
    cfg = AsotConfig(grid=parse_grid(a.grid), delta=a.delta, tau=a.tau, gamma=a.gamma,
                     m=len(batches), outliers_only=a.outliers_only, difference=a.difference)
    try:
        sel = select_threshold(batches, channel_stats(batches), cfg)
    except SelectionError as exc:
        if a.curve_out:
            _write_csv(a.curve_out, ["k", "eta"], exc.curve)
        raise
    for path in (a.weights_out, a.curve_out):
        _guard(path, a.force)
    if a.weights_out:
        _write_csv(a.weights_out, ["weight"], [[float(w)] for w in sel.weights])
    if a.curve_out:
        _write_csv(a.curve_out, ["k", "eta"], sel.eta_curve)
    print(f"k* {sel.k_star}  selected {sum(len(s) for s in sel.per_sample_sets)} tokens")


def cmd_lac(a):
    X = np.concatenate([np.asarray(b.data, dtype=np.float64) for b in _load(a.input)])
    if a.transform:
        X = read_transform(a.transform).apply(X)
    if a.weights:
        W = np.asarray(read_dump(a.weights).data, dtype=np.float64)
    else:
        W = np.random.default_rng(a.seed).normal(size=(X.shape[1], a.out_dim)) / np.sqrt(X.shape[1])
    block = DeskBlock(W, a.nonlinearity, a.weight_bits)
    clip, trace = optimize_clipping(X, block, a.bits, LacConfig(grid=a.grid))
    if a.out:
        _guard(a.out, a.force)
        _write_csv(a.out, ["alpha", "beta", "mse"], trace)
    best = min(t[2] for t in trace)
    print(f"alpha {clip.alpha!r}  beta {clip.beta!r}  mse {best!r}")


def cmd_pipeline(a):
    overrides = dict(kv.split("=", 1) for kv in a.set or [])
    overrides = {k.strip(): v.strip() for k, v in overrides.items()}
    for name in ("bits", "seed"):
        if getattr(a, name) is not None:
            overrides[name] = str(getattr(a, name))
    if a.input:
        overrides["inputs"] = ",".join(_expand(a.input))
    cfg = parse_config(a.config, overrides)
    outdir = a.out or cfg.output
    report = run_to_directory(cfg, outdir, force=a.force)
    _print_stages([s.as_row() for s in report.stages])
    print(f"reports in {outdir}")


def _print_stages(rows):
    cols = ["stage", "quant_mse", "block_mse", "mean_peak", "mean_bn", "alpha", "beta"]
    print("  ".join(f"{c:>10}" for c in cols))
    for r in rows:
        print("  ".join(f"{r[c]:>10}" if c == "stage" else f"{float(r[c]):>10.5g}" for c in cols))


def cmd_report(a):
    path = Path(a.run) / "stages.csv"
    if not path.exists():
        raise ConfigError(f"{a.run} holds no stages.csv; expected one of {REPORT_FILES}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    _print_stages(rows)


# -- parser ------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="quantlab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"quantlab {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(func=fn)
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        return sp

    g = add("gen", cmd_gen, "generate synthetic activations as ACTD files")
    g.add_argument("--family", default="gaussian", choices=["gaussian", "laplace"])
    g.add_argument("--dim", type=int, default=64)
    g.add_argument("--n-tokens", "--tokens", dest="n_tokens", type=int, default=2048, help="tokens per sample")
    g.add_argument("--samples", type=int, default=1)
    g.add_argument("--scale", type=float, default=1.0)
    g.add_argument("--outlier-rate", type=float, default=0.0)
    g.add_argument("--outlier-gain", type=float, default=1.0)
    g.add_argument("--outlier-mode", default="per_channel", choices=["per_channel", "per_token"])
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--truth-out")
    g.add_argument("--out", required=True)

    q = add("quantize", cmd_quantize, "quantize-dequantize tokens and report the MSE")
    q.add_argument("--in", dest="input", required=True)
    q.add_argument("--bits", type=int, default=4)
    q.add_argument("--scheme", default="affine", choices=sorted(_SCHEME_ALIASES))
    q.add_argument("--alpha", type=float, default=1.0)
    q.add_argument("--beta", type=float, default=1.0)
    q.add_argument("--transform")
    q.add_argument("--report", help="per-token CSV of step size, zero-point and MSE")
    q.add_argument("--out", help="write the dequantized tokens as ACTD")

    m = add("metrics", cmd_metrics, "per-token and pooled error metrics")
    m.add_argument("--in", dest="input", nargs="+", required=True)
    m.add_argument("--bits", type=int, default=4)
    m.add_argument("--theta-ratio", type=float, default=0.05)
    m.add_argument("--transform")
    m.add_argument("--out", "--csv", dest="out")

    b = add("bounds", cmd_bounds, "closed-form tail means, error bound and critical threshold")
    b.add_argument("--family", default="gaussian", choices=["gaussian", "laplace"])
    b.add_argument("--bits", type=int, default=4)
    b.add_argument("--kappa-grid", default="0:5:0.25")
    b.add_argument("--out", "--csv", dest="out")

    ps = add("psot", cmd_psot, "learn a peak-suppressing rotation")
    ps.add_argument("--in", dest="input", nargs="+", required=True)
    ps.add_argument("--weights", help="CSV with a 'weight' column, one row per token")
    ps.add_argument("--temperature", type=float, default=2.0)
    ps.add_argument("--lr", type=float, default=2.0)
    ps.add_argument("--epochs", type=int, default=15)
    ps.add_argument("--batch-size", type=int, default=4)
    ps.add_argument("--blocks", type=int, default=2)
    ps.add_argument("--init", default="hadamard", choices=["hadamard", "random"])
    ps.add_argument("--max-step", type=float, default=0.5)
    ps.add_argument("--fd-check", action="store_true")
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--trace-out", "--trace", dest="trace_out")
    ps.add_argument("--out", required=True)

    s = add("asot", cmd_asot, "select outlier tokens and write token weights")
    s.add_argument("--in", dest="input", nargs="+", required=True)
    s.add_argument("--delta", type=float, default=0.02)
    s.add_argument("--tau", type=float, default=0.4)
    s.add_argument("--gamma", type=float, default=30.0)
    s.add_argument("--grid", default="2:8:0.25")
    s.add_argument("--difference", default="forward", choices=["forward", "backward"])
    s.add_argument("--outliers-only", action="store_true")
    s.add_argument("--weights-out")
    s.add_argument("--curve-out")

    lc = add("lac", cmd_lac, "search activation clipping ratios")
    lc.add_argument("--in", dest="input", nargs="+", required=True)
    lc.add_argument("--weights", help="ACTD file holding the block weight matrix")
    lc.add_argument("--out-dim", type=int, default=32)
    lc.add_argument("--nonlinearity", default="identity", choices=["identity", "gelu"])
    lc.add_argument("--weight-bits", type=int)
    lc.add_argument("--bits", type=int, default=4)
    lc.add_argument("--grid", type=int, default=11)
    lc.add_argument("--transform")
    lc.add_argument("--seed", type=int, default=0)
    lc.add_argument("--out")

    pl = add("pipeline", cmd_pipeline, "run all stages and write CSV reports")
    pl.add_argument("--config")
    pl.add_argument("--in", dest="input", nargs="+")
    pl.add_argument("--bits", type=int)
    pl.add_argument("--seed", type=int)
    pl.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    pl.add_argument("--out")

    r = add("report", cmd_report, "print the stage table of a finished run")
    r.add_argument("--run", required=True)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("QUANTLAB_THREADS")
    try:
        if threads is not None:
            try:
                n = int(threads)
            except ValueError:
                raise ConfigError(f"QUANTLAB_THREADS must be an integer, got {threads!r}") from None
            if n < 1:
                raise ConfigError("QUANTLAB_THREADS must be >= 1")
            with threadpool_limits(limits=n):
                args.func(args)
        else:
            args.func(args)
    except QuantlabError as exc:
        print(f"quantlab {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"quantlab {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
