"""End-to-end run: load or generate activations, select outlier tokens, learn a
rotation, tune clipping and report per-stage metrics on held-out tokens.

Stages run in a fixed order and each adds one ingredient:

``baseline``   identity transform, unclipped per-token quantizer
``hadamard``   block Hadamard rotation
``psot``       learned rotation (token weights from ASOT if enabled)
``psot+lac``   learned rotation plus tuned ``(alpha, beta)``

All stages are scored on the same evaluation tokens: a seeded subset of
token positions shared by every sample.
"""

import csv
import dataclasses
import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .activations import ActivationBatch, generate_synthetic, read_dump
from .asot import select_threshold
from .errors import ConfigError, QuantlabError
from .infometrics import MetricsReport, token_metrics
from .lac import ClipParams, DeskBlock, block_forward, block_forward_quant, optimize_clipping
from .psot import OrthoTransform, peak_stats, train_psot
from .quantizer import fake_quantize

log = logging.getLogger(__name__)

REPORT_FILES = ("stages.csv", "eta_curve.csv", "loss_trace.csv", "lac_trace.csv", "summary.json")
LOCK_NAME = ".quantlab.lock"


@dataclass
class StageResult:
    name: str
    quant_mse: float
    block_mse: float
    mean_peak: float
    mean_bn: float
    alpha: float
    beta: float
    metrics: MetricsReport
    seconds: float = 0.0

    def as_row(self):
        row = {"stage": self.name, "quant_mse": self.quant_mse, "block_mse": self.block_mse,
               "mean_peak": self.mean_peak, "mean_bn": self.mean_bn,
               "alpha": self.alpha, "beta": self.beta}
        row.update({f"pooled_{k}": v for k, v in self.metrics.as_row().items()})
        return row


@dataclass
class RunReport:
    stages: list = field(default_factory=list)
    eta_curve: list = field(default_factory=list)
    k_star: float | None = None
    n_selected: int = 0
    loss_trace: list = field(default_factory=list)
    lac_trace: list = field(default_factory=list)
    clip: ClipParams | None = None

    def stage(self, name):
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)


def load_samples(config):
    """Calibration samples from ACTD paths, or split from one synthetic draw.

    Synthetic samples are consecutive row blocks of a single generated batch,
    so per-channel outliers sit on the same channels in every sample.
    """
    if config.inputs:
        samples = [read_dump(p, sample_id=i) for i, p in enumerate(config.inputs)]
    else:
        spec = dataclasses.replace(config.synthetic,
                                   n_tokens=config.synthetic.n_tokens * config.samples)
        data = generate_synthetic(spec).data
        samples = [ActivationBatch(part, sample_id=i)
                   for i, part in enumerate(np.split(data, config.samples))]
    sizes = {s.n_tokens for s in samples}
    dims = {s.dim for s in samples}
    if len(sizes) != 1 or len(dims) != 1:
        raise ConfigError("all samples must share one shape; ragged input is unsupported")
    return samples


def split_tokens(n_tokens, eval_fraction, seed):
    """Sorted calibration and evaluation token positions."""
    n_eval = max(1, int(round(eval_fraction * n_tokens)))
    if n_eval >= n_tokens:
        raise ConfigError(f"{n_tokens} tokens are too few to hold out {n_eval}")
    perm = np.random.default_rng(seed).permutation(n_tokens)
    return np.sort(perm[n_eval:]), np.sort(perm[:n_eval])


def desk_block(dim, config):
    rng = np.random.default_rng(config.seed + 1)
    W = rng.normal(size=(dim, config.block.out_dim)) / math.sqrt(dim)
    return DeskBlock(W, config.block.nonlinearity, config.block.weight_bits)


def _score(name, transform, clip, X_eval, block, bits, theta_ratio=0.05):
    Y = transform.apply(X_eval)
    quant_mse = float(np.mean((fake_quantize(Y, bits, clip.alpha, clip.beta) - Y) ** 2))
    # the rotated block sees y R^T W = x W, so outputs stay comparable across stages
    rot_block = dataclasses.replace(block, W=transform.dense().T @ block.W)
    ref = block_forward(X_eval, block)
    block_mse = float(np.mean((block_forward_quant(Y, rot_block, clip, bits) - ref) ** 2))
    peak, bn = peak_stats(X_eval, transform)
    _, pooled = token_metrics(Y, bits, theta_ratio)
    return StageResult(name, quant_mse, block_mse, peak, bn, clip.alpha, clip.beta, pooled)


def run_pipeline(config, on_stage=None):
    """Run every enabled stage; ``on_stage(report)`` is called after each one."""
    report = RunReport()
    samples = load_samples(config)
    dim = samples[0].dim
    calib_idx, eval_idx = split_tokens(samples[0].n_tokens, config.eval_fraction, config.seed)
    calib = [ActivationBatch(s.data[calib_idx], s.sample_id) for s in samples]
    X_eval = np.concatenate([np.asarray(s.data[eval_idx], dtype=np.float64) for s in samples])
    block = desk_block(dim, config)
    unclipped = ClipParams(1.0, 1.0)

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            result = fn()
        except QuantlabError as exc:
            raise type(exc)(f"stage {name} failed: {exc}") from exc
        result.seconds = time.perf_counter() - t0
        report.stages.append(result)
        log.info("stage %s: quant_mse %.6g block_mse %.6g", name, result.quant_mse, result.block_mse)
        if on_stage is not None:
            on_stage(report)

    stage("baseline", lambda: _score("baseline", OrthoTransform.identity(dim), unclipped,
                                     X_eval, block, config.bits))
    if "hadamard" in config.stages:
        had = OrthoTransform.block_hadamard(dim, config.psot.blocks)
        stage("hadamard", lambda: _score("hadamard", had, unclipped, X_eval, block, config.bits))
    if "psot" not in config.stages:
        return report

    learned = {}

    def psot_stage():
        weights = None
        if config.use_asot:
            m = min(config.asot.m, len(calib))
            sel = select_threshold(calib[:m], config=config.asot)
            report.eta_curve, report.k_star = sel.eta_curve, sel.k_star
            report.n_selected = sum(len(s) for s in sel.per_sample_sets)
            # samples beyond the first m keep unit weight
            rest = np.ones(sum(b.n_tokens for b in calib[m:]))
            weights = np.concatenate([sel.weights, rest])
        transform, trace = train_psot(calib, weights, config.psot)
        report.loss_trace = trace
        learned["R"] = transform
        return _score("psot", transform, unclipped, X_eval, block, config.bits)

    stage("psot", psot_stage)
    if "psot+lac" not in config.stages:
        return report

    def lac_stage():
        transform = learned["R"]
        Y = transform.apply(np.concatenate([np.asarray(b.data, dtype=np.float64) for b in calib]))
        rot_block = dataclasses.replace(block, W=transform.dense().T @ block.W)
        clip, trace = optimize_clipping(Y, rot_block, config.bits, config.lac)
        report.clip, report.lac_trace = clip, trace
        return _score("psot+lac", transform, clip, X_eval, block, config.bits)

    stage("psot+lac", lac_stage)
    return report


# -- report files ----------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def report_files(report, config):
    """Map of file name to exact text; every file except the timing field is deterministic."""
    stage_rows = [r.as_row() for r in report.stages]
    header = list(stage_rows[0]) if stage_rows else ["stage"]
    files = {
        "stages.csv": _csv(header, [[r[h] for h in header] for r in stage_rows]),
        "eta_curve.csv": _csv(["k", "eta"], report.eta_curve),
        "loss_trace.csv": _csv(["epoch", "loss"], list(enumerate(report.loss_trace))),
        "lac_trace.csv": _csv(["alpha", "beta", "mse"], report.lac_trace),
    }
    summary = {
        "version": __version__,
        "seed": config.seed,
        "bits": config.bits,
        "stages": [s.name for s in report.stages],
        "k_star": report.k_star,
        "n_selected": report.n_selected,
        "alpha": None if report.clip is None else report.clip.alpha,
        "beta": None if report.clip is None else report.clip.beta,
        "quant_mse": {s.name: s.quant_mse for s in report.stages},
        "block_mse": {s.name: s.block_mse for s in report.stages},
    }
    files["summary.json"] = json.dumps(summary, indent=2, sort_keys=True) + "\n"
    files["timings.csv"] = _csv(["stage", "seconds"], [(s.name, s.seconds) for s in report.stages])
    return files


def write_report(report, config, outdir):
    outdir = Path(outdir)
    for name, text in report_files(report, config).items():
        (outdir / name).write_bytes(text.encode("utf-8"))


class RunLock:
    """Exclusive claim on an output directory for the duration of one run."""

    def __init__(self, outdir, force=False):
        self.outdir = Path(outdir)
        self.force = force
        self.path = self.outdir / LOCK_NAME

    def __enter__(self):
        self.outdir.mkdir(parents=True, exist_ok=True)
        existing = [n for n in REPORT_FILES if (self.outdir / n).exists()]
        if existing and not self.force:
            raise ConfigError(f"{self.outdir} already holds a report ({existing[0]}); "
                              "use --force to overwrite")
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"{self.outdir} is locked by another run ({self.path})") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def run_to_directory(config, outdir=None, force=False):
    """Run the pipeline under a lock and write the reports.

    If a stage fails, the stages finished so far are still written.
    """
    outdir = Path(outdir or config.output)
    with RunLock(outdir, force):
        partial = {}
        try:
            report = run_pipeline(config, on_stage=lambda r: partial.update(report=r))
        except QuantlabError:
            if "report" in partial:
                write_report(partial["report"], config, outdir)
            raise
        write_report(report, config, outdir)
    return report
