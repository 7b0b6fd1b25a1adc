"""Run a configured experiment over many chains and write its outputs."""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..diagnostics import DeviationCurve, alignment_curve, bound_audit, deviation_curve, write_curves_csv
from ..guidance import guided_chain, resolve_step_size
from ..prior import AnalyticDenoiser
from ..sampler import RNG_ALGORITHM, chain_rng, tweedie_estimate
from .config import Components, ExperimentConfig

RECORD_SCHEMA_VERSION = 1
OUTPUT_FILES = {"trajectories": "trajectories.csv", "diagnostics": "diagnostics.csv", "record": "run.json"}
NUMERICAL_ERRORS = (FloatingPointError, OverflowError, np.linalg.LinAlgError)


class NumericalFailure(RuntimeError):
    pass


@dataclass
class ChainTelemetry:
    """Counters and sampling time (diagnostics excluded) of one chain."""

    chain: int
    jacobian_products: int
    denoiser_evaluations: int
    wall_clock_seconds: float
    steps: int


@dataclass
class ChainResult:
    chain: int
    terminal: np.ndarray | None
    loss: float | None
    trajectory: object
    curve: DeviationCurve | None
    telemetry: ChainTelemetry
    error: str | None = None


@dataclass
class RunRecord:
    """Everything needed to identify and compare a run; JSON round-trips exactly."""

    config_hash: str
    config: dict
    version: str
    rng_algorithm: str
    method: str
    terminal_samples: list
    losses: list
    files: dict
    telemetry: dict
    failed: bool = False
    errors: list = field(default_factory=list)
    bound_audit: dict | None = None
    schema_version: int = RECORD_SCHEMA_VERSION
    # in-memory only
    trajectories: list = field(default=None, repr=False, compare=False)
    curves: list = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc.pop("trajectories")
        doc.pop("curves")
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls(**json.loads(text))

    def terminal_array(self) -> np.ndarray:
        """(n, d) terminal samples with NaN rows for failed chains."""
        width = next((len(x) for x in self.terminal_samples if x is not None), 0)
        return np.array([[np.nan] * width if x is None else x for x in self.terminal_samples], dtype=float)


def _decode(pair):
    return lambda z: pair.decode(z)


def _run_chain(comp: Components, doc: dict, chain: int) -> ChainResult:
    start = time.perf_counter()
    method = doc["method"]
    latent = method == "mpgd-ldm"
    prior = comp.prior.latent() if latent else comp.prior
    denoiser = AnalyticDenoiser(prior)
    gen = chain_rng(doc["master_seed"], chain)
    x_T = gen.standard_normal(prior.manifold.d)
    loss = None if method == "ddim" else comp.loss
    trajectory, terminal, value, curve, error = None, None, None, None, None
    elapsed = 0.0
    try:
        # non-finite values are detected explicitly below, so numpy's warnings add nothing
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            trajectory = guided_chain(x_T, denoiser, comp.schedule, loss, comp.settings, gen, chain)
        elapsed = time.perf_counter() - start
        terminal = comp.pair.decode(trajectory.terminal) if latent else trajectory.terminal
        if not np.all(np.isfinite(terminal)):
            raise NumericalFailure("non-finite terminal sample")
        value = float(comp.loss.value(terminal))
        curve = _chain_curve(comp, doc, trajectory, denoiser, latent)
    except (NumericalFailure, *NUMERICAL_ERRORS) as exc:
        error = f"chain {chain}: {exc}"
        terminal = None
        elapsed = elapsed or time.perf_counter() - start
    telemetry = ChainTelemetry(chain, denoiser.jacobian_products, denoiser.evaluations, elapsed,
                               comp.schedule.T)
    return ChainResult(chain, terminal, value, trajectory, curve, telemetry, error)


def _chain_curve(comp, doc, trajectory, denoiser, latent) -> DeviationCurve:
    schedule = comp.schedule
    curve = deviation_curve(trajectory, comp.manifold, schedule, doc["method"],
                            decode=_decode(comp.pair) if latent else None)
    cosines = dict(alignment_curve(trajectory, denoiser.fresh(), schedule))
    auditor = denoiser.fresh() if doc["method"] == "dps" else None
    for row, step in zip(curve.rows, trajectory.steps):
        row.cosine = cosines.get(row.t)
        if auditor is not None and row.t > 0:
            current = None
            if comp.settings.step_size.mode == "loss-normalized":
                x0 = tweedie_estimate(step.x_t, step.eps_hat, schedule[row.t])
                current = float(comp.loss.value(x0))
            rho_t, _ = resolve_step_size(comp.settings.step_size, row.t, current, schedule)
            # the shared draw cancels in the difference; zeros keep the audit draw-free
            audit = bound_audit(step.x_t, auditor, schedule, row.t, comp.loss, rho_t,
                                np.zeros_like(step.x_t))
            row.bound_lhs, row.bound_rhs, row.kappa = audit.lhs, audit.rhs, audit.kappa
    return curve


def _bound_summary(curves) -> dict | None:
    rows = [r for c in curves for r in c.rows if r.bound_lhs is not None]
    if not rows:
        return None
    excess = [r.bound_lhs - r.bound_rhs for r in rows]
    return {"steps": len(rows), "violations": int(sum(e > 1e-9 for e in excess)),
            "max_excess": float(max(excess))}


def run_experiment(config: ExperimentConfig, out_dir=None, force: bool = False,
                   trajectories: bool | None = None, workers: int | None = None) -> RunRecord:
    """Run every chain of ``config``; write outputs when an output directory is set.

    Chains are independent and draw from ``chain_rng(master_seed, chain)``, so
    results do not depend on ``workers``.  Numerical failures produce a partial
    record with ``failed`` set instead of raising.
    """
    doc = config.doc
    comp = config.build()
    workers = workers or doc["workers"]
    start = time.perf_counter()
    chains = range(doc["chains"])
    if workers == 1:
        results = [_run_chain(comp, doc, i) for i in chains]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda i: _run_chain(comp, doc, i), chains))
    results.sort(key=lambda r: r.chain)
    wall = time.perf_counter() - start
    per_chain = [asdict(r.telemetry) for r in results]
    total_steps = sum(t["steps"] for t in per_chain)
    chain_seconds = sum(t["wall_clock_seconds"] for t in per_chain)
    curves = [r.curve for r in results if r.curve is not None]
    errors = [r.error for r in results if r.error]
    record = RunRecord(
        config_hash=config.hash,
        config=doc,
        version=__version__,
        rng_algorithm=RNG_ALGORITHM,
        method=doc["method"],
        terminal_samples=[None if r.terminal is None else r.terminal.tolist() for r in results],
        losses=[r.loss for r in results],
        files={},
        telemetry={
            "wall_clock_seconds": wall,
            "workers": workers,
            "seconds_per_step": chain_seconds / total_steps if total_steps else 0.0,
            "jacobian_products_per_chain": [t["jacobian_products"] for t in per_chain],
            "chains": per_chain,
        },
        failed=bool(errors),
        errors=errors,
        bound_audit=_bound_summary(curves),
        trajectories=[r.trajectory for r in results],
        curves=curves,
    )
    out_dir = out_dir if out_dir is not None else doc["output"]["dir"]
    if out_dir is not None:
        keep = doc["output"]["trajectories"] if trajectories is None else trajectories
        emit_outputs(record, out_dir, force=force, trajectories=keep)
    return record


def emit_outputs(record: RunRecord, out_dir, force: bool = False, trajectories: bool = True) -> dict:
    """Write trajectories.csv (optional), diagnostics.csv and run.json into ``out_dir``.

    Existing files are only replaced with ``force``.  Returns the written paths
    by role; ``record.files`` is updated to the same names.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    roles = ["diagnostics", "record"] + (["trajectories"] if trajectories else [])
    paths = {role: out / OUTPUT_FILES[role] for role in roles}
    clash = [str(p) for p in paths.values() if p.exists()]
    if clash and not force:
        raise FileExistsError(f"refusing to overwrite {', '.join(clash)} (use --force)")
    record.files = {role: p.name for role, p in paths.items() if role != "record"}
    if trajectories:
        _write_trajectories(paths["trajectories"], record)
    write_curves_csv(paths["diagnostics"], record.curves or [])
    paths["record"].write_text(record.to_json())
    return paths


def _write_trajectories(path, record: RunRecord):
    runs = [t for t in (record.trajectories or []) if t is not None]
    curves = {c.chain: c for c in (record.curves or [])}
    width = len(runs[0].steps[0].x_t) if runs else 0
    header = (["chain", "t"] + [f"xt_{i}" for i in range(width)] + [f"x0hat_{i}" for i in range(width)]
              + ["shell_residual"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for run in runs:
            curve = curves.get(run.chain)
            residuals = {r.t: r.shell_residual for r in curve.rows} if curve else {}
            for step in run.steps:
                x0 = step.x0 if step.x0 is not None else step.x_t
                res = residuals.get(step.t)
                writer.writerow([run.chain, step.t] + [repr(float(v)) for v in step.x_t]
                                + [repr(float(v)) for v in x0] + ["" if res is None else repr(res)])
