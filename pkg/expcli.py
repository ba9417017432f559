"""
Experiment runner.

Reads a JSON experiment document, runs the matching experiment and writes
<out>/<experiment>.csv plus <out>/<experiment>.manifest.json.

    python expcli.py case2-unfold --config configs/case2_unfold.json --out results
    python expcli.py ib-sweep --seed 7

Exit status 0 on success, 2 for a rejected config, 3 for a failure inside a
lab module. Failures print one line to stderr:

    error: config: unknown key: foo
    error: module=precoding: ...
"""
import argparse
import csv
import json
import logging
import os
import sys
import tempfile
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Annotated, Any, Callable, Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError, model_validator

from beliefprop import brute_force_marginals, from_description, max_marginal_deviation, random_tree_graph, sum_product
from cellfree import (
    ChannelRealization,
    Scenario,
    case1_scenario,
    case2_scenario,
    draw_channels,
    noise_sweep,
    sinr_and_se,
)
from errors import ConfigError, LabError, ReportWriteError, ResourceLimitError
from horizonopt import best_constant_schedule, chebyshev_schedule, worst_case_factor
from infobottleneck import DiscreteJoint, ib_sweep, random_joint
from numkernel import RngStream
from precoding import (
    TrainerConfig,
    UnfoldedSchedule,
    compare_schedules,
    layer_trajectory,
    mrt,
    train_unfolded,
    wmmse_sum_se,
    zero_forcing,
)
from ratereduction import (
    crate_block_forward,
    gaussian_mixture,
    ista_step,
    lasso_objective,
    mssa_attention,
    mssa_forward,
    random_dictionary_block,
    redunet_forward,
)
from settings import ARTIFACT_VERSION, DEFAULT_WORKERS, configure_logging

logger = logging.getLogger(__name__)

LAB_MODULES = {"numkernel", "cellfree", "precoding", "ratereduction", "infobottleneck", "horizonopt",
               "beliefprop", "expcli"}

HEADERS = {
    "case1_sweep": ["seed", "noise_power", "scheme", "mean_sum_se", "std_sum_se", "mean_min_se", "num_channels"],
    "case2_unfold": ["seed", "tau_csi", "scheme", "layers", "mean_min_se", "std_min_se", "mean_total_se",
                     "num_channels"],
    "case2_layers": ["scheme", "layer", "mean_objective"],
    "redunet_demo": ["layer_index", "R", "R_c", "delta_R", "nearest_subspace_accuracy"],
    "crate_block": ["trial", "lasso_before", "lasso_after", "max_attention_colsum_error", "code_sparsity"],
    "ib_sweep": ["beta", "I_xz", "I_zy", "objective", "iterations", "converged"],
    "horizon_sweep": ["t", "schedule_kind", "worst_case_factor"],
    "bp_run": ["variable", "state", "marginal"],
}

SUBCOMMANDS = {
    "case1-sweep": "case1_sweep",
    "case2-unfold": "case2_unfold",
    "redunet": "redunet_demo",
    "crate-block": "crate_block",
    "ib-sweep": "ib_sweep",
    "horizon": "horizon_sweep",
    "bp": "bp_run",
}


# --- configuration documents -----------------------------------------------

class _ExperimentBase(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(default=0, ge=0, le=2**64 - 1)
    output_path: str = "results"


class Case1SweepConfig(_ExperimentBase):
    experiment: Literal["case1_sweep"] = "case1_sweep"
    scenario: Scenario = Field(default_factory=case1_scenario)
    noise_powers: List[float] = Field(default_factory=noise_sweep, min_length=1)
    num_channels: int = Field(default=100, ge=1)
    schemes: List[Literal["mrt", "zf", "wmmse"]] = Field(default_factory=lambda: ["mrt", "zf", "wmmse"],
                                                        min_length=1)
    wmmse_max_iters: int = Field(default=100, ge=1)
    wmmse_tol: float = Field(default=1e-6, gt=0)

    @model_validator(mode="after")
    def _positive_noise(self) -> "Case1SweepConfig":
        if any(not s > 0 for s in self.noise_powers):
            raise ValueError(f"noise_powers must all be > 0, got {self.noise_powers}")
        return self


class Case2UnfoldConfig(_ExperimentBase):
    experiment: Literal["case2_unfold"] = "case2_unfold"
    scenario: Scenario = Field(default_factory=case2_scenario)
    layers: int = Field(default=10, ge=1)
    train_channels: int = Field(default=200, ge=1)
    test_channels: int = Field(default=200, ge=1)
    tau_csi: List[float] = Field(default_factory=lambda: [0.0, 0.1, 0.2], min_length=1)
    fixed_step: float = Field(default=0.1, gt=0)
    trainer: TrainerConfig = Field(default_factory=TrainerConfig)

    @model_validator(mode="after")
    def _tau_range(self) -> "Case2UnfoldConfig":
        if any(not 0.0 <= t <= 1.0 for t in self.tau_csi):
            raise ValueError(f"tau_csi values must lie in [0, 1], got {self.tau_csi}")
        return self


class RedunetDemoConfig(_ExperimentBase):
    experiment: Literal["redunet_demo"] = "redunet_demo"
    dim: int = Field(default=8, ge=1)
    per_class: int = Field(default=100, ge=1)
    num_classes: int = Field(default=2, ge=1)
    separation: float = Field(default=4.0, ge=0)
    epsilon_sq: float = Field(default=0.5, gt=0)
    eta: float = Field(default=0.5, gt=0)
    layers: int = Field(default=20, ge=0)
    assignment_sharpness: float = Field(default=500.0, gt=0)
    n_components: int = Field(default=1, ge=1)


class CrateBlockConfig(_ExperimentBase):
    experiment: Literal["crate_block"] = "crate_block"
    dim: int = Field(default=16, ge=1)
    num_heads: int = Field(default=4, ge=1)
    head_dim: int = Field(default=4, ge=1)
    num_tokens: int = Field(default=32, ge=1)
    trials: int = Field(default=100, ge=1)
    sparsity_weight: float = Field(default=0.1, ge=0)
    attention_step: float = Field(default=1.0, ge=0)

    @model_validator(mode="after")
    def _head_fits(self) -> "CrateBlockConfig":
        if self.head_dim > self.dim:
            raise ValueError(f"head_dim {self.head_dim} exceeds dim {self.dim}")
        return self


class IBSweepConfig(_ExperimentBase):
    experiment: Literal["ib_sweep"] = "ib_sweep"
    joint: Optional[List[List[float]]] = None
    x_card: int = Field(default=4, ge=1)
    y_card: int = Field(default=3, ge=1)
    z_card: Optional[int] = Field(default=None, ge=1)
    betas: List[float] = Field(default_factory=lambda: [float(b) for b in np.logspace(-1, 2, 13)], min_length=1)
    restarts: int = Field(default=10, ge=1)
    max_iters: int = Field(default=1000, ge=1)
    tol: float = Field(default=1e-10, gt=0)


class HorizonSweepConfig(_ExperimentBase):
    experiment: Literal["horizon_sweep"] = "horizon_sweep"
    mu: float = Field(default=1.0, gt=0)
    l: float = Field(default=10.0, gt=0)
    horizons: List[int] = Field(default_factory=lambda: list(range(1, 11)), min_length=1)
    schedule_kinds: List[Literal["chebyshev", "constant"]] = Field(
        default_factory=lambda: ["chebyshev", "constant"], min_length=1)

    @model_validator(mode="after")
    def _interval(self) -> "HorizonSweepConfig":
        if self.mu > self.l:
            raise ValueError(f"need mu <= l, got mu={self.mu}, l={self.l}")
        if any(t < 1 for t in self.horizons):
            raise ValueError(f"horizons must be >= 1, got {self.horizons}")
        return self


class FactorDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    variables: List[int] = Field(min_length=1)
    table: Any


class GraphDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    cardinalities: List[int] = Field(min_length=1)
    factors: List[FactorDocument] = Field(default_factory=list)


class BPRunConfig(_ExperimentBase):
    experiment: Literal["bp_run"] = "bp_run"
    graph: Optional[GraphDocument] = None
    num_variables: int = Field(default=6, ge=1)
    max_cardinality: int = Field(default=3, ge=1)
    max_iters: int = Field(default=100, ge=1)
    damping: float = Field(default=0.0, ge=0, lt=1)
    tol: float = Field(default=1e-12, gt=0)


ExperimentConfig = Annotated[
    Union[Case1SweepConfig, Case2UnfoldConfig, RedunetDemoConfig, CrateBlockConfig, IBSweepConfig,
          HorizonSweepConfig, BPRunConfig],
    Field(discriminator="experiment"),
]

_CONFIG_ADAPTER = TypeAdapter(ExperimentConfig)


def _describe_validation_error(exc: ValidationError, tag: Optional[str]) -> str:
    messages = []
    for error in exc.errors():
        loc = [str(part) for part in error["loc"]]
        if loc and tag is not None and loc[0] == tag:
            loc = loc[1:]
        where = ".".join(loc)
        if error["type"] == "extra_forbidden":
            messages.append(f"unknown key: {where}")
        else:
            messages.append(f"{where or 'document'}: {error['msg']}")
    return "; ".join(messages)


def load_config(document: Dict[str, Any], expected: Optional[str] = None) -> BaseModel:
    """Validate a parsed document; ``expected`` fills in or checks the discriminator."""
    if not isinstance(document, dict):
        raise ConfigError(f"config must be a JSON object, got {type(document).__name__}")
    document = dict(document)
    if expected is not None:
        found = document.setdefault("experiment", expected)
        if found != expected:
            raise ConfigError(f"experiment {found!r} does not match subcommand for {expected!r}")
    try:
        return _CONFIG_ADAPTER.validate_python(document)
    except ValidationError as exc:
        tag = document.get("experiment") if isinstance(document.get("experiment"), str) else None
        raise ConfigError(_describe_validation_error(exc, tag)) from exc


def read_config(path: Optional[str], expected: Optional[str] = None) -> BaseModel:
    if path is None:
        return load_config({}, expected)
    try:
        with open(path, "r", encoding="utf-8") as handle:
            document = json.load(handle)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc.msg} at line {exc.lineno}") from exc
    return load_config(document, expected)


# --- report writing --------------------------------------------------------

def _format_cell(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def emit_report(rows: Iterable[Sequence[Any]], path: Union[str, Path], header: Sequence[str]) -> None:
    """
    Write a UTF-8 CSV atomically: LF line endings, '.' decimals and
    17-significant-digit floats, so values parse back exactly.
    """
    path = Path(path)
    tmp_name = None
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile("w", encoding="utf-8", newline="", dir=path.parent,
                                         prefix=f".{path.name}.", suffix=".tmp", delete=False) as handle:
            tmp_name = handle.name
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                if len(row) != len(header):
                    raise ReportWriteError(f"row {list(row)} has {len(row)} cells, header has {len(header)}")
                writer.writerow([_format_cell(v) for v in row])
        os.replace(tmp_name, path)
    except OSError as exc:
        if tmp_name is not None and os.path.exists(tmp_name):
            os.unlink(tmp_name)
        if isinstance(exc, ReportWriteError):
            raise
        raise ReportWriteError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _write_manifest(path: Path, config: BaseModel, wall_time: float, files: List[str]) -> None:
    manifest = {
        "artifact_version": ARTIFACT_VERSION,
        "experiment": config.experiment,
        "config": config.model_dump(mode="json"),
        "files": files,
        "wall_time_seconds": wall_time,
    }
    try:
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise ReportWriteError(f"cannot write {path}: {exc.strerror or exc}") from exc


# --- experiments -----------------------------------------------------------

Table = List[Tuple[str, List[str], List[Sequence[Any]]]]


def _ordered_map(fn: Callable[[int], Any], count: int, workers: int) -> List[Any]:
    """Evaluate fn over range(count); results always come back in index order."""
    if workers <= 1:
        return [fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(count)))


def _run_case1(config: Case1SweepConfig, workers: int) -> Table:
    rng = RngStream(seed=config.seed)
    base = config.scenario
    channels = draw_channels(base, config.num_channels, rng.spawn(0))
    rows = []
    for noise_power in config.noise_powers:
        scenario = base.model_copy(update={"noise_power": float(noise_power)})
        for scheme in config.schemes:
            def evaluate(i: int, scheme=scheme, scenario=scenario) -> Tuple[float, float]:
                h = ChannelRealization(h=channels[i], scenario=scenario)
                if scheme == "mrt":
                    w = mrt(h, scenario)
                elif scheme == "zf":
                    w = zero_forcing(h, scenario)
                else:
                    w, _ = wmmse_sum_se(h, scenario, max_iters=config.wmmse_max_iters, tol=config.wmmse_tol)
                metrics = sinr_and_se(h, w, scenario)
                return metrics.total_se, metrics.min_se

            results = np.asarray(_ordered_map(evaluate, config.num_channels, workers))
            rows.append([config.seed, float(noise_power), scheme, float(np.mean(results[:, 0])),
                         float(np.std(results[:, 0])), float(np.mean(results[:, 1])), config.num_channels])
            logger.info(f"case1 sigma^2={noise_power:g} {scheme}: mean sum SE {rows[-1][3]:.4f}")
    return [("case1_sweep", HEADERS["case1_sweep"], rows)]


def _run_case2(config: Case2UnfoldConfig, workers: int) -> Table:
    rng = RngStream(seed=config.seed)
    scenario = config.scenario
    trainer = config.trainer
    trained = train_unfolded(scenario, config.layers, config.train_channels, rng.spawn(0), trainer)

    grid_values = trained.candidate_objectives[:trainer.grid_points]
    best_index = int(np.argmax(grid_values))
    best_constant = UnfoldedSchedule.constant(10.0 ** trainer.grid()[best_index], config.layers, trainer.tau_soft)
    fixed = UnfoldedSchedule.constant(config.fixed_step, config.layers, trainer.tau_soft)
    schedules = [("unfolded", trained), ("best_constant", best_constant), (f"fixed_{config.fixed_step:g}", fixed)]

    test_rng = rng.spawn(1)
    report = compare_schedules(scenario, schedules, config.test_channels, config.tau_csi, test_rng)
    rows = [[config.seed, r.tau_csi, r.scheme, r.layers, r.mean_min_se, r.std_min_se, r.mean_total_se,
             r.num_channels] for r in report]

    # Same held-out channels compare_schedules draws, with perfect CSI.
    test_channels = draw_channels(scenario, config.test_channels, test_rng.spawn(0))
    layer_rows = []
    for name, schedule in schedules:
        for layer, value in enumerate(layer_trajectory(scenario, schedule, test_channels)):
            layer_rows.append([name, layer, value])
    return [("case2_unfold", HEADERS["case2_unfold"], rows),
            ("case2_unfold_layers", HEADERS["case2_layers"], layer_rows)]


def _run_redunet(config: RedunetDemoConfig, workers: int) -> Table:
    batch = gaussian_mixture(config.dim, config.per_class, config.num_classes, config.separation,
                             RngStream(seed=config.seed), epsilon_sq=config.epsilon_sq)
    _, records = redunet_forward(batch, config.layers, config.eta, config.assignment_sharpness,
                                 config.n_components)
    rows = [[r.layer_index, r.coding_rate, r.conditional_rate, r.delta_r, r.nearest_subspace_accuracy]
            for r in records]
    logger.info(f"redunet: delta R {records[0].delta_r:.4f} -> {records[-1].delta_r:.4f} "
                f"over {config.layers} layers")
    return [("redunet_demo", HEADERS["redunet_demo"], rows)]


def _run_crate(config: CrateBlockConfig, workers: int) -> Table:
    rng = RngStream(seed=config.seed)

    def trial(i: int) -> List[Any]:
        stream = rng.spawn(i)
        block = random_dictionary_block(config.dim, config.num_heads, config.head_dim, config.dim, stream.spawn(0),
                                        sparsity_weight=config.sparsity_weight,
                                        attention_step=config.attention_step)
        tokens = stream.spawn(1).generator().standard_normal((config.dim, config.num_tokens))
        colsum_error = max(float(np.max(np.abs(a.sum(axis=0) - 1.0))) for a in mssa_attention(tokens, block))
        half = mssa_forward(tokens, block)
        codes = np.maximum(half, 0.0)
        before = lasso_objective(codes, half, block)
        after = lasso_objective(ista_step(codes, half, block), half, block)
        sparsity = float(np.mean(crate_block_forward(tokens, block) == 0.0))
        return [i, before, after, colsum_error, sparsity]

    rows = _ordered_map(trial, config.trials, workers)
    return [("crate_block", HEADERS["crate_block"], rows)]


def _run_ib(config: IBSweepConfig, workers: int) -> Table:
    rng = RngStream(seed=config.seed)
    try:
        joint = DiscreteJoint(np.asarray(config.joint, dtype=float)) if config.joint is not None \
            else random_joint(config.x_card, config.y_card, rng.spawn(0))
    except (ValueError, ArithmeticError) as exc:
        raise ConfigError(f"joint: {exc}") from exc
    z_card = config.z_card or joint.p.shape[0]
    points = ib_sweep(joint, config.betas, z_card, config.restarts, rng.spawn(1), config.max_iters, config.tol)
    rows = [[p.beta, p.i_xz, p.i_zy, p.objective, p.iterations, p.converged] for p in points]
    return [("ib_sweep", HEADERS["ib_sweep"], rows)]


def _run_horizon(config: HorizonSweepConfig, workers: int) -> Table:
    builders = {"chebyshev": chebyshev_schedule, "constant": best_constant_schedule}
    rows = []
    for t in config.horizons:
        for kind in config.schedule_kinds:
            rows.append([t, kind, worst_case_factor(builders[kind](t, config.mu, config.l))])
    return [("horizon_sweep", HEADERS["horizon_sweep"], rows)]


def _run_bp(config: BPRunConfig, workers: int) -> Table:
    if config.graph is not None:
        try:
            graph = from_description(config.graph.model_dump())
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"graph: {exc}") from exc
    else:
        graph = random_tree_graph(config.num_variables, config.max_cardinality, RngStream(seed=config.seed))
    result = sum_product(graph, config.max_iters, config.damping, config.tol)
    logger.info(f"sum_product: converged={result.converged} after {result.iterations} rounds")
    try:
        deviation = max_marginal_deviation(result.marginals, brute_force_marginals(graph))
        logger.info(f"max deviation from brute-force marginals: {deviation:.3e}")
    except ResourceLimitError:
        logger.info("joint alphabet too large for the brute-force check")
    rows = [[v, s, float(p)] for v, marginal in enumerate(result.marginals) for s, p in enumerate(marginal)]
    return [("bp_run", HEADERS["bp_run"], rows)]


RUNNERS: Dict[str, Callable[[Any, int], Table]] = {
    "case1_sweep": _run_case1,
    "case2_unfold": _run_case2,
    "redunet_demo": _run_redunet,
    "crate_block": _run_crate,
    "ib_sweep": _run_ib,
    "horizon_sweep": _run_horizon,
    "bp_run": _run_bp,
}


@dataclass(frozen=True)
class RunSummary:
    csv_paths: List[Path]
    manifest_path: Path
    wall_time: float


def run_config(config: BaseModel, workers: int = 1) -> RunSummary:
    """Run one validated experiment and write its CSV files and manifest."""
    started = time.perf_counter()
    out_dir = Path(config.output_path)
    logger.info(f"Running {config.experiment} (seed {config.seed}, {workers} worker(s)) into {out_dir}")
    tables = RUNNERS[config.experiment](config, max(1, workers))
    csv_paths = []
    for name, header, rows in tables:
        path = out_dir / f"{name}.csv"
        emit_report(rows, path, header)
        csv_paths.append(path)
        logger.info(f"Wrote {len(rows)} rows to {path}")
    wall_time = time.perf_counter() - started
    manifest_path = out_dir / f"{config.experiment}.manifest.json"
    _write_manifest(manifest_path, config, wall_time, [p.name for p in csv_paths])
    return RunSummary(csv_paths=csv_paths, manifest_path=manifest_path, wall_time=wall_time)


def _failing_module(exc: BaseException) -> str:
    for frame in reversed(traceback.extract_tb(exc.__traceback__)):
        name = Path(frame.filename).stem
        if name in LAB_MODULES:
            return name
    return "expcli"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Transparent-AI signal processing lab")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command, experiment in SUBCOMMANDS.items():
        sub = subparsers.add_parser(command, help=f"run the {experiment} experiment")
        sub.add_argument("--config", help="JSON experiment document (default: built-in defaults)")
        sub.add_argument("--seed", type=int, help="override the config seed")
        sub.add_argument("--out", help="output directory (overrides output_path)")
        sub.add_argument(
            "--workers",
            type=int,
            default=DEFAULT_WORKERS,
            help=f"threads for Monte Carlo ensembles (default: {DEFAULT_WORKERS})"
        )
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging()
    experiment = SUBCOMMANDS[args.command]
    try:
        config = read_config(args.config, experiment)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["output_path"] = args.out
        if overrides:
            config = load_config({**config.model_dump(mode="json"), **overrides}, experiment)
        summary = run_config(config, args.workers)
    except ConfigError as exc:
        logger.error(f"Config rejected: {exc}")
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except (LabError, np.linalg.LinAlgError) as exc:
        module = _failing_module(exc)
        logger.error(f"{experiment} failed in {module}: {exc}")
        print(f"error: module={module}: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:
        module = _failing_module(exc)
        logger.exception(f"{experiment} failed in {module} with {type(exc).__name__}")
        print(f"error: module={module}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    logger.info(f"Finished {experiment} in {summary.wall_time:.2f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
