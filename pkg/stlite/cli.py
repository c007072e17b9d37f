from contextlib import contextmanager
from dataclasses import asdict, replace
import json
import logging
from pathlib import Path
import sys
from typing import Tuple, Union

import click
from click.core import ParameterSource

from stlite.config import (
    DEFAULT_COVERAGE,
    DEFAULT_DELTA,
    DEFAULT_EPSILON,
    POOLING_KINDS,
    VECTOR_SOURCES,
    Command,
    PolicyKind,
    RunConfig,
)
from stlite.container import (
    KIND_ATTENTION,
    atomic_file,
    container_kind,
    load_attention,
    load_cache,
    save_cache,
    write_json,
)
from stlite.costmodel import format_speedup_table, load_latency_table, speedup_report
from stlite.diagnostics import (
    audit_attention_rows,
    gap_bound_trials,
    layer_attention,
    sparsity_profile,
)
from stlite.maps import emit_retention_maps
from stlite.policy import compress_caches
from stlite.simulator import (
    StreamScenario,
    default_scenario,
    format_summary,
    run_experiment,
)

logger = logging.getLogger(__name__)

POLICY_CHOICE = click.Choice([str(kind) for kind in PolicyKind])
DEFAULT_SIMULATE_POLICIES = ("st-lite", "snapkv", "random")
DEFAULT_SIMULATE_BETAS = (0.05, 0.1, 0.2, 0.4)
GAP_BOUND_TRIALS = 10_000


@contextmanager
def exit_codes():
    """Map failures onto the exit status contract: 2 for invalid input, 1 for I/O"""
    try:
        yield
    except ValueError as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(2)
    except OSError as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(1)


def _resolve_paths(
    paths: Tuple[str, ...], input_opt: Union[str, None], output_opt: Union[str, None]
):
    paths = list(paths)
    input_path = input_opt or (paths.pop(0) if paths else None)
    output_path = output_opt or (paths.pop(0) if paths else None)
    if paths:
        raise click.UsageError(f"unexpected extra paths: {' '.join(paths)}")
    return input_path, output_path


def _echo_config(ctx: click.Context, config: RunConfig):
    if ctx.obj["VERBOSE"]:
        click.echo("Run configuration:", err=True)
        for name, value in asdict(config).items():
            click.echo(f"  * {name}: {value}", err=True)


def budget_options(f):
    """The flags that mirror BudgetConfig"""
    options = [
        click.option(
            "--delta",
            default=DEFAULT_DELTA,
            show_default=True,
            type=int,
            help="observation window: the last DELTA positions vote on importance",
        ),
        click.option(
            "--css/--no-css",
            "enable_css",
            default=True,
            show_default=True,
            help="add spatial saliency of each screenshot grid to visual scores",
        ),
        click.option(
            "--tsg/--no-tsg",
            "enable_tsg",
            default=True,
            show_default=True,
            help="gate historical visual tokens by redundancy with the current frame",
        ),
        click.option(
            "--normalize-terms",
            is_flag=True,
            help="min-max normalise attention and saliency over visual tokens",
        ),
        click.option(
            "--seed", type=int, default=0, show_default=True, help="seed for random"
        ),
        click.option(
            "--pooling",
            type=click.Choice(POOLING_KINDS),
            default=None,
            help="smooth the attention votes over neighbouring positions",
        ),
        click.option("--kernel-size", default=7, show_default=True, type=int),
        click.option(
            "--retain-window/--no-retain-window",
            default=True,
            show_default=True,
            help="always keep the observation window inside the budget",
        ),
        click.option(
            "--duplicate-cutoff",
            default=1.0,
            show_default=True,
            type=float,
            help="evict history at or above this redundancy; above 1 disables",
        ),
        click.option(
            "--strict-gate-ties",
            is_flag=True,
            help="admit exactly the budget through the gate, ties by position",
        ),
        click.option(
            "--vector-source",
            type=click.Choice(VECTOR_SOURCES),
            default="keys",
            show_default=True,
            help="vectors compared by the spatial and trajectory terms",
        ),
    ]
    for option in reversed(options):
        f = option(f)
    return f


@click.group(invoke_without_command=True)
@click.version_option()
@click.option(
    "--threads",
    envvar="STLITE_THREADS",
    default=1,
    show_default=True,
    type=click.IntRange(min=0),
    help="worker threads for layer compression, 0 for one per CPU",
)
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def cli(ctx: click.Context, threads: int, verbose: bool):
    """spatio-trajectory KV cache compression for long-horizon GUI agents

    Options of stlite must occur before any subcommands. Subcommands may have their
    own options, which must be provided after the subcommand.

    Caches are read and written as STKV containers: a directory holding manifest.json
    and one little-endian f32 blob per layer, head and kind.
    """
    ctx.ensure_object(dict)
    ctx.obj["THREADS"] = threads
    ctx.obj["VERBOSE"] = verbose
    if verbose:
        logging.getLogger("stlite").setLevel(logging.DEBUG)

    if ctx.invoked_subcommand is None:
        click.echo(ctx.get_help())


@cli.command()
@click.argument("paths", nargs=-1, type=click.Path())
@click.option("--in", "input_opt", type=click.Path(), help="input STKV container")
@click.option("--out", "output_opt", type=click.Path(), help="output STKV container")
@click.option(
    "-p",
    "--policy",
    type=POLICY_CHOICE,
    default=str(PolicyKind.ST_LITE),
    show_default=True,
)
@click.option("-b", "--beta", type=float, required=True, help="retained fraction")
@budget_options
@click.option(
    "--ledger",
    type=click.Path(),
    default=None,
    help="where to write the eviction ledger [default: OUTPUT.ledger.json]",
)
@click.option("--full-ledger", is_flag=True, help="include per-token scores")
@click.option("--emit-maps", is_flag=True, help="write a retention map per frame")
@click.option(
    "--maps-dir",
    type=click.Path(),
    default=None,
    help="where to write retention maps [default: OUTPUT.maps]",
)
@click.pass_context
def compress(
    ctx: click.Context,
    paths,
    input_opt,
    output_opt,
    policy: str,
    beta: float,
    ledger,
    full_ledger: bool,
    emit_maps: bool,
    maps_dir,
    **budget,
):
    """Compress every layer of the container at INPUT and write it to OUTPUT

    Paths may be given positionally (INPUT OUTPUT) or with --in and --out.
    """
    input_path, output_path = _resolve_paths(paths, input_opt, output_opt)
    with exit_codes():
        config = RunConfig(
            command=Command.COMPRESS,
            input_path=input_path,
            output_path=output_path,
            policy=policy,
            beta=beta,
            full_ledger=full_ledger,
            emit_maps=emit_maps,
            threads=ctx.obj["THREADS"],
            **budget,
        )
        _echo_config(ctx, config)
        budget_config = config.budget_config()

        caches = load_cache(config.input_path)
        results = compress_caches(caches, budget_config, config.policy, config.threads)
        save_cache(
            [r.apply(c) for r, c in zip(results, caches, strict=True)],
            config.output_path,
        )
        ledger_path = ledger or f"{config.output_path}.ledger.json"
        write_json(
            {
                "policy": str(config.policy),
                "config": asdict(budget_config),
                "layers": [r.to_json(config.full_ledger) for r in results],
            },
            ledger_path,
        )
        if config.emit_maps:
            directory = Path(maps_dir or f"{config.output_path}.maps")
            written = sum(
                len(emit_retention_maps(r, c, directory))
                for r, c in zip(results, caches, strict=True)
            )
            logger.info("wrote %d retention maps to %s", written, directory)

        kept = sum(r.budget for r in results)
        total = sum(c.seq_len for c in caches)
        click.echo(
            f"{config.policy}: kept {kept}/{total} tokens over {len(caches)} layers "
            f"-> {config.output_path}"
        )


@cli.command()
@click.option(
    "--in", "input_opt", type=click.Path(), help="scenario JSON [default: built in]"
)
@click.option(
    "--out", "output_opt", type=click.Path(), help="JSONL rows [default: stdout]"
)
@click.option(
    "-p",
    "--policy",
    "policies",
    type=POLICY_CHOICE,
    multiple=True,
    help="policy to compare, repeatable [default: st-lite, snapkv, random]",
)
@click.option(
    "-b",
    "--beta",
    "betas",
    type=float,
    multiple=True,
    help="budget ratio, repeatable [default: 0.05, 0.1, 0.2, 0.4]",
)
@click.option(
    "--scenario-seed",
    type=int,
    default=None,
    help="override the scenario's seed",
)
@budget_options
@click.pass_context
def simulate(
    ctx: click.Context,
    input_opt,
    output_opt,
    policies,
    betas,
    scenario_seed,
    **budget,
):
    """Sweep policies and budgets over a synthetic GUI trajectory

    Prints one JSON row per (policy, beta) and a summary table. Without --delta the
    window is the smaller of 32 and the scenario's stored queries.
    """
    with exit_codes():
        config = RunConfig(
            command=Command.SIMULATE,
            input_path=input_opt,
            output_path=output_opt,
            policies=policies or DEFAULT_SIMULATE_POLICIES,
            betas=betas or DEFAULT_SIMULATE_BETAS,
            threads=ctx.obj["THREADS"],
            **budget,
        )
        if config.input_path:
            with open(config.input_path) as f:
                try:
                    scenario = StreamScenario.from_json(json.load(f))
                except json.JSONDecodeError as e:
                    message = f"{config.input_path}: not valid JSON ({e})"
                    raise ValueError(message) from e
        else:
            scenario = default_scenario()
        if scenario_seed is not None:
            scenario = StreamScenario.from_json(
                {**scenario.to_json(), "seed": scenario_seed}
            )
        if ctx.get_parameter_source("delta") == ParameterSource.DEFAULT:
            config = replace(
                config, delta=min(DEFAULT_DELTA, scenario.window_queries)
            )
        _echo_config(ctx, config)

        rows = run_experiment(
            scenario,
            config.policies,
            config.betas,
            config.budget_config(config.betas[0]),
            config.threads,
        )
        lines = "".join(row.to_line() + "\n" for row in rows)
        summary = format_summary(rows)
        if config.output_path:
            with atomic_file(config.output_path) as f:
                f.write(lines)
            with atomic_file(f"{config.output_path}.summary.txt") as f:
                f.write(summary)
        else:
            click.echo(lines, nl=False)
            click.echo(summary, nl=False)


@cli.command()
@click.argument("input_path", type=click.Path())
@click.option(
    "--out", "output_opt", type=click.Path(), help="profile JSON [default: stdout]"
)
@click.option(
    "--coverage",
    default=DEFAULT_COVERAGE,
    show_default=True,
    type=float,
    help="attention mass a row's top keys must cover",
)
@click.option(
    "--epsilon",
    default=DEFAULT_EPSILON,
    show_default=True,
    type=float,
    help="largest layer-to-layer sparsity change that still counts as uniform",
)
@click.option(
    "--delta",
    default=DEFAULT_DELTA,
    show_default=True,
    type=int,
    help="observation window, when INPUT_PATH is a KV container",
)
@click.option(
    "--trials",
    default=GAP_BOUND_TRIALS,
    show_default=True,
    type=click.IntRange(min=0),
    help="random logit vectors for the gap-bound check",
)
@click.option("--seed", type=int, default=0, show_default=True)
@click.pass_context
def diagnose(
    ctx: click.Context,
    input_path,
    output_opt,
    coverage: float,
    epsilon: float,
    delta: int,
    trials: int,
    seed: int,
):
    """Profile attention sparsity across layers and check the softmax gap bound

    INPUT_PATH is an attention dump or a KV container; for a container, the attention
    of each layer's observation window is profiled.
    """
    with exit_codes():
        config = RunConfig(
            command=Command.DIAGNOSE,
            input_path=input_path,
            output_path=output_opt,
            coverage=coverage,
            epsilon=epsilon,
            delta=delta,
            seed=seed,
        )
        _echo_config(ctx, config)
        if container_kind(config.input_path) == KIND_ATTENTION:
            attns = [m.data for m in load_attention(config.input_path)]
        else:
            budget_config = config.budget_config()
            attns = [
                layer_attention(cache, budget_config)
                for cache in load_cache(config.input_path)
            ]
        profile = sparsity_profile(attns, config.epsilon, config.coverage)
        dump_violations = sum(audit_attention_rows(a) for a in attns)
        trial_violations = gap_bound_trials(trials, config.seed)
        payload = {
            **profile.to_json(),
            "coverage": config.coverage,
            "gap_bound": {
                "trials": trials,
                "trial_violations": trial_violations,
                "rows_checked": sum(int(a.shape[0]) for a in attns),
                "row_violations": dump_violations,
                "violations": trial_violations + dump_violations,
            },
        }
        if config.output_path:
            write_json(payload, config.output_path)
        else:
            click.echo(json.dumps(payload, indent=2, sort_keys=True))


@cli.command()
@click.argument("input_path", type=click.Path())
@click.option("--out", "output_opt", type=click.Path(), help="speedup rows as JSON")
@click.pass_context
def report(ctx: click.Context, input_path, output_opt):
    """Speedups from a latency table: prefill, decoding and end to end

    INPUT_PATH is a JSON list of {screenshots, prefill_full, prefill_comp, decode_full,
    decode_comp}, optionally with the published speedups under "published".
    """
    with exit_codes():
        config = RunConfig(
            command=Command.REPORT, input_path=input_path, output_path=output_opt
        )
        _echo_config(ctx, config)
        rows = speedup_report(load_latency_table(config.input_path))
        if config.output_path:
            write_json([row.to_json() for row in rows], config.output_path)
        click.echo(format_speedup_table(rows), nl=False)
