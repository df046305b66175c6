"""
Command-line entry point

    python app.py synth --users 20 --pois 10 --seed 7 --out data/fixture.csv
    python app.py train --data data/fixture.csv --config run.cfg --out runs/fixture
    python app.py eval --checkpoint runs/fixture/checkpoint.rvsr --data data/fixture.csv
    python app.py ablate --data data/fixture.csv --out runs/ablation --grid relative --runs 3
    python app.py inspect --checkpoint runs/fixture/checkpoint.rvsr
    python app.py recommend --checkpoint runs/fixture/checkpoint.rvsr --data data/fixture.csv --user 3

Exit codes: 0 success, 2 usage or configuration error, 1 anything else.
"""

from __future__ import annotations

import dataclasses
import sys
from pathlib import Path
from typing import Any, Sequence

import click
import numpy as np
import orjson
import structlog

from models.corpus_io import FORMATS, load_corpus, save_corpus, serialize_corpus
from models.models import Corpus, SynthSpec
from models.synthetic import synth_corpus
from models.windowing import window
from services.checkpoint import (
    CACHE_MAGIC, EI_MAGIC, SRCheckpoint, load_ei, load_relative_cache, load_sr, save_ei, save_relative_cache,
    save_sr,
)
from services.evaluation import evaluate, split
from services.metrics import K_LIST
from services.pipeline import (
    GRIDS, eval_root, run_ablation, summarize, train_runs, write_metrics_csv, write_summary_csv,
)
from utils.config import PROFILE_CATEGORIES, RunConfig, load_run_config, validate_startup_config
from utils.errors import CheckpointError, ConfigError, RevampError, UsageError

logger = structlog.get_logger(__name__)

JSON_OPTS = orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2


class CommandFailed(click.ClickException):
    def __init__(self, message: str, exit_code: int):
        super().__init__(message)
        self.exit_code = exit_code


class RevampGroup(click.Group):
    """Maps project errors onto exit codes for every subcommand"""

    def invoke(self, ctx: click.Context) -> Any:
        try:
            return super().invoke(ctx)
        except (UsageError, ConfigError) as e:
            raise CommandFailed(str(e), 2) from e
        except RevampError as e:
            raise CommandFailed(str(e), 1) from e


def _overrides(pairs: Sequence[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"--set expects KEY=VALUE, got {pair!r}")
        out[key.strip()] = value.strip()
    return out


def _run_config(config_path: str | None, seed: int | None, pairs: Sequence[str]) -> RunConfig:
    overrides: dict[str, Any] = dict(_overrides(pairs))
    if seed is not None:
        overrides["seed"] = seed
    return load_run_config(config_path, **overrides)


def _echo_json(data: Any) -> None:
    click.echo(orjson.dumps(data, option=JSON_OPTS).decode())


def _check_vocabulary(ckpt: SRCheckpoint, corpus: Corpus) -> None:
    found = (corpus.num_pois, corpus.num_app_categories, corpus.num_poi_categories)
    expected = (ckpt.num_pois, len(ckpt.app_names), len(ckpt.poi_names))
    if found != expected:
        raise CheckpointError(
            f"corpus cardinalities (POIs, app, POI categories) {found} do not match the checkpoint's {expected}"
        )


config_option = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                             help="flat key = value run configuration")
seed_option = click.option("--seed", type=int, default=None, help="root seed (REVAMP_SEED wins when set)")
set_option = click.option("--set", "pairs", multiple=True, metavar="KEY=VALUE",
                          help="override one run configuration field")
data_option = click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True,
                           help="corpus file (.csv or .jsonl)")
format_option = click.option("--format", "fmt", type=click.Choice(FORMATS), default=None,
                             help="corpus format (default: from the file suffix)")


@click.group(cls=RevampGroup)
def cli() -> None:
    """Two-phase next-POI recommender over coarse-grained app/POI category logs"""
    validate_startup_config()


@cli.command()
@data_option
@format_option
@config_option
@seed_option
@set_option
@click.option("--out", type=click.Path(file_okay=False), required=True, help="output directory")
@click.option("--runs", type=click.IntRange(min=1), default=1, show_default=True,
              help="repeat with derived seeds and report mean and sample std")
def train(data: str, fmt: str | None, config_path: str | None, seed: int | None, pairs: tuple[str, ...],
          out: str, runs: int) -> None:
    """Train EI then the sequential model; write checkpoints and metrics"""
    config = _run_config(config_path, seed, pairs)
    corpus = load_corpus(data, fmt, config.min_checkins)
    results = train_runs(corpus, config, runs)

    out_dir = Path(out)
    first = results[0]
    save_sr(out_dir / "checkpoint.rvsr", first.model, list(corpus.app_names), list(corpus.poi_names))
    save_ei(out_dir / "ei.rvei", first.model.table)
    save_relative_cache(out_dir / "relative_cache.rvrc", first.model.encoder.matrices())

    rows = [row for r in results for row in r.rows]
    write_metrics_csv(out_dir / "metrics.csv", rows)
    write_summary_csv(out_dir / "summary.csv", summarize(rows, "test"))
    (out_dir / "report.json").write_bytes(first.test_report.to_json(include_ranks=True))

    _echo_json({
        "best_epoch": first.best_epoch,
        "runs": len(results),
        "test": first.test_report.metrics,
        "rms": {"app": first.rms[0], "poi": first.rms[1]},
        "out": str(out_dir),
    })


@cli.command("eval")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@data_option
@format_option
@seed_option
@click.option("--negatives", type=click.IntRange(min=1), default=None, help="negatives per user")
@click.option("--phase", type=click.Choice(["val", "test"]), default="test", show_default=True)
@click.option("--workers", type=click.IntRange(min=1), default=None, help="evaluation threads")
@click.option("--ranks/--no-ranks", default=False, help="include per-user ranks in the report")
def eval_command(checkpoint: str, data: str, fmt: str | None, seed: int | None, negatives: int | None,
                 phase: str, workers: int | None, ranks: bool) -> None:
    """Re-evaluate a checkpoint under leave-one-out with sampled negatives"""
    ckpt = load_sr(checkpoint)
    if negatives is not None:
        ckpt = dataclasses.replace(ckpt, config=ckpt.config.variant(eval_negatives=negatives))
    corpus = load_corpus(data, fmt, ckpt.config.min_checkins)
    _check_vocabulary(ckpt, corpus)
    root = eval_root(ckpt.config.seed if seed is None else seed, phase)
    report = evaluate(ckpt.model(), split(corpus), root, K_LIST, phase=phase, workers=workers)
    click.echo(report.to_json(include_ranks=ranks).decode())


@cli.command()
@data_option
@format_option
@config_option
@seed_option
@set_option
@click.option("--out", type=click.Path(file_okay=False), required=True, help="output directory")
@click.option("--grid", type=click.Choice(sorted(GRIDS)), default="relative", show_default=True)
@click.option("--runs", type=click.IntRange(min=1), default=3, show_default=True)
def ablate(data: str, fmt: str | None, config_path: str | None, seed: int | None, pairs: tuple[str, ...],
           out: str, grid: str, runs: int) -> None:
    """Train every variant of an ablation grid and write a comparison CSV"""
    config = _run_config(config_path, seed, pairs)
    corpus = load_corpus(data, fmt, config.min_checkins)
    result = run_ablation(corpus, config, grid, runs)
    out_dir = Path(out)
    write_metrics_csv(out_dir / "metrics.csv", result.rows)
    summary = result.summary()
    write_summary_csv(out_dir / "ablation.csv", summary)
    click.echo(summary.to_csv(index=False, float_format="%.6g", lineterminator="\n"), nl=False)


@cli.command()
@click.option("--users", type=click.IntRange(min=1), default=20, show_default=True)
@click.option("--pois", type=click.IntRange(min=2), default=10, show_default=True)
@click.option("--app-categories", type=click.IntRange(min=1), default=None)
@click.option("--poi-categories", type=click.IntRange(min=1), default=None)
@click.option("--profile", type=click.Choice(sorted(PROFILE_CATEGORIES)), default=None,
              help="take category cardinalities from a dataset profile")
@click.option("--length", type=click.IntRange(min=1), default=20, show_default=True,
              help="check-ins per user")
@click.option("--correlation", type=click.FloatRange(0.0, 1.0), default=1.0, show_default=True)
@click.option("--route-length", type=click.IntRange(min=1), default=4, show_default=True)
@click.option("--seed", type=int, default=7, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="output file (default: stdout)")
@click.option("--format", "fmt", type=click.Choice(FORMATS), default=None)
def synth(users: int, pois: int, app_categories: int | None, poi_categories: int | None, profile: str | None,
          length: int, correlation: float, route_length: int, seed: int, out: str | None,
          fmt: str | None) -> None:
    """Write a seeded synthetic corpus"""
    n_a, n_s = PROFILE_CATEGORIES[profile] if profile else (5, 5)
    spec = SynthSpec(
        num_users=users,
        num_pois=pois,
        num_app_categories=app_categories or n_a,
        num_poi_categories=poi_categories or n_s,
        seq_len=length,
        correlation=correlation,
        route_length=route_length,
    )
    corpus = synth_corpus(spec, seed)
    if out is None:
        click.echo(serialize_corpus(corpus, fmt or "csv").decode(), nl=False)
    else:
        save_corpus(corpus, out, fmt)


@cli.command()
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
def inspect(checkpoint: str) -> None:
    """Dump a checkpoint header and per-tensor norms as JSON"""
    with open(checkpoint, "rb") as fh:
        magic = fh.read(4)
    if magic == EI_MAGIC:
        table = load_ei(checkpoint)
        _echo_json({
            "kind": "ei",
            "header": {"D": table.dim, "num_app_categories": table.A.shape[0],
                       "num_poi_categories": table.S.shape[0]},
            "norms": {"ei.A": float(np.linalg.norm(table.A.data)), "ei.S": float(np.linalg.norm(table.S.data))},
        })
    elif magic == CACHE_MAGIC:
        cache = load_relative_cache(checkpoint)
        _echo_json({"kind": "relative_cache", "entries": len(cache), "keys": sorted(cache)[:20]})
    else:
        ckpt = load_sr(checkpoint)
        _echo_json({"kind": "sr", "header": ckpt.header(), "norms": ckpt.norms(), "config": ckpt.config.snapshot()})


@cli.command()
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@data_option
@format_option
@click.option("--user", "user_id", type=int, required=True, help="user id as written in the corpus")
@click.option("--top", type=click.IntRange(min=1), default=10, show_default=True)
def recommend(checkpoint: str, data: str, fmt: str | None, user_id: int, top: int) -> None:
    """Top POIs and next app / POI categories after a user's full history"""
    ckpt = load_sr(checkpoint)
    corpus = load_corpus(data, fmt, ckpt.config.min_checkins)
    _check_vocabulary(ckpt, corpus)
    try:
        idx = corpus.index_of(user_id)
    except KeyError as e:
        raise UsageError(f"user {user_id} is not in the (filtered) corpus") from e
    model = ckpt.model()
    rec = model.recommend(window(corpus.users[idx], ckpt.config.seq_len, model.pad_id), top)
    _echo_json({
        "user": user_id,
        "pois": [{"poi": p, "score": s} for p, s in rec.pois],
        "app_categories": [{"id": a, "name": ckpt.app_names[a], "score": s} for a, s in rec.app_categories],
        "poi_categories": [{"id": c, "name": ckpt.poi_names[c], "score": s} for c, s in rec.poi_categories],
    })


def main(argv: Sequence[str] | None = None) -> int:
    """Run the CLI and return its exit code"""
    try:
        result = cli.main(args=list(argv) if argv is not None else None, prog_name="revamp",
                          standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except Exception as e:  # noqa: BLE001
        logger.error("command_failed", error=str(e), type=type(e).__name__)
        click.echo(f"Error: {e}", err=True)
        return 1
    return result if isinstance(result, int) else 0


if __name__ == "__main__":
    sys.exit(main())
