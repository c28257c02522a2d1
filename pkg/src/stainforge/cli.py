"""stainforge command line: preprocess | train | evaluate | serve.

Exit codes: 0 success, 1 internal error, 2 user/config error.
"""

from __future__ import annotations

import sys
import traceback

import click

from .pipeline import UserError, load_config, run_evaluate, run_preprocess, run_train


def _load(config_path, seed):
    cfg = load_config(config_path)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def _run(stage, config_path, seed):
    try:
        cfg = _load(config_path, seed)
        summary = stage(cfg)
        click.echo(f"ok: config_hash={summary.get('config_hash', '')}")
        return 0
    except UserError as e:
        click.echo(f"error: {e}", err=True)
        return 2
    except Exception:
        traceback.print_exc()
        return 1


@click.group()
def main():
    """Desk-scale H&E to mIF translation pipeline."""


@main.command()
@click.option("--config", "config_path", required=True, type=str)
@click.option("--seed", type=int, default=None)
@click.option("--jobs", type=int, default=1, help="Reserved; stages run single-threaded.")
def preprocess(config_path, seed, jobs):
    """QC, AF subtraction, normalization, dilation and GMM pseudo-labeling."""
    sys.exit(_run(run_preprocess, config_path, seed))


@main.command()
@click.option("--config", "config_path", required=True, type=str)
@click.option("--seed", type=int, default=None)
@click.option("--jobs", type=int, default=1)
def train(config_path, seed, jobs):
    """Train the translator on the preprocessed training split."""
    sys.exit(_run(run_train, config_path, seed))


@main.command()
@click.option("--config", "config_path", required=True, type=str)
@click.option("--seed", type=int, default=None)
@click.option("--jobs", type=int, default=1)
def evaluate(config_path, seed, jobs):
    """Pixel metrics, cell-level probe metrics, baselines and plots."""
    sys.exit(_run(run_evaluate, config_path, seed))


@main.command()
@click.option("--config", "config_path", required=True, type=str)
@click.option("--port", type=int, default=None)
@click.option("--seed", type=int, default=None)
def serve(config_path, port, seed):
    """Local HTTP service for interactive AF-parameter tuning."""
    try:
        cfg = _load(config_path, seed)
        if port is not None:
            cfg["serve"]["port"] = port
        import uvicorn

        from .server import create_app

        app = create_app(cfg)
        uvicorn.run(app, host=cfg["serve"]["host"], port=cfg["serve"]["port"])
    except UserError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(2)


if __name__ == "__main__":
    main()
