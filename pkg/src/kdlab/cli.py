"""Command-line surface tying the pipeline together.

Commands: gen, train, select-lambda, kappa, analyze, report.  Every command
accepts --config pointing at a JSON document whose keys override defaults;
explicit flags override the config file.  Exit codes: 0 success, 2 usage,
3 data/validation, 4 resource budget.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import analysis, oracle as oracle_mod, runio, sensitivity, trainer as trainer_mod
from .model import ModelConfig, StudentModel, load_checkpoint, save_checkpoint
from .objectives import MODES, ObjectiveConfig
from .sensitivity import EngineConfig, ResourceBudgetError
from .trainer import TrainConfig


class ValidationFailure(click.ClickException):
    exit_code = 3


def _guard(fn):
    """Map domain errors onto the documented exit codes."""
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ResourceBudgetError as exc:
            click.echo(f"resource budget exceeded: {exc}", err=True)
            sys.exit(4)
        except (ValueError, FileNotFoundError, IndexError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(3)
    wrapper.__name__ = fn.__name__
    return wrapper


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    return runio.read_json(Path(path))


def _merged(cfg_file: dict, section: str, overrides: dict) -> dict:
    merged = dict(cfg_file.get(section, {}))
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


@click.group()
def main():
    """Distillation laboratory: scripted oracles, students, sensitivity, reports."""


@main.command()
@click.argument("domain", type=click.Choice(oracle_mod.DOMAINS))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--force", is_flag=True, help="overwrite differing existing files")
def gen(domain, seed, out, force):
    """Generate the oracle spec and the 4000/500/30 dataset for a domain."""
    _gen(domain, seed, out, force)


@_guard
def _gen(domain, seed, out, force):
    spec = oracle_mod.build_oracle(domain)
    dataset = oracle_mod.generate_dataset(spec, seed)
    out = Path(out)
    files = {
        out / f"oracle_{domain}.json": oracle_mod.oracle_to_json(spec),
        out / f"dataset_{domain}_seed{seed}.jsonl": oracle_mod.dataset_to_jsonl(dataset),
    }
    for path, content in files.items():
        if path.exists() and path.read_text() != content and not force:
            raise ValueError(f"{path} exists with different content (use --force)")
    for path, content in files.items():
        runio.atomic_write(path, content)
        click.echo(f"wrote {path}")


def _load_data(data_dir: str, domain: str, seed: int):
    data_dir = Path(data_dir)
    spec_path = data_dir / f"oracle_{domain}.json"
    ds_path = data_dir / f"dataset_{domain}_seed{seed}.jsonl"
    if not spec_path.exists() or not ds_path.exists():
        raise ValueError(f"missing dataset files under {data_dir} "
                         f"(expected {spec_path.name}, {ds_path.name})")
    spec = oracle_mod.oracle_from_json(spec_path.read_text())
    dataset = oracle_mod.dataset_from_jsonl(ds_path.read_text(), domain, seed)
    return spec, dataset


@main.command()
@click.option("--data", "data_dir", type=click.Path(), required=True)
@click.option("--domain", required=True)
@click.option("--data-seed", type=int, default=0, show_default=True)
@click.option("--objective", "mode", type=click.Choice(MODES), default="soft")
@click.option("--lambda", "lam", type=float, default=0.5, show_default=True)
@click.option("--divergence", default="fkl", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--max-epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--out", type=click.Path(), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
def train(data_dir, domain, data_seed, mode, lam, divergence, seed,
          max_epochs, batch_size, out, config_path):
    """Train one student under the chosen objective; writes checkpoint + history."""
    _train(data_dir, domain, data_seed, mode, lam, divergence, seed,
           max_epochs, batch_size, out, config_path)


@_guard
def _train(data_dir, domain, data_seed, mode, lam, divergence, seed,
           max_epochs, batch_size, out, config_path):
    cfg_file = _load_config(config_path)
    spec, dataset = _load_data(data_dir, domain, data_seed)
    objective = ObjectiveConfig(**_merged(cfg_file, "objective", {
        "mode": mode, "lam": lam, "divergence": divergence}))
    train_kw = _merged(cfg_file, "train", {
        "seed": seed, "max_epochs": max_epochs, "batch_size": batch_size})
    tcfg = TrainConfig(**train_kw)
    resolved = runio.resolve_config(domain=domain, data_seed=data_seed,
                                    objective=objective, train=tcfg,
                                    model=ModelConfig())
    model = StudentModel(ModelConfig(), seed=tcfg.seed)
    model, history = trainer_mod.train(model, dataset, spec, objective, tcfg)
    out = Path(out)
    runio.atomic_write(out, save_checkpoint(model, extra={
        "resolved_config": resolved, "objective": mode,
        "best_metric": history.best_metric, "criterion": history.criterion}))
    runio.write_json(out.with_suffix(".history.json"), {
        "resolved_config": resolved,
        "epochs": history.epochs,
        "best_epoch": history.best_epoch,
        "best_metric": history.best_metric,
        "stopped_epoch": history.stopped_epoch,
        "criterion": history.criterion,
    })
    click.echo(f"best {history.criterion}={history.best_metric:.6f} "
               f"(epoch {history.best_epoch}); wrote {out}")


@main.command("select-lambda")
@click.option("--data", "data_dir", type=click.Path(), required=True)
@click.option("--domain", required=True)
@click.option("--data-seed", type=int, default=0, show_default=True)
@click.option("--objective", "mode", default="hybrid_static", show_default=True)
@click.option("--seeds", type=int, default=3, show_default=True,
              help="training seeds per grid point (standard error source)")
@click.option("--max-epochs", type=int, default=None)
@click.option("--out", type=click.Path(), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
def select_lambda_cmd(data_dir, domain, data_seed, mode, seeds, max_epochs, out, config_path):
    """Run the 9-point mixing-coefficient grid with the per-domain rule."""
    _select_lambda(data_dir, domain, data_seed, mode, seeds, max_epochs, out, config_path)


@_guard
def _select_lambda(data_dir, domain, data_seed, mode, seeds, max_epochs, out, config_path):
    cfg_file = _load_config(config_path)
    spec, dataset = _load_data(data_dir, domain, data_seed)
    train_kw = _merged(cfg_file, "train", {"max_epochs": max_epochs})
    tcfg = TrainConfig(**train_kw)
    lam, stats = trainer_mod.run_lambda_grid(
        dataset, spec, mode, tcfg,
        model_factory=lambda s: StudentModel(ModelConfig(), seed=s),
        seeds=tuple(range(seeds)), log=click.echo)
    resolved = runio.resolve_config(domain=domain, data_seed=data_seed,
                                    objective_mode=mode, train=tcfg, seeds=seeds)
    runio.write_json(Path(out), {
        "resolved_config": resolved,
        "selected_lambda": lam,
        "grid": [{"lambda": s.lam, "mean": s.mean, "se": s.se} for s in stats],
    })
    click.echo(f"selected lambda={lam}")


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(), required=True)
@click.option("--domain", required=True)
@click.option("--data-seed", type=int, default=0, show_default=True)
@click.option("--eps", type=float, default=0.0, show_default=True,
              help="branch-probability pruning threshold")
@click.option("--exact", is_flag=True, help="require exact enumeration (forbids eps > 0)")
@click.option("--row-budget", type=int, default=8192, show_default=True)
@click.option("--node-budget", type=int, default=50_000_000, show_default=True)
@click.option("--resume", "resume_flag", is_flag=True,
              help="reuse completed states from a previous interrupted run")
@click.option("--out", type=click.Path(), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
def kappa(checkpoint, data_dir, domain, data_seed, eps, exact, row_budget,
          node_budget, resume_flag, out, config_path):
    """Exact (or pruned, with recorded bounds) sensitivity table for a student."""
    _kappa(checkpoint, data_dir, domain, data_seed, eps, exact, row_budget,
           node_budget, resume_flag, out, config_path)


@_guard
def _kappa(checkpoint, data_dir, domain, data_seed, eps, exact, row_budget,
           node_budget, resume_flag, out, config_path):
    if exact and eps > 0:
        raise ValueError("--exact forbids eps > 0")
    cfg_file = _load_config(config_path)
    spec, dataset = _load_data(data_dir, domain, data_seed)
    model, extra = load_checkpoint(Path(checkpoint).read_bytes())
    kw = _merged(cfg_file, "kappa", {
        "eps": eps, "row_budget": row_budget, "node_budget": node_budget})
    engine = EngineConfig(**kw)
    out = Path(out)
    resume_path = out.with_suffix(".partial.jsonl") if resume_flag else None
    table = sensitivity.build_kappa_table(
        model, spec, dataset.eval, engine,
        resume_path=resume_path, log=lambda m: click.echo(m, err=True))
    table.metadata["resolved_config"] = runio.resolve_config(
        domain=domain, data_seed=data_seed, engine=engine,
        checkpoint_config=extra.get("resolved_config", {}))
    runio.atomic_write(out, sensitivity.kappa_table_to_csv(table))
    click.echo(f"wrote {out} ({table.n_examples * table.template_length} states)")


@main.command()
@click.option("--data", "data_dir", type=click.Path(), required=True)
@click.option("--domain", required=True)
@click.option("--data-seed", type=int, default=0, show_default=True)
@click.option("--model", "model_specs", multiple=True, required=True,
              help="NAME=CHECKPOINT, e.g. hard=ckpt/hard.bin")
@click.option("--table", "table_specs", multiple=True,
              help="NAME=KAPPA_CSV for models with sensitivity tables")
@click.option("--repeats", type=int, default=30, show_default=True)
@click.option("--fraction", type=float, default=0.20, show_default=True)
@click.option("--exclude-terminal", is_flag=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def analyze(data_dir, domain, data_seed, model_specs, table_specs, repeats,
            fraction, exclude_terminal, seed, out_dir):
    """Exposure bias, regional decomposition, confidence study, heatmap CSVs."""
    _analyze(data_dir, domain, data_seed, model_specs, table_specs, repeats,
             fraction, exclude_terminal, seed, out_dir)


@_guard
def _analyze(data_dir, domain, data_seed, model_specs, table_specs, repeats,
             fraction, exclude_terminal, seed, out_dir):
    spec, dataset = _load_data(data_dir, domain, data_seed)
    models = {}
    for item in model_specs:
        name, _, path = item.partition("=")
        if not path:
            raise ValueError(f"--model expects NAME=PATH, got {item!r}")
        models[name], _ = load_checkpoint(Path(path).read_bytes())
    tables = {}
    for item in table_specs:
        name, _, path = item.partition("=")
        if name not in models:
            raise ValueError(f"table {name!r} has no matching --model entry")
        tables[name] = sensitivity.kappa_table_from_csv(Path(path).read_text())

    out_dir = Path(out_dir)
    report = _build_report(spec, dataset, models, tables, repeats, fraction,
                           exclude_terminal, seed)
    runio.write_json(out_dir / f"report_{domain}.json", report)
    for name, table in tables.items():
        kabs = np.abs(table.kappa)
        for e in range(table.n_examples):
            meta = {"domain": domain, "model": name, "example": e,
                    "decision_positions": list(spec.decision_positions),
                    "model_id": table.model_id}
            runio.atomic_write(out_dir / f"heatmap_{domain}_{name}_ex{e:02d}.csv",
                               runio.heatmap_csv(kabs[e], table.actions, meta))
    click.echo(f"wrote report and heatmaps under {out_dir}")


def _build_report(spec, dataset, models, tables, repeats, fraction,
                  exclude_terminal, seed) -> dict:
    partition = None
    if tables:
        scores = np.mean([tb.kappa_state for tb in tables.values()], axis=0)
        any_table = next(iter(tables.values()))
        partition = sensitivity.partition_bridge_garden(
            any_table, fraction=fraction, exclude_terminal=exclude_terminal,
            scores=scores)
    entries = {}
    for name, model in models.items():
        eb = analysis.exposure_bias(model, spec, dataset.eval, repeats=repeats, seed=seed)
        entry = eb.as_dict()
        entry["model_id"] = model.model_id()
        if name in tables:
            table = tables[name]
            if table.model_id != model.model_id():
                raise ValueError(f"model {name!r} does not match its kappa table")
            contrib = analysis.regional_contributions(model, table, partition,
                                                      spec, dataset.eval)
            entry.update(contrib)
            rho, ct_b, ct_g = analysis.confidence_kappa_correlation(spec, table, partition)
            entry.update({"spearman_rho": rho, "mean_ct_bridge": ct_b,
                          "mean_ct_garden": ct_g})
        entries[name] = entry
    doc = {
        "domain": spec.domain,
        "repeats": repeats,
        "partition": None if partition is None else {
            "fraction": partition.fraction, "size": partition.size,
            "exclude_terminal": partition.exclude_terminal,
            "ranking": "mean kappa_state over provided tables",
        },
        "models": entries,
        "resolved_config": runio.resolve_config(
            domain=spec.domain, repeats=repeats, fraction=fraction,
            exclude_terminal=exclude_terminal, seed=seed),
    }
    return doc


@main.command()
@click.option("--input", "inputs", multiple=True, required=True,
              help="report JSON files produced by analyze")
@click.option("--out", type=click.Path(), required=True)
def report(inputs, out):
    """Aggregate analyze reports into one flat CSV (one row per domain/objective)."""
    _report(inputs, out)


@_guard
def _report(inputs, out):
    rows = []
    for path in inputs:
        doc = runio.read_json(Path(path))
        for name, entry in doc["models"].items():
            rows.append({
                "domain": doc["domain"], "objective": name,
                "seed": doc["resolved_config"].get("seed"),
                "lambda": entry.get("lambda"),
                "eb": entry.get("eb"), "rollout_loss": entry.get("rollout_loss"),
                "tf_loss": entry.get("tf_loss"), "rollout_se": entry.get("rollout_se"),
                "bridge": entry.get("bridge"), "garden": entry.get("garden"),
                "spearman_rho": entry.get("spearman_rho"),
                "mean_ct_bridge": entry.get("mean_ct_bridge"),
                "mean_ct_garden": entry.get("mean_ct_garden"),
            })
    runio.atomic_write(Path(out), runio.report_rows_csv(rows))
    click.echo(f"wrote {out} ({len(rows)} rows)")


if __name__ == "__main__":
    main()
