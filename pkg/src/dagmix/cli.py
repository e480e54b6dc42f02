"""Command-line front end.

Subcommands: ``fit``, ``simulate``, ``identify``, ``effects``,
``describe``.  Every run writes a ``manifest.json`` with the command,
the seed actually used, package versions, and input hashes, so results
can be reproduced bit for bit.  Output files are written with a
``.partial`` suffix and renamed only on success.

Exit codes: 0 success, 2 usage error, 3 model/data validation error,
4 numerical failure.
"""

from __future__ import annotations

import functools
import hashlib
import json
import os
import secrets
import sys

import click
import numpy as np

from . import __version__, causal, em, inference
from .errors import DataError, ModelSemanticError, ModelSyntaxError, NumericalError
from .model import describe_model, load_model, validate

VALIDATION_EXIT = 3
NUMERICAL_EXIT = 4


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_text(path, text: str) -> None:
    partial = str(path) + ".partial"
    with open(partial, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(partial, path)


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def _write_manifest(out_dir, subcommand: str, seed, inputs: dict, outputs: list) -> None:
    manifest = {
        "command": sys.argv,
        "subcommand": subcommand,
        "seed": seed,
        "versions": {
            "dagmix": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
        "inputs": {str(p): _sha256(p) for p in inputs.values() if p is not None},
        "outputs": outputs,
    }
    _write_text(os.path.join(out_dir, "manifest.json"), _json_text(manifest))


def _resolve_seed(seed) -> int:
    # A missing seed is drawn once and recorded, so every run is
    # reproducible from its manifest.
    return int(seed) if seed is not None else secrets.randbelow(2**31 - 1)


def _handle_errors(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (ModelSyntaxError, ModelSemanticError, DataError) as exc:
            _emit_error(exc)
            sys.exit(VALIDATION_EXIT)
        except NumericalError as exc:
            _emit_error(exc)
            sys.exit(NUMERICAL_EXIT)

    return wrapper


def _emit_error(exc: Exception) -> None:
    record = {"error": type(exc).__name__, "message": str(exc)}
    click.echo(json.dumps(record), err=True)


def _load_params(path, model):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if "beta" not in doc:
        raise DataError(f"{path} does not hold a 'beta' coefficient vector")
    from .model import param_layout

    layout = param_layout(model)
    values = np.asarray(doc["beta"], dtype=float)
    if values.shape != (layout.size,):
        raise DataError(
            f"coefficient vector in {path} has length {values.size}, expected {layout.size}"
        )
    return values


def _parse_covariates(pairs) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise click.UsageError(f"--covariate expects NAME=VALUE, got {pair!r}")
        name, _, value = pair.partition("=")
        try:
            out[name] = float(value)
        except ValueError as exc:
            raise click.UsageError(f"covariate value {value!r} is not numeric") from exc
    return out


@click.group()
@click.version_option(version=__version__)
def main():
    """Fit categorical DAG models with latent nodes and evaluate causal effects."""


@main.command("fit")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--restarts", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--max-iter", type=click.IntRange(min=1), default=5000, show_default=True)
@click.option("--tol-loglik", type=float, default=1e-8, show_default=True)
@click.option("--tol-param", type=float, default=1e-6, show_default=True)
@click.option("--threads", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--se", type=click.Choice(["opg", "expected", "none"]), default="opg",
              show_default=True, help="Standard-error method.")
@click.option("--canonicalize", is_flag=True, help="Reorder latent categories after fitting.")
@click.option("--format", "fmt", type=click.Choice(["json", "csv", "text"]), default="json",
              show_default=True)
@_handle_errors
def fit_cmd(model_path, data_path, out_dir, seed, restarts, max_iter, tol_loglik,
            tol_param, threads, se, canonicalize, fmt):
    """Maximum-likelihood fit; writes fit.json and a manifest."""
    os.makedirs(out_dir, exist_ok=True)
    model = load_model(model_path)
    data = em.Dataset.from_csv(data_path, model)
    used_seed = _resolve_seed(seed)
    result = em.fit(
        model,
        data,
        n_restarts=restarts,
        max_iter=max_iter,
        tol_loglik=tol_loglik,
        tol_param=tol_param,
        seed=used_seed,
        threads=threads,
        canonicalize=canonicalize,
    )
    if se != "none":
        inference.attach_standard_errors(result, model, data, method=se)
    doc = result.to_json_dict(model)
    outputs = ["fit.json"]
    _write_text(os.path.join(out_dir, "fit.json"), _json_text(doc))
    if fmt == "text":
        lines = [f"log-likelihood {result.loglik:.6f}   AIC {result.aic:.2f}   BIC {result.bic:.2f}"]
        width = max(len(e["label"]) for e in doc["estimates"])
        for e in doc["estimates"]:
            se_text = "" if e["se"] is None else f"  (se {e['se']:.4f})"
            lines.append(f"{e['label'].ljust(width)}  {e['estimate']: .4f}{se_text}")
        _write_text(os.path.join(out_dir, "fit.txt"), "\n".join(lines) + "\n")
        outputs.append("fit.txt")
    elif fmt == "csv":
        rows = ["label,node,source,level,estimate,se"]
        for e in doc["estimates"]:
            se_text = "" if e["se"] is None else repr(e["se"])
            rows.append(
                f"{e['label']},{e['node']},{e['source']},{e['level']},{e['estimate']!r},{se_text}"
            )
        _write_text(os.path.join(out_dir, "estimates.csv"), "\n".join(rows) + "\n")
        outputs.append("estimates.csv")
    _write_manifest(out_dir, "fit", used_seed,
                    {"model": model_path, "data": data_path}, outputs)
    click.echo(f"fit: loglik {result.loglik:.6f}, converged {result.converged}, "
               f"outputs in {out_dir}")


@main.command("simulate")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--params", "params_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="fit.json or any JSON carrying a 'beta' vector.")
@click.option("--n", "n_units", required=True, type=click.IntRange(min=1))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--covariate", "covariate_pairs", multiple=True,
              help="NAME=VALUE, repeatable; constant covariate values to simulate at.")
@click.option("--keep-latent", is_flag=True,
              help="Also write latent columns to data_latent.csv (debug output).")
@_handle_errors
def simulate_cmd(model_path, params_path, n_units, out_dir, seed, covariate_pairs, keep_latent):
    """Draw ancestral samples from a fitted model; writes data.csv."""
    os.makedirs(out_dir, exist_ok=True)
    model = load_model(model_path)
    values = _load_params(params_path, model)
    used_seed = _resolve_seed(seed)
    covariates = _parse_covariates(covariate_pairs) or None
    if keep_latent:
        data, latents = causal.sample_data(model, values, n_units, used_seed,
                                           covariates=covariates, return_latent=True)
    else:
        data = causal.sample_data(model, values, n_units, used_seed, covariates=covariates)
    frame = data.to_frame()
    _write_text(os.path.join(out_dir, "data.csv"), frame.to_csv(index=False))
    outputs = ["data.csv"]
    if keep_latent:
        debug = frame.copy()
        for k, i in enumerate(model.latent_indices):
            debug[model.node(i).name] = latents[:, k]
        _write_text(os.path.join(out_dir, "data_latent.csv"), debug.to_csv(index=False))
        outputs.append("data_latent.csv")
    _write_manifest(out_dir, "simulate", used_seed,
                    {"model": model_path, "params": params_path}, outputs)
    click.echo(f"simulate: wrote {n_units} records to {out_dir}/data.csv")


@main.command("identify")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--points", type=click.IntRange(min=1), default=20, show_default=True)
@click.option("--seed", type=int, default=None)
@_handle_errors
def identify_cmd(model_path, out_dir, points, seed):
    """Numerical local-identifiability check; writes identifiability.json."""
    os.makedirs(out_dir, exist_ok=True)
    model = load_model(model_path)
    used_seed = _resolve_seed(seed)
    report = inference.identifiability_check(model, n_points=points, seed=used_seed)
    _write_text(os.path.join(out_dir, "identifiability.json"), report.to_json() + "\n")
    _write_manifest(out_dir, "identify", used_seed, {"model": model_path},
                    ["identifiability.json"])
    click.echo(f"identify: {report.verdict} "
               f"({report.n_params} parameters, {report.observed_df} observed df)")


@main.command("effects")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--params", "params_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--query", "query_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--covariate", "covariate_pairs", multiple=True,
              help="NAME=VALUE, repeatable; covariate values to evaluate at.")
@click.option("--format", "fmt", type=click.Choice(["json", "text"]), default="json",
              show_default=True)
@_handle_errors
def effects_cmd(model_path, params_path, query_path, out_dir, covariate_pairs, fmt):
    """Evaluate intervention and natural-direct-effect queries."""
    os.makedirs(out_dir, exist_ok=True)
    model = load_model(model_path)
    values = _load_params(params_path, model)
    with open(query_path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"malformed query file: {exc}") from exc
    queries = causal.parse_effect_queries(doc, model)
    covariates = _parse_covariates(covariate_pairs) or None
    estimates = [causal.evaluate_effect(model, values, q, covariates) for q in queries]
    payload = {"effects": [est.to_json_dict() for est in estimates]}
    _write_text(os.path.join(out_dir, "effects.json"), _json_text(payload))
    outputs = ["effects.json"]
    table = causal.format_effect_table(estimates)
    if fmt == "text":
        _write_text(os.path.join(out_dir, "effects.txt"), table + "\n")
        outputs.append("effects.txt")
    _write_manifest(out_dir, "effects", None,
                    {"model": model_path, "params": params_path, "query": query_path},
                    outputs)
    click.echo(table)


@main.command("describe")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", default=None, type=click.Path(file_okay=False))
@_handle_errors
def describe_cmd(model_path, out_dir):
    """Human-readable model summary (index, name, categories, logit, parents)."""
    model = load_model(model_path)
    report = validate(model)
    text = describe_model(model)
    summary = (
        f"\n{len(model.nodes)} nodes "
        f"({len(model.latent_indices)} latent), {report.n_params} free parameters, "
        f"{report.observed_cells} observed cells"
    )
    click.echo(text + summary)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _write_text(os.path.join(out_dir, "model.txt"), text + summary + "\n")
        _write_manifest(out_dir, "describe", None, {"model": model_path}, ["model.txt"])


if __name__ == "__main__":
    main()
