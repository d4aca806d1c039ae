"""Command-line entry points.

Every command is a thin client of the HTTP service: it builds the app
in-process, posts the same request bodies a network client would, and writes
the response payloads as artifacts under --out. Each artifact directory gets
a config echo, config hash, seed, and package version so any result can be
re-run bit-identically.
"""

from __future__ import annotations

import json
import os
from typing import Dict, Optional, Tuple

import click
import pandas as pd

from .service import create_app, package_version


class _DomainExit(click.ClickException):
    exit_code = 1


def _client():
    # sync in-process ASGI client; no socket, fully deterministic
    import warnings

    with warnings.catch_warnings():
        # the bundled starlette pairs with this httpx but warns about it
        warnings.simplefilter("ignore")
        from starlette.testclient import TestClient

    return TestClient(create_app())


def _read_config_file(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise _DomainExit(f"cannot read config {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise _DomainExit(f"config {path} is not valid JSON: {exc}")


def _json_arg(text: str, what: str) -> dict:
    """Inline JSON object, or @path to a JSON file."""
    if text.startswith("@"):
        try:
            with open(text[1:], "r", encoding="utf-8") as fh:
                return json.load(fh)
        except OSError as exc:
            raise _DomainExit(f"cannot read {what} file: {exc}")
        except json.JSONDecodeError as exc:
            raise _DomainExit(f"{what} file is not valid JSON: {exc}")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise click.UsageError(f"{what} is not valid JSON: {exc}")


def _check_provider(spec: Optional[str]) -> Optional[str]:
    if spec is None:
        return None
    ok = (
        spec in ("heuristic", "remote", "fatigue")
        or spec.startswith("mock:")
        or spec.startswith("fatigue:")
    )
    if not ok:
        raise click.UsageError(
            f"unknown provider {spec!r}; expected heuristic, mock:<path>,"
            " remote, or fatigue[:...]"
        )
    return spec


def _post(client, path: str, payload: dict) -> dict:
    resp = client.post(path, json=payload)
    if resp.status_code >= 400:
        try:
            detail = resp.json().get("detail")
        except ValueError:
            detail = resp.text
        if isinstance(detail, dict) and "errors" in detail:
            for line in detail["errors"]:
                click.echo(line, err=True)
            raise _DomainExit(detail.get("message", "invalid config"))
        raise _DomainExit(str(detail))
    return resp.json()


def _validate(client, config_doc: dict) -> Tuple[dict, str]:
    body = _post(client, "/v1/config/validate", {"config": config_doc})
    return body["normalized"], body["hash"]


def _write_artifacts(out: str, command: str, normalized: dict,
                     config_hash: str, seed: Optional[int],
                     extra: Optional[Dict[str, object]] = None) -> None:
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(normalized, fh, indent=2, sort_keys=True)
    manifest = {
        "command": command,
        "config_hash": config_hash,
        "seed": seed,
        "version": package_version(),
    }
    manifest.update(extra or {})
    with open(os.path.join(out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _dump_json(out: str, name: str, doc: object) -> None:
    with open(os.path.join(out, name), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


_config_opt = click.option(
    "--config", "config_path", required=True,
    type=click.Path(exists=True, dir_okay=False), help="Run config JSON file."
)
_seed_opt = click.option("--seed", required=True, type=int,
                         help="Run seed for the dynamic draws.")
_out_opt = click.option("--out", "out_dir", required=True,
                        type=click.Path(file_okay=False),
                        help="Directory for result artifacts.")


@click.group()
@click.version_option(package_version(), prog_name="diffabm")
def main():
    """Coupled epidemic and labor-market simulations over synthetic
    populations, with calibration and scenario analysis."""


@main.command()
@_config_opt
@click.option("--out", "out_dir", default=None,
              type=click.Path(file_okay=False),
              help="Optionally write the normalized echo and hash here.")
def validate(config_path, out_dir):
    """Check a config; echo it normalized with defaults materialized.

    Every schema violation is reported at once, one JSON-pointer line each.
    """
    client = _client()
    doc = _read_config_file(config_path)
    normalized, chash = _validate(client, doc)
    if out_dir:
        _write_artifacts(out_dir, "validate", normalized, chash, None)
    click.echo(json.dumps(normalized, indent=2, sort_keys=True))
    click.echo(f"config_hash: {chash}")


@main.command()
@_config_opt
@_out_opt
def popgen(config_path, out_dir):
    """Synthesize a population and write it as agents.csv."""
    client = _client()
    doc = _read_config_file(config_path)
    normalized, chash = _validate(client, doc)
    body = _post(client, "/v1/popgen", {"config": doc})
    _write_artifacts(out_dir, "popgen", normalized, chash, None,
                     {"n": body["n"], "households": body["households"]})
    with open(os.path.join(out_dir, "agents.csv"), "w", encoding="utf-8") as fh:
        fh.write(body["csv"])
    click.echo(f"wrote {body['n']} agents to {out_dir}/agents.csv")


@main.command()
@_config_opt
@_seed_opt
@_out_opt
@click.option("--provider", default=None,
              help="Override the decision provider:"
              " heuristic | mock:<path> | remote.")
def simulate(config_path, seed, out_dir, provider):
    """Run one simulation and write trajectory artifacts."""
    client = _client()
    doc = _read_config_file(config_path)
    provider = _check_provider(provider)
    payload = {"config": doc, "seed": seed}
    if provider:
        payload["provider"] = provider
    body = _post(client, "/v1/simulate", payload)
    from .engine import Trajectory

    normalized = body.pop("config")
    chash = body["meta"]["config_hash"]
    _write_artifacts(out_dir, "simulate", normalized, chash, seed,
                     {"provider": provider or "config"})
    Trajectory.from_dict(body).write(out_dir)
    click.echo(f"wrote trajectory ({body['meta']['horizon']} steps)"
               f" to {out_dir}")


@main.command()
@_config_opt
@_seed_opt
@_out_opt
@click.option("--observed-cases", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="CSV with columns week,cases.")
@click.option("--observed-unemployment", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="CSV with columns month,unemployment_rate.")
@click.option("--covariates", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="Optional CSV of per-step covariates (numeric columns).")
@click.option("--epochs", default=100, type=int, show_default=True)
@click.option("--lr", default=1e-4, type=float, show_default=True)
@click.option("--hidden", default=32, type=int, show_default=True)
@click.option("--width", default=3, type=int, show_default=True,
              help="Synthetic covariate width when --covariates is absent.")
def calibrate(config_path, seed, out_dir, observed_cases,
              observed_unemployment, covariates, epochs, lr, hidden, width):
    """Fit structural parameters to observed weekly and monthly series."""
    client = _client()
    doc = _read_config_file(config_path)
    try:
        cases = pd.read_csv(observed_cases)
        unemp = pd.read_csv(observed_unemployment)
    except (OSError, ValueError) as exc:
        raise _DomainExit(f"cannot read observed series: {exc}")
    for frame, col, path in ((cases, "cases", observed_cases),
                             (unemp, "unemployment_rate",
                              observed_unemployment)):
        if col not in frame.columns:
            raise _DomainExit(f"{path}: missing column {col!r}")
    payload = {
        "config": doc,
        "observed": {
            "weekly_cases": cases["cases"].astype(float).tolist(),
            "monthly_unemployment":
                unemp["unemployment_rate"].astype(float).tolist(),
        },
        "epochs": epochs,
        "lr": lr,
        "hidden": hidden,
        "width": width,
        "seed": seed,
    }
    if covariates:
        cov = pd.read_csv(covariates)
        payload["covariates"] = cov.to_numpy(dtype=float).tolist()
    body = _post(client, "/v1/calibrate", payload)
    normalized, chash = _validate(client, doc)
    _write_artifacts(out_dir, "calibrate", normalized, chash, seed,
                     {"epochs": epochs, "lr": lr})
    _dump_json(out_dir, "model.json", body["model"])
    _dump_json(out_dir, "calibration.json", {
        "gamma0": body["gamma0"],
        "gamma1": body["gamma1"],
        "best_epoch": body["best_epoch"],
        "best_loss": body["best_loss"],
        "config_hash": body["config_hash"],
    })
    pd.DataFrame(body["history"]).to_csv(
        os.path.join(out_dir, "history.csv"), index=False)
    if body["history"]:
        click.echo(f"best epoch {body['best_epoch']}"
                   f" loss {body['best_loss']:.6g}")
    else:
        click.echo("no epochs run; model left at its initialization")


@main.group()
def analyze():
    """Retrospective, counterfactual, and prospective analyses."""


@analyze.command()
@_config_opt
@_seed_opt
@_out_opt
@click.option("--query", required=True,
              help="PollQuery JSON (inline or @file): metric, group_by,"
              " filter, window.")
@click.option("--provider", default=None)
def poll(config_path, seed, out_dir, query, provider):
    """Re-run the config at --seed and poll its end state."""
    client = _client()
    doc = _read_config_file(config_path)
    provider = _check_provider(provider)
    payload = {"config": doc, "seed": seed,
               "query": _json_arg(query, "--query")}
    if provider:
        payload["provider"] = provider
    body = _post(client, "/v1/analyze/poll", payload)
    normalized, chash = _validate(client, doc)
    _write_artifacts(out_dir, "analyze poll", normalized, chash, seed,
                     {"metric": body["metric"]})
    _dump_json(out_dir, "report.json", body)
    cols = list(body["group_by"]) + ["count", "value"]
    pd.DataFrame(body["rows"], columns=cols).to_csv(
        os.path.join(out_dir, "poll.csv"), index=False)
    click.echo(f"{len(body['rows'])} groups written to {out_dir}/poll.csv")


@analyze.command()
@_config_opt
@_seed_opt
@_out_opt
@click.option("--patch", default="{}",
              help="Dotted-path config patch JSON, e.g."
              " '{\"epi.R0\": 5.5}'.")
@click.option("--n-seeds", default=5, type=int, show_default=True)
def counterfactual(config_path, seed, out_dir, patch, n_seeds):
    """Paired baseline-vs-patched comparison under common random numbers."""
    client = _client()
    doc = _read_config_file(config_path)
    payload = {
        "config": doc,
        "patch": _json_arg(patch, "--patch"),
        "n_seeds": n_seeds,
        "seed": seed,
    }
    body = _post(client, "/v1/analyze/counterfactual", payload)
    normalized, chash = _validate(client, doc)
    _write_artifacts(out_dir, "analyze counterfactual", normalized, chash,
                     seed, {"n_seeds": n_seeds,
                            "patched_hash": body["patched_hash"]})
    _dump_json(out_dir, "report.json", body)
    cols: Dict[str, list] = {}
    for name, stats in body["per_step_deltas"].items():
        for stat, series in stats.items():
            cols[f"{name}_delta_{stat}"] = series
    frame = pd.DataFrame(cols)
    frame.insert(0, "step", range(len(frame)))
    frame.to_csv(os.path.join(out_dir, "deltas.csv"), index=False)
    click.echo(f"baseline {body['baseline_hash'][:12]}"
               f" vs patched {body['patched_hash'][:12]}:"
               f" identical={body['identical']}")


@analyze.command()
@_config_opt
@_seed_opt
@_out_opt
@click.option("--protocol-a", default="{}",
              help="Vaccine protocol overrides for the baseline arm (JSON).")
@click.option("--protocol-b", default="{}",
              help="Vaccine protocol overrides for the comparison arm (JSON).")
@click.option("--sweep", required=True,
              help="JSON {\"field\": ..., \"grid\": [...]} over the protocol"
              " field.")
@click.option("--n-seeds", default=1, type=int, show_default=True)
def prospective(config_path, seed, out_dir, protocol_a, protocol_b, sweep,
                n_seeds):
    """Sweep a protocol field and report the deaths-ratio fitness curve."""
    client = _client()
    doc = _read_config_file(config_path)
    payload = {
        "config": doc,
        "protocol_a": _json_arg(protocol_a, "--protocol-a"),
        "protocol_b": _json_arg(protocol_b, "--protocol-b"),
        "sweep": _json_arg(sweep, "--sweep"),
        "n_seeds": n_seeds,
        "seed": seed,
    }
    body = _post(client, "/v1/analyze/prospective", payload)
    normalized, chash = _validate(client, doc)
    _write_artifacts(out_dir, "analyze prospective", normalized, chash, seed,
                     {"n_seeds": body["n_seeds"], "field": body["field"]})
    _dump_json(out_dir, "report.json", body)
    pd.DataFrame({
        body["field"]: body["grid"],
        "fitness": [float("nan") if f is None else f
                    for f in body["fitness"]],
        "flagged": body["flagged"],
    }).to_csv(os.path.join(out_dir, "fitness.csv"), index=False)
    click.echo(f"threshold: {body['threshold']}")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, type=int, show_default=True)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    main()
