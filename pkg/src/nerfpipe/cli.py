"""The ``nerfpipe`` command.

Exit codes:
    0  success
    1  other error (including checksum mismatch on download)
    2  usage error
    3  job, node or file not found
    4  result not ready
    5  validation error (bad manifest, scenario or model file)
    6  server unreachable
"""

from __future__ import annotations

import hashlib
import json
import os
from importlib import resources
from pathlib import Path
from typing import Optional

import click
import httpx

from . import errors as E

CHUNK_BYTES = 8 * 1024 * 1024
EXIT_ERROR, EXIT_USAGE, EXIT_NOT_FOUND, EXIT_NOT_READY, EXIT_VALIDATION, EXIT_CONNECTION = 1, 2, 3, 4, 5, 6
DEFAULT_SERVER = "http://127.0.0.1:8080"


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, E.ResultNotReadyError):
        return EXIT_NOT_READY
    if isinstance(exc, (E.NotFoundError, FileNotFoundError)):
        return EXIT_NOT_FOUND
    if isinstance(exc, (E.ValidationError, E.ConfigError)):
        return EXIT_VALIDATION
    if isinstance(exc, httpx.TransportError):
        return EXIT_CONNECTION
    return EXIT_ERROR


class ApiClient:
    """Thin client over the HTTP API; server errors come back as package exceptions."""

    def __init__(self, server: str, http: Optional[httpx.Client] = None):
        self.http = http or httpx.Client(base_url=server, timeout=60.0)

    def _check(self, resp: httpx.Response) -> httpx.Response:
        if resp.status_code < 400:
            return resp
        try:
            body = resp.json()
            name, detail = body.get("error"), body.get("detail", resp.text)
        except ValueError:
            name, detail = None, resp.text
        cls = getattr(E, name, None) if name else None
        if not (isinstance(cls, type) and issubclass(cls, E.NerfPipeError)):
            cls = E.ValidationError if resp.status_code == 422 else E.NerfPipeError
        raise cls(detail if isinstance(detail, str) else json.dumps(detail))

    def request(self, method: str, url: str, **kw) -> httpx.Response:
        return self._check(self.http.request(method, url, **kw))

    def create_job(self, manifest: dict, webhook_url: Optional[str] = None) -> dict:
        body = {"manifest": manifest}
        if webhook_url:
            body["webhook_url"] = webhook_url
        return self.request("POST", "/jobs", json=body).json()

    def upload(self, job_id: str, path: str, data: bytes, token: str) -> dict:
        headers = {"Authorization": f"Bearer {token}", "Content-Type": "application/octet-stream"}
        return self.request("PUT", f"/jobs/{job_id}/data/{path}", content=data, headers=headers).json()

    def complete_upload(self, job_id: str, details: Optional[dict] = None) -> dict:
        return self.request("POST", f"/jobs/{job_id}/complete-upload", json=details or {}).json()

    def status(self, job_id: str) -> dict:
        return self.request("GET", f"/jobs/{job_id}").json()

    def jobs(self) -> list:
        return self.request("GET", "/jobs").json()

    def nodes(self) -> list:
        return self.request("GET", "/nodes").json()

    def result(self, job_id: str) -> tuple[bytes, str]:
        resp = self.request("GET", f"/jobs/{job_id}/result")
        return resp.content, resp.headers.get("x-checksum-sha256", "")


def upload_plan(root: Path) -> list[tuple[Path, str, int, int]]:
    """(file, blob path, offset, length) for every upload, chunked at 8 MiB.

    Files up to one chunk keep their relative path; larger files become
    ``<path>.part-00000``, ``<path>.part-00001`` and so on.
    """
    files = [root] if root.is_file() else sorted(p for p in root.rglob("*") if p.is_file())
    plan = []
    for f in files:
        rel = f.name if root.is_file() else f.relative_to(root).as_posix()
        size = f.stat().st_size
        if size <= CHUNK_BYTES:
            plan.append((f, rel, 0, size))
            continue
        for i, off in enumerate(range(0, size, CHUNK_BYTES)):
            plan.append((f, f"{rel}.part-{i:05d}", off, min(CHUNK_BYTES, size - off)))
    return plan


def _emit(ctx: click.Context, rows, table_fn) -> None:
    if ctx.obj["format"] == "json-lines":
        for row in rows if isinstance(rows, list) else [rows]:
            click.echo(json.dumps(row, sort_keys=True))
    else:
        click.echo(table_fn(rows), nl=False)


def _fmt(v, spec: str = ".3f") -> str:
    return "-" if v is None else format(v, spec)


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (E.NerfPipeError, httpx.TransportError, FileNotFoundError) as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(exit_code_for(exc))


@click.group(cls=_Group)
@click.option("--server", default=lambda: os.environ.get("NERFPIPE_SERVER", DEFAULT_SERVER), show_default=DEFAULT_SERVER, help="Orchestrator base URL.")
@click.option("--format", "fmt", type=click.Choice(["table", "json-lines"]), default="table", help="Output format.")
@click.option("--seed", type=int, default=None, help="Override the random seed (simulate).")
@click.pass_context
def main(ctx: click.Context, server: str, fmt: str, seed: Optional[int]):
    """Submit and inspect reconstruction jobs, run simulations, score point clouds."""
    ctx.ensure_object(dict)
    ctx.obj.setdefault("http", None)
    ctx.obj.update(server=server, format=fmt, seed=seed)


def _client(ctx: click.Context) -> ApiClient:
    return ApiClient(ctx.obj["server"], ctx.obj.get("http"))


@main.command()
@click.argument("data", type=click.Path(exists=True, readable=True, path_type=Path))
@click.option("--name", help="Dataset label (defaults to the file or directory name).")
@click.option("--kind", type=click.Choice(["image_set", "video"]), default=None, help="Defaults to video for a single file, image_set for a directory.")
@click.option("--positional/--no-positional", default=False, help="Images carry positional (GPS) data.")
@click.option("--webhook", default=None, help="URL notified on completion.")
@click.pass_context
def submit(ctx, data: Path, name, kind, positional, webhook):
    """Create a job, upload DATA in 8 MiB chunks and enqueue it."""
    plan = upload_plan(data)
    if not plan:
        raise E.ValidationError(f"{data} contains no files")
    manifest = {
        "name": name or data.name,
        "kind": kind or ("video" if data.is_file() else "image_set"),
        "has_positional_data": positional,
        "approx_size_bytes": sum(p[3] for p in plan),
    }
    client = _client(ctx)
    grant = client.create_job(manifest, webhook)
    job_id = grant["job_id"]
    for i, (f, blob_path, off, length) in enumerate(plan, 1):
        with open(f, "rb") as fh:
            fh.seek(off)
            client.upload(job_id, blob_path, fh.read(length), grant["upload_token"])
        if ctx.obj["format"] == "table" and len(plan) > 1:
            click.echo(f"uploaded {i}/{len(plan)}", err=True)
    view = client.complete_upload(job_id)
    if ctx.obj["format"] == "json-lines":
        click.echo(json.dumps({"job_id": job_id, "state": view["state"], "blobs": len(plan)}, sort_keys=True))
    else:
        click.echo(job_id)


def _status_table(view: dict) -> str:
    lines = [
        f"job       {view['id']}",
        f"name      {view['manifest']['name']} ({view['manifest']['kind']})",
        f"state     {view['state']}",
        f"attempts  {view['attempts']}",
        f"node      {view.get('assigned_node') or '-'}",
    ]
    if view.get("failure_reason"):
        lines.append(f"reason    {view['failure_reason']}")
    lines.append("")
    lines.append(f"{'state':<14}{'entered at (s)':>16}")
    for step in view.get("history", []):
        lines.append(f"{step['to']:<14}{step['at']:>16.3f}")
    return "\n".join(lines) + "\n"


@main.command()
@click.argument("job_id")
@click.pass_context
def status(ctx, job_id):
    """Show a job's state and timings."""
    _emit(ctx, _client(ctx).status(job_id), _status_table)


@main.command()
@click.argument("job_id")
@click.option("-o", "--output", type=click.Path(dir_okay=False, path_type=Path), help="Where to write the artifact (default <job>.bin).")
@click.pass_context
def result(ctx, job_id, output: Optional[Path]):
    """Download a completed job's artifact, verifying its checksum."""
    data, expected = _client(ctx).result(job_id)
    actual = hashlib.sha256(data).hexdigest()
    if expected and actual != expected:
        raise E.NerfPipeError(f"checksum mismatch: server says {expected}, got {actual}")
    output = output or Path(f"{job_id}.bin")
    output.write_bytes(data)
    _emit(ctx, {"job_id": job_id, "path": str(output), "size": len(data), "checksum": actual},
          lambda r: f"wrote {r['size']} bytes to {r['path']} (sha256 {r['checksum']})\n")


@main.command()
@click.pass_context
def jobs(ctx):
    """List all jobs."""

    def table(rows):
        out = [f"{'job':<12}{'name':<20}{'state':<14}{'tries':>6}  node"]
        out += [f"{r['id']:<12}{r['name'][:19]:<20}{r['state']:<14}{r['attempts']:>6}  {r['assigned_node'] or '-'}" for r in rows]
        return "\n".join(out) + "\n"

    _emit(ctx, _client(ctx).jobs(), table)


@main.command()
@click.pass_context
def nodes(ctx):
    """List fleet nodes with state and trailing-window utilization."""

    def table(rows):
        out = [f"{'node':<12}{'class':<20}{'state':<14}{'job':<12}{'avg cpu':>9}{'peak cpu':>9}{'peak MB':>9}"]
        for r in rows:
            out.append(
                f"{r['id']:<12}{r['class']:<20}{r['state']:<14}{r['current_job'] or '-':<12}"
                f"{_fmt(r['avg_cpu'], '.2f'):>9}{_fmt(r['peak_cpu'], '.2f'):>9}{_fmt(r['peak_mem_mb'], '.0f'):>9}"
            )
        return "\n".join(out) + "\n"

    _emit(ctx, _client(ctx).nodes(), table)


def resolve_scenario(name: str) -> Path:
    """A scenario path, or the name of one shipped with the package."""
    p = Path(name)
    if p.exists():
        return p
    packaged = resources.files("nerfpipe") / "scenarios" / f"{name}.yaml"
    if packaged.is_file():
        return Path(str(packaged))
    raise FileNotFoundError(f"no scenario file {name!r} (and no packaged scenario of that name)")


@main.command()
@click.argument("scenario")
@click.option("-o", "--output", type=click.Path(dir_okay=False, path_type=Path), help="Also write the JSON report here.")
@click.pass_context
def simulate(ctx, scenario, output: Optional[Path]):
    """Run SCENARIO (a file, or a packaged name such as two_workloads) on a virtual clock."""
    from dataclasses import replace

    from .simulation import dump_report, format_report, load_scenario, run_scenario

    cfg = load_scenario(resolve_scenario(scenario))
    if ctx.obj["seed"] is not None:
        cfg = replace(cfg, seed=ctx.obj["seed"])
    report = run_scenario(cfg)
    if output:
        output.write_text(dump_report(report), encoding="utf-8")
    if ctx.obj["format"] == "json-lines":
        click.echo(json.dumps(report, sort_keys=True))
    else:
        click.echo(format_report(report), nl=False)


@main.command()
@click.argument("paths", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--k", "k", type=click.IntRange(min=3), default=30, show_default=True, help="Neighbours per point.")
@click.option("--bins", type=click.IntRange(min=1), default=256, show_default=True, help="Histogram bins for entropy.")
@click.option("--model", type=click.Path(exists=True, dir_okay=False, path_type=Path), help="Linear model (JSON or YAML) for the overall score.")
@click.option("--format", "fmt", type=click.Choice(["table", "json-lines"]), default=None, help="Overrides the global --format.")
@click.pass_context
def pcq(ctx, paths, k, bins, model, fmt):
    """Geometric quality statistics for one or more point clouds (PLY or XYZ)."""
    from .pcq import LinearModel, cloud_metrics, format_table, overall_score, read_point_cloud

    lm = LinearModel.load(model) if model else None
    columns = {}
    for p in paths:
        stats = cloud_metrics(read_point_cloud(p), k=k, bin_count=bins)
        if lm is not None:
            stats.overall = overall_score(stats, lm)
        columns[p.name if p.name not in columns else str(p)] = stats
    if (fmt or ctx.obj["format"]) == "json-lines":
        for name, stats in columns.items():
            click.echo(json.dumps({"cloud": name, "k": k, **stats.as_dict()}, sort_keys=True))
    else:
        click.echo(format_table(columns), nl=False)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), help="Service config file (YAML).")
@click.option("--host", default=None, help="Overrides listen.host.")
@click.option("--port", type=int, default=None, help="Overrides listen.port.")
@click.option("--no-webhooks", is_flag=True, help="Do not deliver completion webhooks.")
def serve(config_path, host, port, no_webhooks):
    """Run the HTTP orchestrator."""
    import uvicorn

    from .api import build_app
    from .config import load_service_config

    cfg = load_service_config(config_path)
    app = build_app(cfg, webhooks=not no_webhooks)
    uvicorn.run(app, host=host or cfg.host, port=port or cfg.port)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), help="Service config naming the metadata file.")
@click.option("--metadata", "metadata_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), help="Metadata store file (overrides --config).")
def export(config_path, metadata_path):
    """Dump every job record and notification as JSON lines."""
    from .config import load_service_config
    from .metadata import MetadataStore

    path = metadata_path or load_service_config(config_path).metadata_path
    if not Path(path).exists():
        raise FileNotFoundError(f"metadata store {path} does not exist")
    store = MetadataStore(path)
    try:
        click.echo(store.export_jsonl(), nl=False)
    finally:
        store.close()


if __name__ == "__main__":
    main()
