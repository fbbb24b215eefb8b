"""Command-line client for the scheduling service.

Every pipeline command builds a request from the local config file (reading
dataset files client-side and inlining their samples), sends it to the HTTP
service, and writes the response documents to disk. Without ``--server`` the
app runs in-process, so no separate server is needed for local use;
``report`` aggregates local run directories and never talks to the service.

Exit codes: 0 success, 2 validation error, 3 solver error, 4 I/O error,
1 anything else.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Any, Mapping

import httpx
import yaml

from .errors import ParseError, SchedulerError, ValidationError
from .workload import load_samples

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_VALIDATION = 2
EXIT_SOLVER = 3
EXIT_IO = 4

_KIND_EXIT = {"validation": EXIT_VALIDATION, "solver": EXIT_SOLVER, "io": EXIT_IO}


class CliError(Exception):
    def __init__(self, message: str, exit_code: int):
        super().__init__(message)
        self.exit_code = exit_code


def _client(server: str | None) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=None)
    from fastapi.testclient import TestClient

    from .service.app import create_app

    return TestClient(create_app())


def _post(client: httpx.Client, path: str, payload: dict) -> dict:
    response = client.post(path, json=payload)
    if response.status_code >= 400:
        try:
            detail = response.json().get("detail")
        except ValueError:
            detail = response.text
        if isinstance(detail, Mapping) and "kind" in detail:
            raise CliError(
                f"{detail.get('message', 'request failed')}",
                _KIND_EXIT.get(detail["kind"], EXIT_UNEXPECTED),
            )
        raise CliError(f"request to {path} failed: {detail}", EXIT_VALIDATION)
    return response.json()


def _load_yaml(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}", EXIT_IO)
    with open(p, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise CliError(f"{p}: config root must be a mapping", EXIT_VALIDATION)
    return doc


def _request_config(doc: dict, args: argparse.Namespace, inline_datasets: bool = True) -> dict:
    """Project the YAML config + flag overrides onto the service schema."""
    overrides = {
        "capacity": getattr(args, "capacity", None),
        "stages": getattr(args, "stages", None),
        "timeout_s": getattr(args, "timeout", None),
        "group_size": getattr(args, "group_size", None),
        "workers": getattr(args, "workers", None),
        "seed": getattr(args, "seed", None),
    }
    doc = {**doc, **{k: v for k, v in overrides.items() if v is not None}}

    adapters = []
    for a in doc.get("adapters", []):
        entry: dict[str, Any] = {
            k: a[k]
            for k in (
                "adapter_id", "global_batch_size", "padding_multiple",
                "lora_rank", "alpha", "dropout_p",
            )
            if k in a
        }
        if "dataset" in a:
            ds = a["dataset"]
            if inline_datasets and ds.get("path"):
                try:
                    records = load_samples(ds["path"], ds.get("format"))
                except FileNotFoundError as exc:
                    raise CliError(str(exc), EXIT_IO) from None
                entry["dataset"] = {
                    "samples": [
                        {
                            "adapter_id": r.adapter_id,
                            "sample_id": r.sample_id,
                            "length": r.length_tokens,
                        }
                        for r in records
                        if r.adapter_id == entry.get("adapter_id")
                    ]
                }
            else:
                entry["dataset"] = ds
        if "distribution" in a:
            dist = dict(a["distribution"])
            count = a.get("count", dist.pop("count", 0))
            entry["distribution"] = dist
            entry["count"] = count
        adapters.append(entry)

    pipeline = doc.get("pipeline", {})
    payload: dict[str, Any] = {"adapters": adapters}
    for key in (
        "capacity", "capacity_candidates", "stages", "timeout_s", "node_limit",
        "group_size", "workers", "seed", "samples_per_microbatch",
        "time_model", "hardware",
    ):
        if key in doc and doc[key] is not None:
            payload[key] = doc[key]
    if "backward_ratio" in pipeline or "backward_ratio" in doc:
        payload["backward_ratio"] = pipeline.get("backward_ratio", doc.get("backward_ratio"))
    if pipeline.get("stage_multipliers"):
        payload["stage_multipliers"] = pipeline["stage_multipliers"]
    return payload


def _out_dir(doc: dict, args: argparse.Namespace) -> Path:
    out = getattr(args, "out", None) or doc.get("out_dir", "runs/out")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, doc: Any) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    uvicorn.run("lorasched.service.app:app", host=args.host, port=args.port)
    return EXIT_OK


def cmd_generate(args: argparse.Namespace) -> int:
    doc = _load_yaml(args.config)
    payload = {
        "config": _request_config(doc, args, inline_datasets=False),
        "adapter_ids": args.adapter or None,
    }
    # Strip file-backed datasets: generation only concerns synthetic sources.
    for a in payload["config"]["adapters"]:
        a.pop("dataset", None)
    payload["config"]["adapters"] = [a for a in payload["config"]["adapters"] if "distribution" in a]
    if not payload["config"]["adapters"]:
        raise CliError("no synthetic dataset sources in config; nothing to generate", EXIT_VALIDATION)
    with _client(args.server) as client:
        response = _post(client, "/v1/generate", payload)
    out = _out_dir(doc, args)
    written = []
    for adapter_id, records in sorted(response["datasets"].items()):
        path = out / f"{adapter_id}.{args.format}"
        if args.format == "jsonl":
            path.write_text(
                "".join(json.dumps(r, sort_keys=True) + "\n" for r in records), encoding="utf-8"
            )
        else:
            with open(path, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["adapter_id", "sample_id", "length"])
                for r in records:
                    writer.writerow([r["adapter_id"], r["sample_id"], r["length"]])
        written.append(str(path))
    print(f"wrote {len(written)} dataset file(s): {', '.join(written)}")
    return EXIT_OK


def cmd_schedule(args: argparse.Namespace) -> int:
    doc = _load_yaml(args.config)
    payload = {"config": _request_config(doc, args)}
    with _client(args.server) as client:
        response = _post(client, "/v1/schedule", payload)
    out = _out_dir(doc, args)
    _write_json(out / "schedule.json", response["schedule"])
    _write_json(out / "summary.json", response["summary"])
    s = response["summary"]
    print(
        f"scheduled {s['sample_count']} samples from {s['adapter_count']} adapter(s): "
        f"{s['microbatches']} microbatches, {s['noops']} no-ops, "
        f"solver histogram {s['solver_used']}, wall {s['wall_seconds']:.3f}s"
    )
    print(f"wrote {out / 'schedule.json'} and {out / 'summary.json'}")
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    doc = _load_yaml(args.config)
    out = _out_dir(doc, args)
    if args.compare:
        payload = {"config": _request_config(doc, args), "policies": args.policy or None}
        with _client(args.server) as client:
            response = _post(client, "/v1/compare", payload)
        _write_json(out / "report.json", response)
        for policy, res in sorted(response["policies"].items()):
            print(
                f"{policy}: bubble_ratio={res['bubble_ratio']:.4f} "
                f"throughput={res['throughput_tokens_per_s']:.1f} tok/s "
                f"total={res['total_time_s']:.4f}s"
            )
    else:
        if not args.schedule:
            raise CliError("simulate needs --schedule FILE or --compare", EXIT_VALIDATION)
        sched_path = Path(args.schedule)
        if not sched_path.exists():
            raise CliError(f"schedule file not found: {sched_path}", EXIT_IO)
        try:
            schedule_doc = json.loads(sched_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CliError(f"{sched_path}: invalid JSON ({exc.msg})", EXIT_IO) from None
        request_cfg = _request_config(doc, args, inline_datasets=False)
        payload = {
            "schedule": schedule_doc,
            "time_model": request_cfg.get("time_model", {}),
            "hardware": request_cfg.get("hardware"),
            "stages": getattr(args, "stages", None),
            "backward_ratio": request_cfg.get("backward_ratio", 2.0),
            "stage_multipliers": request_cfg.get("stage_multipliers"),
            "record_trace": bool(args.trace),
        }
        with _client(args.server) as client:
            response = _post(client, "/v1/simulate", payload)
        _write_json(out / "report.json", response)
        if args.trace:
            (out / "trace.txt").write_text(
                "".join(line + "\n" for line in response.get("trace", [])), encoding="utf-8"
            )
        res = response["result"]
        print(
            f"bubble_ratio={res['bubble_ratio']:.6f} "
            f"throughput={res['throughput_tokens_per_s']:.1f} tok/s "
            f"total={res['total_time_s']:.6f}s"
        )
    print(f"wrote {out / 'report.json'}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    doc = _load_yaml(args.config)
    payload: dict[str, Any] = {"config": _request_config(doc, args)}
    if args.candidates:
        payload["candidates"] = [int(c) for c in args.candidates.split(",")]
    with _client(args.server) as client:
        response = _post(client, "/v1/sweep", payload)
    out = _out_dir(doc, args)
    _write_json(out / "sweep.json", response)
    for row in response["candidates"]:
        print(
            f"capacity {row['capacity']}: {row['throughput_tokens_per_s']:.1f} tok/s "
            f"(bubble {row['bubble_ratio']:.4f})"
        )
    print(f"chosen capacity: {response['chosen_capacity']}")
    return EXIT_OK


def _run_rows(run_dir: Path) -> tuple[dict | None, dict | None]:
    summary = report = None
    if (run_dir / "summary.json").exists():
        summary = json.loads((run_dir / "summary.json").read_text(encoding="utf-8"))
    if (run_dir / "report.json").exists():
        report = json.loads((run_dir / "report.json").read_text(encoding="utf-8"))
    return summary, report


def cmd_report(args: argparse.Namespace) -> int:
    root = Path(args.run_dir)
    if not root.exists():
        raise CliError(f"run directory not found: {root}", EXIT_IO)
    candidates = [root] + sorted(p for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    runs = []
    for d in candidates:
        summary, report = _run_rows(d)
        if summary is None and report is None:
            continue
        runs.append((d, summary, report))
    if not runs:
        raise CliError(
            f"no run outputs found under {root} "
            f"(looked for summary.json / report.json)", EXIT_IO,
        )

    run_rows = []
    adapter_rows = []
    policy_rows = []
    for d, summary, report in runs:
        name = d.name if d != root else root.name
        row = {"run": name, "adapter_count": "", "samples": "", "microbatches": "",
               "noops": "", "wall_seconds": "", "bubble_ratio": "", "throughput_tokens_per_s": ""}
        if summary:
            row.update(
                adapter_count=summary.get("adapter_count", ""),
                samples=summary.get("sample_count", ""),
                microbatches=summary.get("microbatches", ""),
                noops=summary.get("noops", ""),
                wall_seconds=summary.get("wall_seconds", ""),
            )
            for st in summary.get("adapter_stats", []):
                adapter_rows.append({"run": name, **st})
        if report:
            if report.get("mode") == "compare":
                for policy, res in sorted(report["policies"].items()):
                    policy_rows.append({
                        "run": name,
                        "policy": policy,
                        "bubble_ratio": res["bubble_ratio"],
                        "throughput_tokens_per_s": res["throughput_tokens_per_s"],
                        "total_time_s": res["total_time_s"],
                    })
                fused = report["policies"].get("fused_schedule")
                if fused:
                    row["bubble_ratio"] = fused["bubble_ratio"]
                    row["throughput_tokens_per_s"] = fused["throughput_tokens_per_s"]
            elif "result" in report:
                row["bubble_ratio"] = report["result"]["bubble_ratio"]
                row["throughput_tokens_per_s"] = report["result"]["throughput_tokens_per_s"]
        run_rows.append(row)

    run_rows.sort(key=lambda r: (r["adapter_count"] if r["adapter_count"] != "" else 1 << 30, r["run"]))
    out = Path(args.out) if args.out else root
    out.mkdir(parents=True, exist_ok=True)

    def write_csv(path: Path, rows: list[dict]):
        if not rows:
            return None
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
        return path

    written = [
        p for p in (
            write_csv(out / "runs.csv", run_rows),
            write_csv(out / "adapters.csv", adapter_rows),
            write_csv(out / "policies.csv", policy_rows),
        ) if p
    ]
    header = f"{'run':<20} {'adapters':>8} {'samples':>8} {'microbatches':>12} {'noops':>6} {'bubble':>8}"
    print(header)
    for r in run_rows:
        bubble = f"{r['bubble_ratio']:.4f}" if r["bubble_ratio"] != "" else "-"
        print(
            f"{r['run']:<20} {str(r['adapter_count']):>8} {str(r['samples']):>8} "
            f"{str(r['microbatches']):>12} {str(r['noops']):>6} {bubble:>8}"
        )
    print(f"wrote {', '.join(str(p) for p in written)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lorasched",
        description="Schedule and simulate concurrent multi-adapter fine-tuning jobs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, config_required: bool = True):
        p.add_argument("--config", required=config_required, help="YAML run configuration")
        p.add_argument("--server", default=None, help="service URL; in-process when omitted")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--capacity", type=int, default=None)
        p.add_argument("--stages", type=int, default=None)
        p.add_argument("--timeout", type=float, default=None, help="solver timeout per stage per batch")
        p.add_argument("--group-size", dest="group_size", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("generate", help="synthesize datasets from the config's distributions")
    common(p)
    p.add_argument("--adapter", action="append", help="only this adapter (repeatable)")
    p.add_argument("--format", choices=["jsonl", "csv"], default="jsonl")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("schedule", help="plan a schedule and write schedule.json + summary.json")
    common(p)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("simulate", help="simulate a schedule file or compare policies")
    common(p)
    p.add_argument("--schedule", default=None, help="schedule.json to simulate")
    p.add_argument("--compare", action="store_true", help="run the policy comparison")
    p.add_argument("--policy", action="append", help="policy to include in compare (repeatable)")
    p.add_argument("--trace", action="store_true", help="write a line-per-event trace")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="profile candidate token capacities")
    common(p)
    p.add_argument("--candidates", default=None, help="comma-separated capacities")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="aggregate run outputs into CSV tables")
    p.add_argument("run_dir")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SchedulerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except httpx.HTTPError as exc:
        print(f"error: cannot reach service ({exc})", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
