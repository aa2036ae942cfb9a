"""``eimlab <command> --config cfg.json --out DIR``.

Exit codes: 0 success, 2 invalid configuration, 1 runtime failure (with
``error.json`` naming the failing stage in the output directory).
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from eimlab import __version__
from eimlab.config import COMMANDS, SCHEMAS, ConfigError, config_hash, load, validate
from eimlab.io import checksums, write_json


def _versions() -> dict:
    import matplotlib
    import scipy
    import torch

    return {"eimlab": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "torch": torch.__version__, "matplotlib": matplotlib.__version__}


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eimlab", description="Encode-Identify-Manipulate editing experiments")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON config; omitted means all defaults")
    p.add_argument("--out", help="output directory (default $EIMLAB_OUT/<command>-<hash>)")
    p.add_argument("--seed", type=int, help="override the config's root seed")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--deterministic", action="store_true", help="single thread, deterministic kernels")
    p.add_argument("--print-schema", action="store_true", help="print the command's JSON schema and exit")
    return p


def _fail(code: int, doc: dict) -> int:
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    if args.print_schema:
        print(json.dumps(SCHEMAS[args.command], indent=2, sort_keys=True))
        return 0
    try:
        if args.config:
            cfg = load(args.config, args.command)
        else:
            cfg = validate(args.command, {})
        if args.seed is not None:
            cfg = validate(args.command, {**cfg, "seed": args.seed})
    except (ConfigError, OSError) as exc:
        return _fail(2, {"error": "config", "message": str(exc)})
    if args.jobs < 1:
        return _fail(2, {"error": "config", "message": "--jobs: must be at least 1"})

    jobs = args.jobs
    if args.deterministic:
        import torch

        jobs = 1
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)

    digest = config_hash(cfg)
    out = Path(args.out) if args.out else Path(os.environ.get("EIMLAB_OUT", ".")) / f"{args.command}-{digest[:12]}"
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", cfg)

    from eimlab.experiments import RUNNERS
    from eimlab.pipeline import PipelineError

    start = time.time()
    try:
        summary = RUNNERS[args.command](cfg, out, jobs)
    except Exception as exc:
        stage = exc.stage if isinstance(exc, PipelineError) else args.command
        doc = {"error": type(exc).__name__, "stage": stage, "message": str(exc),
               "traceback": traceback.format_exc()}
        write_json(out / "error.json", doc)
        return _fail(1, {k: doc[k] for k in ("error", "stage", "message")})
    end = time.time()
    write_json(out / "summary.json", summary)
    write_json(out / "manifest.json", {
        "command": args.command,
        "config_hash": digest,
        "config": cfg,
        "seed": cfg["seed"],
        "jobs": jobs,
        "deterministic": bool(args.deterministic),
        "versions": _versions(),
        "start": start,
        "end": end,
        "wall_clock_s": end - start,
        "outputs": checksums(out),
    })
    print(json.dumps({"out": str(out), "summary": summary}, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
