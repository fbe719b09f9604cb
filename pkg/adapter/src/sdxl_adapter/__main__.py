"""Serve the wire protocol: ``sdxl-adapter --config config.json --port 8700``."""

from __future__ import annotations

import argparse

import uvicorn

from .config import AdapterConfig, load_config
from .server import create_app


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sdxl-adapter")
    parser.add_argument("--config", default=None,
                        help="JSON config file (defaults apply without one)")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8700)
    args = parser.parse_args(argv)

    config = load_config(args.config) if args.config else AdapterConfig()
    uvicorn.run(create_app(config), host=args.host, port=args.port)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
