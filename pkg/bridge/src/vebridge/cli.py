"""Bridge entry point: serve a torch encoder over the wire protocol.

    vebridge serve --model vit_b_32 --port 9700
    vebridge serve --model micro:/path/to/encoder.aenc --stdio

``VEBRIDGE_CACHE_DIR`` overrides the torch model cache directory. A model
that fails to load refuses to start (exit 1) before any socket is bound.
"""

from __future__ import annotations

import argparse
import logging
import sys
import threading

from .models import ModelLoadError, load_model
from .server import BridgeServer, serve_stdio


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vebridge")
    sub = parser.add_subparsers(dest="command", required=True)
    serve = sub.add_parser("serve", help="serve one encoder model")
    serve.add_argument("--model", required=True, help="micro:<snapshot> or a torchvision id")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=0)
    serve.add_argument("--stdio", action="store_true", help="serve on stdin/stdout")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        model = load_model(args.model)
    except ModelLoadError as exc:
        print(f"ERROR: {exc}", file=sys.stderr)
        return 1
    print(
        f"serving {model.identifier}: N={model.n} d={model.d} layers={model.layers} "
        f"attention taps at layers {list(model.attention_layers)}",
        file=sys.stderr,
    )
    if args.stdio:
        serve_stdio(model, sys.stdin.buffer, sys.stdout.buffer)
        return 0
    server = BridgeServer(model, host=args.host, port=args.port).start()
    print(f"LISTENING {server.host} {server.port}", flush=True)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
