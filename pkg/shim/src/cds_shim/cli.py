"""Command line: load a model, then serve it.

Flags fall back to CDS_SHIM_* environment variables. The process exits
nonzero when the model cannot be loaded.
"""

from __future__ import annotations

import argparse
import os
import sys

import uvicorn

from .backend import ModelBackend, ServedModelSpec
from .server import create_app


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cds-shim",
        description="Serve a local causal LM's next-token distributions over HTTP",
    )
    parser.add_argument("--model", default=os.environ.get("CDS_SHIM_MODEL"),
                        help="model identifier or local path (env CDS_SHIM_MODEL)")
    parser.add_argument("--host", default=os.environ.get("CDS_SHIM_HOST", "127.0.0.1"))
    parser.add_argument("--port", type=int, default=int(os.environ.get("CDS_SHIM_PORT", "8080")))
    parser.add_argument("--device", default=os.environ.get("CDS_SHIM_DEVICE", "cpu"))
    parser.add_argument("--top-k", type=int, default=int(os.environ.get("CDS_SHIM_TOP_K", "128")))
    parser.add_argument("--chat-template", action="store_true",
                        default=os.environ.get("CDS_SHIM_CHAT_TEMPLATE", "") == "1",
                        help="render context_text through the tokenizer's chat template")
    parser.add_argument("--vocab-mode", choices=["auto", "enumerable", "text"],
                        default=os.environ.get("CDS_SHIM_VOCAB_MODE", "auto"))
    parser.add_argument("--stop-token", action="append", default=None,
                        help="extra stop token string (repeatable)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if not args.model:
        print("error: --model (or CDS_SHIM_MODEL) is required", file=sys.stderr)
        return 2
    spec = ServedModelSpec(
        model=args.model,
        device=args.device,
        top_k=args.top_k,
        chat_template=args.chat_template,
        extra_stop_tokens=tuple(args.stop_token or ()),
        vocab_mode=args.vocab_mode,
    )
    try:
        backend = ModelBackend(spec)
    except Exception as exc:  # noqa: BLE001 - load failures end the process
        print(f"error: could not load model {spec.model!r}: {exc}", file=sys.stderr)
        return 1
    app = create_app(backend)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


if __name__ == "__main__":
    sys.exit(main())
