#!/usr/bin/env python3
"""
MCP server entrypoint for the tracking-funnel tools.
"""

import argparse
import logging
import sys
from pathlib import Path

# Add the parent directory to the path so we can import our modules
sys.path.insert(0, str(Path(__file__).parent.parent))

from tracking_funnels.server import create_server

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Tracking Funnels MCP Server")
    parser.add_argument(
        "--transport",
        choices=["stdio", "sse"],
        default="stdio",
        help="Transport mechanism (default: stdio)"
    )
    parser.add_argument(
        "--host",
        default="localhost",
        help="Host for SSE transport (default: localhost)"
    )
    parser.add_argument(
        "--port",
        type=int,
        default=8000,
        help="Port for SSE transport (default: 8000)"
    )
    parser.add_argument(
        "--verbose",
        "-v",
        action="store_true",
        help="Enable verbose logging"
    )
    return parser


def configure(server, args: argparse.Namespace):
    """Apply the SSE bind address; stdio ignores it."""
    if args.transport == "sse":
        server.settings.host = args.host
        server.settings.port = args.port
    return server


def main(argv: list[str] | None = None):
    """Main entrypoint for the MCP server."""
    args = build_parser().parse_args(argv)

    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        server = configure(create_server(), args)
        if args.transport == "sse":
            logger.info("Using SSE transport on %s:%s", args.host, args.port)
        else:
            logger.info("Using stdio transport")
        server.run(transport=args.transport)
    except KeyboardInterrupt:
        logger.info("Server stopped by user")
    except Exception as e:
        logger.error(f"Server error: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()
