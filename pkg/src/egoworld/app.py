"""EgoWorld application entrypoint (GUI + CLI subcommands + selftest)."""

from __future__ import annotations

import sys

from .cli import run
from .core.selftests import EgoWorldSelfTests


def _run_selftests_cli() -> int:
    ok, report = EgoWorldSelfTests.run()
    print(report)
    return 0 if ok else 2


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if "--selftest" in argv:
        return _run_selftests_cli()
    if not argv:
        argv = ["view"]
    return run(argv)


if __name__ == "__main__":
    raise SystemExit(main())
