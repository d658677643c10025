"""Regenerate demo/cassette.json by running the demo config against the toy world.

    python demo/record_cassette.py [--out cassette.json]
"""

from __future__ import annotations

import argparse
import sys
import tempfile
from pathlib import Path

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE))

from toy_world import toy_provider  # noqa: E402

from ted.config import load_config  # noqa: E402
from ted.gateway import RecordingProvider  # noqa: E402
from ted.pipeline import run_eval  # noqa: E402


def record(cassette: Path) -> int:
    cassette.unlink(missing_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        cfg = load_config(HERE / "config.yaml").with_overrides(out=tmp, provider=f"record:{cassette}")
        recorder = RecordingProvider(toy_provider(), cassette)
        state = run_eval(cfg, gateway=recorder)
    if state.failures:
        raise SystemExit(f"recording run failed: {[f.to_dict() for f in state.failures]}")
    return recorder.calls


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=HERE / "cassette.json")
    args = parser.parse_args()
    calls = record(args.out)
    print(f"recorded {calls} calls to {args.out}")


if __name__ == "__main__":
    main()
